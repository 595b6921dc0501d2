"""Command-line surface: estimate, ba, simulate, eval.

Exit codes: 0 success, 1 usage error, 2 degenerate geometry or placement
failure, 3 I/O or parse failure, 4 refinement did not converge, 5 ground
truth missing.  Outputs are plain JSON/CSV plus PNG figures on the report
paths; fixed seeds give byte-identical files.  Set SFMSCALE_LOG to a
logging level name to change verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .ba import BAConfig, make_problem, optimize
from .dataset import ParseError, ValidationError, load_dataset, save_dataset
from .evaluate import evaluate, solver_pairs_from_dataset
from .geometry import Algorithm
from .simulate import (
    GridConfig,
    PlacementFailure,
    SceneConfig,
    baseline_sweep,
    generate_scene,
    grid_dataset,
    scene_to_dataset,
    sweep_d_values,
)
from .solver import AllRejected, DegenerateSystem, SolverConfig, solve_scale_robust

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEGENERATE = 2
EXIT_IO = 3
EXIT_NOT_CONVERGED = 4
EXIT_NO_GROUND_TRUTH = 5


@dataclass(frozen=True)
class RunConfig:
    """Resolved options shared by the dataset-consuming commands."""

    algorithms: tuple[Algorithm, ...]
    solver: SolverConfig = SolverConfig()
    ba: BAConfig = BAConfig()
    output: Path = Path(".")
    seed: int = 0
    dataset: Path | None = None

    def __post_init__(self):
        if self.dataset is not None and not Path(self.dataset).exists():
            raise ParseError(f"dataset path does not exist: {self.dataset}")


def _parse_algorithms(value: str) -> tuple[Algorithm, ...]:
    if value == "both":
        return (Algorithm.ALG1, Algorithm.ALG2)
    return (Algorithm.parse(value),)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    tmp.replace(path)


def _estimate_payload(estimate) -> dict:
    distance_rule = (
        "d_hat = s * L" if estimate.algorithm is Algorithm.ALG1 else "d_hat = L / s"
    )
    payload = {
        "s": estimate.s,
        "algorithm": estimate.algorithm.value,
        "pairs_used": estimate.pairs_used,
        "inlier_fraction": estimate.inlier_fraction,
        "residual_rms": estimate.residual_rms,
        "numerator": estimate.numerator,
        "denominator": estimate.denominator,
        "distance_rule": distance_rule,
    }
    if estimate.is_negative:
        payload["warning"] = "negative_scale"
    return payload


def cmd_estimate(args) -> int:
    """Closed-form scale estimate of a dataset, written as JSON."""
    config = RunConfig(
        algorithms=_parse_algorithms(args.algorithm),
        solver=SolverConfig(
            residual_threshold=args.residual_threshold,
            min_correspondences_per_pair=args.min_correspondences,
            rng_seed=args.seed,
        ),
        output=Path(args.output),
        seed=args.seed,
        dataset=Path(args.dataset),
    )
    dataset = load_dataset(config.dataset)
    payload = {"input": str(args.dataset), "estimates": {}}
    for algorithm in config.algorithms:
        estimate = solve_scale_robust(
            solver_pairs_from_dataset(dataset, algorithm), config.solver
        )
        payload["estimates"][f"algorithm_{algorithm.value}"] = _estimate_payload(estimate)
    _write_json(config.output, payload)
    return EXIT_OK


def cmd_ba(args) -> int:
    """Refine the scale by bundle adjustment; JSON report with cost trace."""
    config = RunConfig(
        algorithms=_parse_algorithms(args.algorithm),
        solver=SolverConfig(rng_seed=args.seed),
        ba=BAConfig(
            sigma_r=args.sigma_r,
            max_iterations=args.max_iterations,
            optimize_intrinsics=not args.freeze_intrinsics,
        ),
        output=Path(args.output),
        seed=args.seed,
        dataset=Path(args.dataset),
    )
    dataset = load_dataset(config.dataset)
    solver = config.solver
    ba_config = config.ba
    views = sorted(dataset.poses)
    index_of = {v: k for k, v in enumerate(views)}
    correspondences = {
        (index_of[i], index_of[j]): block
        for (i, j), block in dataset.correspondences.items()
    }

    payload = {"input": str(args.dataset), "results": {}}
    worst_converged = True
    for algorithm in config.algorithms:
        if args.initial_s is not None:
            s0 = args.initial_s
            closed_form = None
        elif args.no_closed_form:
            raise UsageError("--no-closed-form requires --initial-s")
        else:
            closed_form = solve_scale_robust(
                solver_pairs_from_dataset(dataset, algorithm), solver
            )
            s0 = closed_form.s
        problem = make_problem(
            [dataset.poses[v] for v in views],
            dataset.rig,
            correspondences,
            s0,
            algorithm,
            ba_config,
        )
        refined, report = optimize(problem, ba_config)
        worst_converged &= report.converged
        entry = {
            "initial_s": s0,
            "refined_s": refined.s,
            "converged": report.converged,
            "reason": report.reason,
            "iterations": report.iterations,
            "initial_cost": report.initial_cost,
            "final_cost": report.final_cost,
            "cost_trace": list(report.cost_trace),
            "sigma_r": report.sigma_r,
            "behind_camera": report.behind_camera,
            "intrinsics": {
                "fx": refined.intrinsics.fx,
                "fy": refined.intrinsics.fy,
                "cx": refined.intrinsics.cx,
                "cy": refined.intrinsics.cy,
            },
        }
        if closed_form is not None:
            entry["closed_form"] = _estimate_payload(closed_form)
        payload["results"][f"algorithm_{algorithm.value}"] = entry
    _write_json(config.output, payload)
    return EXIT_OK if worst_converged else EXIT_NOT_CONVERGED


def cmd_simulate(args) -> int:
    """Baseline sweep CSVs plus figure; optional dataset export."""
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = SceneConfig(
        n_points=args.n_points,
        cube_side=args.cube_side,
        n_cameras=args.n_cameras,
        noise_sigma=args.sigma_n,
        baseline_d=args.d[0],
        trials=args.trials,
        rng_seed=args.seed,
    )
    stats = baseline_sweep(config, args.d, n_jobs=args.jobs)

    trials_path = out_dir / "sweep_trials.csv"
    with open(trials_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["algorithm", "d", "sigma_n", "trial", "value"])
        for row in stats:
            for trial, value in enumerate(row.values):
                writer.writerow(
                    [row.algorithm.value, repr(row.baseline_d), repr(args.sigma_n),
                     trial, repr(value)]
                )
    summary_path = out_dir / "sweep_summary.csv"
    with open(summary_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["algorithm", "d", "mean", "sd", "failures"])
        for row in stats:
            writer.writerow(
                [row.algorithm.value, repr(row.baseline_d), repr(row.mean),
                 repr(row.sd), row.failures]
            )

    from .plots import save_sweep_figure

    save_sweep_figure(stats, out_dir / "sweep.png")

    if args.export_dataset:
        scene = generate_scene(replace(config, rng_seed=config.rng_seed))
        save_dataset(
            scene_to_dataset(scene, max_pairs=args.export_max_pairs),
            out_dir / "dataset",
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    """Grid-accuracy evaluation, before and after refinement."""
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    solver = SolverConfig(rng_seed=args.seed)
    ba_config = BAConfig(optimize_intrinsics=not args.free_intrinsics)

    if args.dataset is None and args.trials < 1:
        raise UsageError("eval needs a dataset or --synthetic-grid")

    algorithms = _parse_algorithms(args.algorithm)
    payload = {"algorithms": {}, "trials": args.trials}
    per_pair_rows = []
    figure_data = {}

    if args.dataset is not None:
        dataset = load_dataset(args.dataset)
        if dataset.ground_truth is None:
            print("error: dataset has no grid ground truth", file=sys.stderr)
            return EXIT_NO_GROUND_TRUTH
        datasets = [dataset]
    else:
        datasets = [
            grid_dataset(
                GridConfig(
                    rng_seed=args.seed + trial,
                    noise_sigma=args.grid_sigma_n,
                    baseline_d=args.grid_baseline,
                    sfm_scale=args.grid_sfm_scale,
                )
            )
            for trial in range(args.trials)
        ]

    for algorithm in algorithms:
        before_values = []
        after_values = []
        entries = []
        for trial, dataset in enumerate(datasets):
            before, after = evaluate(
                dataset, algorithm=algorithm, solver=solver, ba=ba_config
            )
            before_values.append(before.abs_mean_error)
            after_values.append(after.abs_mean_error)
            entries.append(
                {
                    "trial": trial,
                    "s_before": before.s_value,
                    "s_after": after.s_value,
                    "mean_error_before": before.mean_error,
                    "mean_error_after": after.mean_error,
                }
            )
            for (i, j), err_before in before.pair_errors.items():
                per_pair_rows.append(
                    [algorithm.value, trial, i, j, repr(err_before),
                     repr(after.pair_errors[(i, j)])]
                )
        payload["algorithms"][f"algorithm_{algorithm.value}"] = {
            "trials": entries,
            "abs_mean_error_before": {
                "mean": float(np.mean(before_values)),
                "sd": float(np.std(before_values, ddof=1)) if len(before_values) > 1 else 0.0,
            },
            "abs_mean_error_after": {
                "mean": float(np.mean(after_values)),
                "sd": float(np.std(after_values, ddof=1)) if len(after_values) > 1 else 0.0,
            },
        }
        figure_data[algorithm] = {"before": before_values, "after": after_values}

    _write_json(out_dir / "eval.json", payload)
    with open(out_dir / "pair_errors.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["algorithm", "trial", "i", "j", "error_before", "error_after"])
        writer.writerows(per_pair_rows)

    from .plots import save_eval_figure

    save_eval_figure(figure_data, out_dir / "eval.png")
    return EXIT_OK


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfmscale",
        description="Absolute-scale estimation for monocular reconstructions "
        "with a rigidly coupled two-camera rig.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--algorithm", choices=["1", "2", "both"], default="both")
        p.add_argument("--seed", type=int, default=0)

    p_est = sub.add_parser("estimate", help="closed-form scale estimate")
    common(p_est)
    p_est.add_argument("dataset", help="dataset directory or manifest path")
    p_est.add_argument("--output", default="estimate.json")
    p_est.add_argument("--residual-threshold", type=float, default=None)
    p_est.add_argument("--min-correspondences", type=int, default=8)
    p_est.set_defaults(func=cmd_estimate)

    p_ba = sub.add_parser("ba", help="scale-oriented bundle adjustment")
    common(p_ba)
    p_ba.add_argument("dataset")
    p_ba.add_argument("--output", default="ba.json")
    p_ba.add_argument("--initial-s", type=float, default=None)
    p_ba.add_argument("--no-closed-form", action="store_true",
                      help="do not fall back to the closed form for the start value")
    p_ba.add_argument("--freeze-intrinsics", action="store_true")
    p_ba.add_argument("--sigma-r", type=float, default=None)
    p_ba.add_argument("--max-iterations", type=int, default=100)
    p_ba.set_defaults(func=cmd_ba)

    p_sim = sub.add_parser("simulate", help="synthetic baseline sweep")
    common(p_sim)
    p_sim.add_argument("--output", default="sweep")
    p_sim.add_argument("--d", type=float, nargs="+", default=sweep_d_values())
    p_sim.add_argument("--trials", type=int, default=100)
    p_sim.add_argument("--sigma-n", type=float, default=0.001)
    p_sim.add_argument("--n-points", type=int, default=1000)
    p_sim.add_argument("--n-cameras", type=int, default=100)
    p_sim.add_argument("--cube-side", type=float, default=2000.0)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--export-dataset", action="store_true",
                       help="also write the first scene in dataset format")
    p_sim.add_argument("--export-max-pairs", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_ev = sub.add_parser("eval", help="grid-accuracy evaluation")
    common(p_ev)
    p_ev.add_argument("dataset", nargs="?", default=None)
    p_ev.add_argument("--output", default="eval")
    p_ev.add_argument("--trials", type=int, default=1,
                      help="with no dataset: number of synthetic grid trials")
    p_ev.add_argument("--grid-sigma-n", type=float, default=0.00125)
    p_ev.add_argument("--grid-baseline", type=float, default=0.025)
    p_ev.add_argument("--grid-sfm-scale", type=float, default=1.7)
    p_ev.add_argument("--free-intrinsics", action="store_true",
                      help="let the refinement adjust intrinsics as well")
    p_ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SFMSCALE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateSystem, AllRejected, PlacementFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ParseError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
