"""Figure rendering for sweep and evaluation reports.

All figures are written next to the delimited outputs they accompany.
The Agg backend keeps rendering headless and byte-reproducible.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import Algorithm

LABELS = {Algorithm.ALG1: "algorithm 1 (1/s)", Algorithm.ALG2: "algorithm 2 (s)"}


def save_sweep_figure(stats_rows, path) -> None:
    """Mean and SD of reported scales versus rig baseline, one panel per algorithm."""
    fig, axes = plt.subplots(1, 2, figsize=(9.6, 3.6), sharex=True)
    for ax, algorithm in zip(axes, (Algorithm.ALG1, Algorithm.ALG2)):
        rows = [r for r in stats_rows if r.algorithm is algorithm]
        rows.sort(key=lambda r: r.baseline_d)
        d = [r.baseline_d for r in rows]
        mean = [r.mean for r in rows]
        sd = [r.sd for r in rows]
        ax.axhline(1.0, color="0.8", lw=0.8, zorder=0)
        ax.plot(d, mean, "o-", color="tab:blue", ms=4, label="mean")
        ax.set_xscale("log")
        ax.set_xlabel("rig baseline d")
        ax.set_ylabel("mean of reported scale", color="tab:blue")
        twin = ax.twinx()
        twin.plot(d, sd, "s--", color="tab:red", ms=4, label="SD")
        twin.set_ylabel("SD", color="tab:red")
        twin.set_yscale("log")
        ax.set_title(LABELS[algorithm])
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_eval_figure(reports, path) -> None:
    """Mean absolute grid error before and after refinement per algorithm.

    `reports` maps an Algorithm to a (before, after) report pair or to a
    dict with per-stage lists of |mean error| values from repeated trials.
    """
    algorithms = sorted(reports, key=lambda a: a.value)
    width = 0.35
    x = np.arange(len(algorithms), dtype=float)
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    before_vals, after_vals, before_err, after_err = [], [], [], []
    for algorithm in algorithms:
        entry = reports[algorithm]
        if isinstance(entry, dict):
            before = np.asarray(entry["before"], dtype=float)
            after = np.asarray(entry["after"], dtype=float)
            before_vals.append(before.mean())
            after_vals.append(after.mean())
            before_err.append(before.std(ddof=1) if len(before) > 1 else 0.0)
            after_err.append(after.std(ddof=1) if len(after) > 1 else 0.0)
        else:
            before, after = entry
            before_vals.append(before.abs_mean_error)
            after_vals.append(after.abs_mean_error)
            before_err.append(0.0)
            after_err.append(0.0)
    ax.bar(x - width / 2, before_vals, width, yerr=before_err, capsize=3,
           label="before refinement", color="tab:orange")
    ax.bar(x + width / 2, after_vals, width, yerr=after_err, capsize=3,
           label="after refinement", color="tab:green")
    ax.set_xticks(x)
    ax.set_xticklabels([f"algorithm {a.value}" for a in algorithms])
    ax.set_ylabel("|mean grid error| [%]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
