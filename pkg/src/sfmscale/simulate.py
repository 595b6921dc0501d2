"""Monte-Carlo scene generation and the baseline-sweep experiment driver.

The sweep protocol: scatter points uniformly in a cube, drop camera rigs
into a concentric sub-cube with uniform random orientations, project every
point to every secondary camera in normalized coordinates, perturb with
Gaussian noise, and estimate the scale from all camera pairs with both
coefficient placements.  True scale is 1 because the generated poses are
metric.

Projection is algebraic (no front-of-camera screening): the epipolar
identity holds for any nonzero depth, and the grazing observations this
produces are exactly what pins the scale at small rig baselines.  Dataset
export can screen to physical visibility instead.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, GridGroundTruth
from .geometry import (
    Algorithm,
    Intrinsics,
    PairObservation,
    RigidTransform,
    compose,
    pair_coefficients,
    relative_pose,
)
from .solver import (
    SolverConfig,
    StereoRig,
    _robust_system,
    _System as _solver_system,
    solve_scale_robust,
)

log = logging.getLogger(__name__)

# nominal intrinsics used when synthetic scenes are exported as pixel datasets
EXPORT_INTRINSICS = Intrinsics(fx=1000.0, fy=1000.0, cx=512.0, cy=384.0)

PLACEMENT_RETRIES = 100


class PlacementFailure(RuntimeError):
    """Camera placement could not satisfy the visibility minimum."""


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic experiment parameters (defaults reproduce the sweep setup)."""

    n_points: int = 1000
    cube_side: float = 2000.0
    n_cameras: int = 100
    noise_sigma: float = 0.001
    baseline_d: float = 1.0
    rig_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    trials: int = 100
    rng_seed: int = 0
    camera_spread: float = 0.4  # rig centers fill this fraction of the cube
    min_shared_points: int = 8
    screen_visibility: bool = False  # True: keep only physically visible points

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError("need at least 8 points for the epipolar system")
        if self.cube_side <= 0 or self.baseline_d <= 0:
            raise ValueError("cube_side and baseline_d must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 < self.camera_spread <= 1:
            raise ValueError("camera_spread must be in (0, 1]")
        object.__setattr__(
            self, "rig_rotation", np.asarray(self.rig_rotation, dtype=float)
        )

    def rig(self) -> StereoRig:
        return StereoRig(
            RigidTransform(self.rig_rotation, [self.baseline_d, 0.0, 0.0]),
            EXPORT_INTRINSICS,
        )


@dataclass(frozen=True)
class SyntheticScene:
    """Generated geometry plus (possibly noisy) normalized observations."""

    config: SceneConfig
    points: np.ndarray
    poses_primary: tuple[RigidTransform, ...]
    observations: np.ndarray  # (n_cameras, n_points, 2) normalized
    visibility: np.ndarray  # (n_cameras, n_points) bool

    @property
    def rig(self) -> StereoRig:
        return self.config.rig()

    @property
    def poses_secondary(self) -> tuple[RigidTransform, ...]:
        extrinsic = self.rig.extrinsic
        return tuple(compose(extrinsic, pose) for pose in self.poses_primary)

    def pair_list(self) -> list[tuple[int, int]]:
        """All i < j pairs sharing at least the configured minimum of points."""
        n = len(self.poses_primary)
        out = []
        for i in range(n):
            for j in range(i + 1, n):
                shared = int((self.visibility[i] & self.visibility[j]).sum())
                if shared >= self.config.min_shared_points:
                    out.append((i, j))
        return out

    def observation_for(self, i: int, j: int) -> PairObservation:
        shared = self.visibility[i] & self.visibility[j]
        if shared.all():
            return PairObservation((i, j), self.observations[i], self.observations[j])
        return PairObservation(
            (i, j), self.observations[i][shared], self.observations[j][shared]
        )

    def solver_pairs(self, algorithm: Algorithm):
        """(PairObservation, PairCoefficients) for every usable pair."""
        rig = self.rig
        out = []
        for i, j in self.pair_list():
            rel = relative_pose(self.poses_primary[i], self.poses_primary[j], i, j)
            out.append(
                (self.observation_for(i, j), pair_coefficients(rel, rig, algorithm))
            )
        return out


def generate_scene(config: SceneConfig, rng: np.random.Generator | None = None) -> SyntheticScene:
    """One synthetic scene, deterministic for a given config seed.

    With `screen_visibility` every camera must end up seeing at least
    `min_shared_points` points in front of both rig cameras; placement is
    retried per camera and PlacementFailure raised once retries run out.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    half = config.cube_side / 2.0
    points = rng.uniform(-half, half, size=(config.n_points, 3))
    rig = config.rig()
    t_s = rig.extrinsic.translation
    r_s = rig.extrinsic.rotation

    poses = []
    visibility = np.ones((config.n_cameras, config.n_points), dtype=bool)
    observations = np.empty((config.n_cameras, config.n_points, 2))
    spread = config.camera_spread * half
    for k in range(config.n_cameras):
        for attempt in range(PLACEMENT_RETRIES):
            rotation = random_rotation(rng)
            center = rng.uniform(-spread, spread, size=3)
            pose = RigidTransform(rotation, -rotation @ center)
            cam = points @ (r_s @ rotation).T + (r_s @ pose.translation + t_s)
            if config.screen_visibility:
                visible = cam[:, 2] > 1e-8
                if int(visible.sum()) < config.min_shared_points:
                    continue
            else:
                visible = np.abs(cam[:, 2]) > 1e-12
            break
        else:
            raise PlacementFailure(
                f"camera {k}: fewer than {config.min_shared_points} visible points "
                f"after {PLACEMENT_RETRIES} attempts"
            )
        poses.append(pose)
        visibility[k] = visible
        with np.errstate(divide="ignore", invalid="ignore"):
            observations[k] = cam[:, :2] / cam[:, 2:3]
        observations[k][~visible] = 0.0
    if config.noise_sigma > 0:
        observations = observations + rng.normal(
            scale=config.noise_sigma, size=observations.shape
        )
    return SyntheticScene(
        config=config,
        points=points,
        poses_primary=tuple(poses),
        observations=observations,
        visibility=visibility,
    )


@dataclass(frozen=True)
class TrialStats:
    """Per-trial reported values (1/s for ALG1, s for ALG2) and their spread."""

    baseline_d: float
    algorithm: Algorithm
    values: tuple[float, ...]
    failures: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def sd(self) -> float:
        if len(self.values) < 2:
            return float("nan")
        return float(np.std(self.values, ddof=1))


def _trial_seed(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, trial)))


def _column_stacked_cross_batch(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    # (P, 9): per pair, [v x a_1; v x a_2; v x a_3] for the columns a_k of A
    columns = np.transpose(a, (0, 2, 1))
    return np.cross(v[:, None, :], columns).reshape(len(v), 9)


def flat_system(scene: SyntheticScene, algorithm: Algorithm, dtype=None):
    """Batched construction of the solver's flattened pair system.

    Equivalent to feeding `scene.solver_pairs(algorithm)` to the solver
    (pinned by tests), but assembles the coefficients of all pairs with
    one set of array operations.  Requires every point to be observed by
    every camera, which holds when visibility screening is off.

    Noisy scenes default to float32 rows: the noise floor sits orders of
    magnitude above float32 resolution and halving the memory traffic is
    what keeps large sweeps fast.  Noise-free scenes stay float64 so
    exactness checks hold.
    """
    if not scene.visibility.all():
        raise ValueError("flat_system needs full visibility")
    if dtype is None:
        dtype = np.float32 if scene.config.noise_sigma > 0 else np.float64
    pairs = scene.pair_list()
    ii = np.array([i for i, _ in pairs])
    jj = np.array([j for _, j in pairs])
    rotations = np.stack([p.rotation for p in scene.poses_primary])
    translations = np.stack([p.translation for p in scene.poses_primary])
    rig = scene.rig
    r_s = rig.extrinsic.rotation
    t_s = rig.extrinsic.translation

    rel_rot = np.einsum("pab,pcb->pac", rotations[jj], rotations[ii])
    rel_t = translations[jj] - np.einsum("pab,pb->pa", rel_rot, translations[ii])
    a = np.einsum("ab,pbc,dc->pad", r_s, rel_rot, r_s)
    b = rel_t @ r_s.T
    c = t_s - a @ t_s
    if Algorithm.parse(algorithm) is Algorithm.ALG2:
        b, c = c, b
    f = _column_stacked_cross_batch(b, a)
    g = _column_stacked_cross_batch(c, a)

    observations = scene.observations.astype(dtype)
    f_cast = f.astype(dtype)
    g_cast = g.astype(dtype)
    n = observations.shape[1]
    uf = np.empty((len(pairs), n), dtype=dtype)
    ug = np.empty((len(pairs), n), dtype=dtype)
    row_scale = np.empty((len(pairs), n), dtype=dtype)
    norms_sq = 1.0 + np.einsum("knc,knc->kn", observations, observations)
    # small chunks keep the fused row math inside the cache
    chunk = max(1, 2**18 // max(n, 1) * 4)
    scratch = None
    for start in range(0, len(pairs), chunk):
        sl = slice(start, min(start + chunk, len(pairs)))
        oi = observations[ii[sl]]
        oj = observations[jj[sl]]
        xi, yi = oi[..., 0], oi[..., 1]
        xj, yj = oj[..., 0], oj[..., 1]
        if scratch is None or scratch.shape != xi.shape:
            scratch = np.empty_like(xi)
        for coeffs_sl, out in ((f_cast[sl], uf[sl]), (g_cast[sl], ug[sl])):
            # u . v expanded by rows of p_i: x_i*(v0 x_j + v1 y_j + v2)
            # + y_i*(v3 x_j + v4 y_j + v5) + (v6 x_j + v7 y_j + v8)
            c = [coeffs_sl[:, k, None] for k in range(9)]
            np.multiply(xj, c[0], out=out)
            out += yj * c[1]
            out += c[2]
            out *= xi
            np.multiply(xj, c[3], out=scratch)
            scratch += yj * c[4]
            scratch += c[5]
            scratch *= yi
            out += scratch
            np.multiply(xj, c[6], out=scratch)
            scratch += yj * c[7]
            scratch += c[8]
            out += scratch
        np.sqrt(norms_sq[ii[sl]] * norms_sq[jj[sl]], out=row_scale[sl])
    return _solver_system(
        uf.reshape(-1),
        ug.reshape(-1),
        np.full(len(pairs), n),
        np.einsum("pk,pk->p", f, f),
        np.einsum("pk,pk->p", g, g),
        np.einsum("pk,pk->p", f, g),
        row_scale.reshape(-1),
    )


def _one_trial(config: SceneConfig, trial: int) -> dict[Algorithm, float]:
    rng = _trial_seed(config.rng_seed, trial)
    scene = generate_scene(config, rng)
    solver_config = SolverConfig(min_correspondences_per_pair=config.min_shared_points)
    out = {}
    if scene.visibility.all():
        system = flat_system(scene, Algorithm.ALG1)
        for algorithm, sys_a in (
            (Algorithm.ALG1, system),
            (Algorithm.ALG2, system.swapped()),
        ):
            estimate = _robust_system(sys_a, algorithm, solver_config)
            out[algorithm] = (
                1.0 / estimate.s if algorithm is Algorithm.ALG1 else estimate.s
            )
        return out
    for algorithm in (Algorithm.ALG1, Algorithm.ALG2):
        estimate = solve_scale_robust(scene.solver_pairs(algorithm), solver_config)
        out[algorithm] = (
            1.0 / estimate.s if algorithm is Algorithm.ALG1 else estimate.s
        )
    return out


def run_trials_paired(
    config: SceneConfig, n_jobs: int = 1
) -> dict[Algorithm, TrialStats]:
    """Monte-Carlo trials of both algorithms on identical scenes.

    Each trial regenerates the scene from a sub-seed of (rng_seed, trial),
    so results are identical whether trials run serially or in a pool.
    Trials whose solve fails are recorded as failures, not raised.
    """
    values: dict[Algorithm, list[float]] = {Algorithm.ALG1: [], Algorithm.ALG2: []}
    failures = 0

    def consume(result):
        nonlocal failures
        if result is None:
            failures += 1
        else:
            for algorithm, value in result.items():
                values[algorithm].append(value)

    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [
                pool.submit(_guarded_trial, config, t) for t in range(config.trials)
            ]
            for future in futures:
                consume(future.result())
    else:
        for t in range(config.trials):
            consume(_guarded_trial(config, t))

    return {
        algorithm: TrialStats(
            baseline_d=config.baseline_d,
            algorithm=algorithm,
            values=tuple(values[algorithm]),
            failures=failures,
        )
        for algorithm in (Algorithm.ALG1, Algorithm.ALG2)
    }


def _guarded_trial(config: SceneConfig, trial: int):
    try:
        return _one_trial(config, trial)
    except Exception:
        log.exception("trial %d failed", trial)
        return None


def run_trials(
    config: SceneConfig, algorithm: Algorithm | int | str, n_jobs: int = 1
) -> TrialStats:
    """Trials of one algorithm; shares scene generation with its twin."""
    return run_trials_paired(config, n_jobs=n_jobs)[Algorithm.parse(algorithm)]


def baseline_sweep(
    base_config: SceneConfig, d_values, n_jobs: int = 1
) -> list[TrialStats]:
    """run_trials at every baseline, both algorithms, ALG1 rows first."""
    d_values = [float(d) for d in d_values]
    if not d_values or any(d <= 0 for d in d_values):
        raise ValueError("d_values must be non-empty and positive")
    results = []
    for d in d_values:
        paired = run_trials_paired(replace(base_config, baseline_d=d), n_jobs=n_jobs)
        results.append(paired[Algorithm.ALG1])
        results.append(paired[Algorithm.ALG2])
    return results


def sweep_d_values(low: float = 1e-2, high: float = 1e2, count: int = 9) -> list[float]:
    """Log-spaced baseline grid of the reference sweep."""
    return [float(v) for v in np.logspace(np.log10(low), np.log10(high), count)]


def scene_to_dataset(scene: SyntheticScene, max_pairs: int | None = None) -> Dataset:
    """Export a scene in the interchange format (pixels via nominal intrinsics)."""
    intr = EXPORT_INTRINSICS
    correspondences = {}
    pairs = scene.pair_list()
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    for i, j in pairs:
        shared = scene.visibility[i] & scene.visibility[j]
        obs_i = scene.observations[i][shared]
        obs_j = scene.observations[j][shared]
        block = np.column_stack(
            [
                intr.fx * obs_i[:, 0] + intr.cx,
                intr.fy * obs_i[:, 1] + intr.cy,
                intr.fx * obs_j[:, 0] + intr.cx,
                intr.fy * obs_j[:, 1] + intr.cy,
            ]
        )
        correspondences[(i, j)] = block
    return Dataset(
        poses={k: pose for k, pose in enumerate(scene.poses_primary)},
        rig=scene.rig,
        correspondences=correspondences,
        ground_truth=None,
        up_to_scale=True,
        units="scene",
    )


@dataclass(frozen=True)
class GridConfig:
    """Synthetic grid capture mimicking a known-pitch evaluation rig.

    Grid viewpoints carry a mild orientation jitter and the supplementary
    viewpoints a strong one: rotation diversity is what separates the
    scale from a global landmark shift once the bundle adjustment runs.
    """

    rows: int = 4
    cols: int = 5
    pitch: float = 0.1
    n_points: int = 150
    baseline_d: float = 0.03
    noise_sigma: float = 0.0  # normalized-coordinate noise
    sfm_scale: float = 1.0  # lambda applied to stored pose translations
    n_supplementary: int = 6
    grid_jitter: float = 0.08  # radians
    supplementary_jitter: float = 0.25  # radians
    supplementary_setback: float = 0.6  # how far behind the grid plane they roam
    scene_depth: tuple[float, float] = (2.0, 3.5)
    rng_seed: int = 0

    def __post_init__(self):
        if self.rows * self.cols < 2:
            raise ValueError("grid needs at least two viewpoints")
        if self.pitch <= 0 or self.baseline_d <= 0 or self.sfm_scale <= 0:
            raise ValueError("pitch, baseline_d, and sfm_scale must be positive")
        if self.n_supplementary < 0 or self.grid_jitter < 0 or self.supplementary_jitter < 0:
            raise ValueError("jitters and supplementary count must be non-negative")


def grid_dataset(config: GridConfig) -> Dataset:
    """Dataset with grid ground truth: metric pixels, lambda-scaled poses.

    Cameras sit on a rows x cols grid looking down +z at a point slab;
    observations are generated from the metric geometry, while the stored
    poses carry translations multiplied by `sfm_scale` to mimic the
    unknown reconstruction scale.  Supplementary viewpoints participate in
    correspondences but are absent from the ground truth.
    """
    rng = np.random.default_rng(config.rng_seed)
    intr = EXPORT_INTRINSICS
    rig = StereoRig(
        RigidTransform(np.eye(3), [config.baseline_d, 0.0, 0.0]), intr
    )
    width = (config.cols - 1) * config.pitch
    height = (config.rows - 1) * config.pitch
    lo, hi = config.scene_depth
    points = np.column_stack(
        [
            rng.uniform(-0.8 * lo, width + 0.8 * lo, size=config.n_points),
            rng.uniform(-0.8 * lo, height + 0.8 * lo, size=config.n_points),
            rng.uniform(lo, hi, size=config.n_points),
        ]
    )

    poses_metric = {}
    cells = {}
    view = 0
    for r in range(config.rows):
        for c in range(config.cols):
            center = np.array([c * config.pitch, r * config.pitch, 0.0])
            jitter = rng.normal(scale=config.grid_jitter, size=3)
            rotation = _small_rotation(jitter)
            poses_metric[view] = RigidTransform(rotation, -rotation @ center)
            cells[view] = (r, c)
            view += 1
    for _ in range(config.n_supplementary):
        center = np.array(
            [
                rng.uniform(-0.5, width + 0.5),
                rng.uniform(-0.5, height + 0.5),
                rng.uniform(-config.supplementary_setback, 0.2),
            ]
        )
        rotation = _small_rotation(rng.normal(scale=config.supplementary_jitter, size=3))
        poses_metric[view] = RigidTransform(rotation, -rotation @ center)
        view += 1

    observations = {}
    for v, pose in poses_metric.items():
        cam = points @ (rig.extrinsic.rotation @ pose.rotation).T + (
            rig.extrinsic.rotation @ pose.translation + rig.extrinsic.translation
        )
        normalized = cam[:, :2] / cam[:, 2:3]
        if config.noise_sigma > 0:
            normalized = normalized + rng.normal(
                scale=config.noise_sigma, size=normalized.shape
            )
        observations[v] = np.column_stack(
            [
                intr.fx * normalized[:, 0] + intr.cx,
                intr.fy * normalized[:, 1] + intr.cy,
            ]
        )

    correspondences = {}
    views = sorted(poses_metric)
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            i, j = views[a], views[b]
            correspondences[(i, j)] = np.column_stack(
                [observations[i], observations[j]]
            )

    poses_stored = {
        v: RigidTransform(p.rotation, config.sfm_scale * p.translation)
        for v, p in poses_metric.items()
    }
    return Dataset(
        poses=poses_stored,
        rig=rig,
        correspondences=correspondences,
        ground_truth=GridGroundTruth(cells, config.pitch),
        up_to_scale=True,
        units="scene",
    )


def _small_rotation(axis_angle: np.ndarray) -> np.ndarray:
    from .geometry import orthonormalize, skew

    return orthonormalize(np.eye(3) + skew(axis_angle))
