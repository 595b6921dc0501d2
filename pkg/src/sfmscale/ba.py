"""Scale-oriented bundle adjustment.

Refines the scale jointly with secondary-camera 3D points and intrinsics
by minimizing a Huber-robustified reprojection cost.  The primary-camera
poses and the rig extrinsic stay fixed; the scale enters the camera-frame
transform on the view translations (ALG1) or on the rig baseline (ALG2)::

    X_cam = R_s R_v X + s * R_s t_v + t_s        (ALG1)
    X_cam = R_s R_v X + R_s t_v     + s * t_s    (ALG2)

The normal equations are solved by Levenberg-Marquardt with multiplicative
damping and a Schur complement over the landmark blocks.  Observations
that fall behind a camera are dropped from the cost and counted, never
clamped.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Algorithm, Intrinsics, RigidTransform, normalize_array
from .solver import StereoRig

log = logging.getLogger(__name__)

MAD_SIGMA = 1.4826
SIGMA_FLOOR = 1e-12
DAMPING_CAP = 1e32
DIAGONAL_FLOOR = 1e-12


class BehindCamera(ValueError):
    """Point is at or behind the camera plane (Z <= z_epsilon)."""


class DegenerateRays(ValueError):
    """All observation rays of a track are (near-)parallel."""


class SingularNormalEquations(RuntimeError):
    """No damping value produced a solvable, cost-reducing step."""


@dataclass(frozen=True)
class Landmark:
    """World point with its pixel track: tuples of (view index, pixel)."""

    position: np.ndarray
    track: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=float).reshape(3)
        )
        track = tuple(
            (int(view), np.asarray(pixel, dtype=float).reshape(2))
            for view, pixel in self.track
        )
        if len(track) < 2:
            raise ValueError("a landmark needs at least two observations")
        object.__setattr__(self, "track", track)


@dataclass(frozen=True)
class BAConfig:
    huber_delta: float = 1.0
    sigma_r: float | None = None  # None: MAD of the initial residuals
    max_iterations: int = 100
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-12
    lm_initial_damping: float = 1e-4
    optimize_intrinsics: bool = True
    z_epsilon: float = 1e-8
    angle_epsilon_deg: float = 0.1

    def __post_init__(self):
        positives = {
            "huber_delta": self.huber_delta,
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "parameter_tolerance": self.parameter_tolerance,
            "lm_initial_damping": self.lm_initial_damping,
            "z_epsilon": self.z_epsilon,
            "angle_epsilon_deg": self.angle_epsilon_deg,
        }
        if self.sigma_r is not None:
            positives["sigma_r"] = self.sigma_r
        for name, value in positives.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class BAProblem:
    """Optimization state: (s, landmarks, intrinsics) free, poses and rig fixed."""

    s: float
    landmarks: tuple[Landmark, ...]
    intrinsics: Intrinsics
    poses: tuple[RigidTransform, ...]
    rig: StereoRig
    algorithm: Algorithm

    def __post_init__(self):
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        object.__setattr__(self, "poses", tuple(self.poses))
        n = len(self.poses)
        for landmark in self.landmarks:
            for view, _ in landmark.track:
                if not 0 <= view < n:
                    raise ValueError(f"track references unknown pose index {view}")


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    reason: str
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: tuple[float, ...]
    behind_camera: int
    sigma_r: float


def _view_frames(problem: BAProblem):
    """Per-view rotation M = R_s R_v, base offset, and scale direction."""
    r_s = problem.rig.extrinsic.rotation
    t_s = problem.rig.extrinsic.translation
    rotations = []
    offsets = []
    directions = []
    for pose in problem.poses:
        w = r_s @ pose.translation
        rotations.append(r_s @ pose.rotation)
        if problem.algorithm is Algorithm.ALG1:
            offsets.append(t_s)
            directions.append(w)
        else:
            offsets.append(w)
            directions.append(t_s)
    return np.array(rotations), np.array(offsets), np.array(directions)


def transform_to_camera(point, pose_index: int, problem: BAProblem) -> np.ndarray:
    """Camera-frame position of a world point seen from `pose_index`."""
    x = np.asarray(point, dtype=float).reshape(3)
    pose = problem.poses[pose_index]
    r_s = problem.rig.extrinsic.rotation
    t_s = problem.rig.extrinsic.translation
    w = r_s @ pose.translation
    base = r_s @ pose.rotation @ x
    if problem.algorithm is Algorithm.ALG1:
        return base + problem.s * w + t_s
    return base + w + problem.s * t_s


def project(point_cam, intrinsics: Intrinsics, z_epsilon: float = 1e-8) -> np.ndarray:
    """Pinhole projection to pixels; raises BehindCamera for Z <= z_epsilon."""
    x, y, z = np.asarray(point_cam, dtype=float).reshape(3)
    if z <= z_epsilon:
        raise BehindCamera(f"point depth {z} <= {z_epsilon}")
    return np.array(
        [intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy]
    )


def reprojection_residual(
    problem: BAProblem, landmark_index: int, observation_index: int
) -> np.ndarray:
    """Observed minus projected pixel for one track entry."""
    landmark = problem.landmarks[landmark_index]
    view, pixel = landmark.track[observation_index]
    cam = transform_to_camera(landmark.position, view, problem)
    return pixel - project(cam, problem.intrinsics)


def huber(a: float | np.ndarray, delta: float) -> float | np.ndarray:
    """Huber loss on an already-squared argument.

    Quadratic branch ``a`` up to ``delta**2``, then ``2*delta*sqrt(a) - delta**2``.
    """
    a = np.asarray(a, dtype=float)
    out = np.where(a <= delta * delta, a, 2.0 * delta * np.sqrt(a) - delta * delta)
    return float(out) if out.ndim == 0 else out


def _huber_weight(a: np.ndarray, delta: float) -> np.ndarray:
    """d(huber)/da, the IRLS weight of each observation."""
    with np.errstate(divide="ignore"):
        return np.where(a <= delta * delta, 1.0, delta / np.sqrt(np.maximum(a, 1e-300)))


class _Observations:
    """Flat observation arrays grouped by view for vectorized assembly."""

    def __init__(self, problem: BAProblem):
        views = []
        lms = []
        pixels = []
        for l, landmark in enumerate(problem.landmarks):
            for view, pixel in landmark.track:
                views.append(view)
                lms.append(l)
                pixels.append(pixel)
        order = np.lexsort((np.array(lms), np.array(views)))
        self.view = np.array(views)[order]
        self.lm = np.array(lms)[order]
        self.pixel = np.array(pixels)[order]
        self.slices = []
        for v in range(len(problem.poses)):
            idx = np.flatnonzero(self.view == v)
            if len(idx):
                self.slices.append((v, idx))

    def __len__(self) -> int:
        return len(self.view)


def _evaluate(
    problem: BAProblem,
    config: BAConfig,
    sigma_r: float,
    obs: _Observations,
    positions: np.ndarray,
    intr: np.ndarray,
    s: float,
    with_derivatives: bool,
):
    """Robust cost and (optionally) gradient/Gauss-Newton blocks.

    Returns a dict with cost, behind-camera count, and when requested the
    gradient pieces (g_s, g_x, g_k) and normal-equation blocks split into
    the global part (s plus intrinsics) and per-landmark 3x3 blocks.
    """
    rotations, offsets, directions = _view_frames(problem)
    fx, fy, cx, cy = intr
    n_lm = len(problem.landmarks)
    n_k = 4 if config.optimize_intrinsics else 0
    n_g = 1 + n_k

    total_cost = 0.0
    behind = 0
    g_s = 0.0
    g_x = np.zeros((n_lm, 3))
    g_k = np.zeros(4)
    h_gg = np.zeros((n_g, n_g))
    h_gl = np.zeros((n_lm, n_g, 3))
    h_ll = np.zeros((n_lm, 3, 3))

    inv_sigma_sq = 1.0 / (sigma_r * sigma_r)
    for view, idx in obs.slices:
        lm_idx = obs.lm[idx]
        # offsets/directions already encode the algorithm split
        x_cam = (
            positions[lm_idx] @ rotations[view].T
            + offsets[view]
            + s * directions[view]
        )
        z = x_cam[:, 2]
        valid = z > config.z_epsilon
        behind += int((~valid).sum())
        if not valid.any():
            continue
        x_cam = x_cam[valid]
        lm_idx = lm_idx[valid]
        pix = obs.pixel[idx][valid]
        z = x_cam[:, 2]
        proj = np.stack(
            [fx * x_cam[:, 0] / z + cx, fy * x_cam[:, 1] / z + cy], axis=1
        )
        r = pix - proj
        a = np.einsum("ni,ni->n", r, r) * inv_sigma_sq
        total_cost += float(np.sum(huber(a, config.huber_delta)))
        if not with_derivatives:
            continue

        w = _huber_weight(a, config.huber_delta) * (2.0 * inv_sigma_sq)
        # d(projection)/d(camera point)
        p_mat = np.zeros((len(z), 2, 3))
        p_mat[:, 0, 0] = fx / z
        p_mat[:, 0, 2] = -fx * x_cam[:, 0] / (z * z)
        p_mat[:, 1, 1] = fy / z
        p_mat[:, 1, 2] = -fy * x_cam[:, 1] / (z * z)
        j_x = -np.einsum("nab,bc->nac", p_mat, rotations[view])
        j_s = -np.einsum("nab,b->na", p_mat, directions[view])
        jr_x = np.einsum("nab,na->nb", j_x, r)
        jr_s = np.einsum("na,na->n", j_s, r)
        g_s += float(np.sum(w * jr_s))
        np.add.at(g_x, lm_idx, (w * jr_x.T).T)
        h_gg[0, 0] += float(np.sum(w * np.einsum("na,na->n", j_s, j_s)))
        sx = np.einsum("na,nab->nb", j_s, j_x)
        np.add.at(h_gl[:, 0, :], lm_idx, w[:, None] * sx)
        xx = np.einsum("nab,nac->nbc", j_x, j_x)
        np.add.at(h_ll, lm_idx, w[:, None, None] * xx)
        if n_k:
            j_k = np.zeros((len(z), 2, 4))
            j_k[:, 0, 0] = -x_cam[:, 0] / z
            j_k[:, 1, 1] = -x_cam[:, 1] / z
            j_k[:, 0, 2] = -1.0
            j_k[:, 1, 3] = -1.0
            jr_k = np.einsum("nab,na->nb", j_k, r)
            g_k += np.einsum("n,nb->b", w, jr_k)
            h_gg[1:, 1:] += np.einsum("n,nab,nac->bc", w, j_k, j_k)
            sk = np.einsum("na,nab->nb", j_s, j_k)
            h_gg[0, 1:] += np.einsum("n,nb->b", w, sk)
            kx = np.einsum("nab,nac->nbc", j_k, j_x)
            np.add.at(h_gl[:, 1:, :], lm_idx, w[:, None, None] * kx)
    h_gg[1:, 0] = h_gg[0, 1:]

    result = {"cost": total_cost, "behind": behind}
    if with_derivatives:
        g_global = np.concatenate([[g_s], g_k[:n_k]])
        result.update(
            g_global=g_global, g_x=g_x, h_gg=h_gg, h_gl=h_gl, h_ll=h_ll
        )
    return result


def cost(problem: BAProblem, config: BAConfig = BAConfig()) -> float:
    """Total Huber-robustified cost sum(huber(||r||^2 / sigma_r^2))."""
    sigma_r = _resolve_sigma(problem, config)
    obs = _Observations(problem)
    positions = np.array([lm.position for lm in problem.landmarks])
    out = _evaluate(
        problem, config, sigma_r, obs, positions,
        problem.intrinsics.as_array(), problem.s, with_derivatives=False,
    )
    return out["cost"]


def cost_gradient(problem: BAProblem, config: BAConfig = BAConfig()):
    """Analytic gradient of `cost` w.r.t. (s, landmark positions, intrinsics)."""
    sigma_r = _resolve_sigma(problem, config)
    obs = _Observations(problem)
    positions = np.array([lm.position for lm in problem.landmarks])
    out = _evaluate(
        problem, config, sigma_r, obs, positions,
        problem.intrinsics.as_array(), problem.s, with_derivatives=True,
    )
    grad_k = out["g_global"][1:] if config.optimize_intrinsics else np.zeros(0)
    return out["g_global"][0], out["g_x"], grad_k


def _resolve_sigma(problem: BAProblem, config: BAConfig) -> float:
    """Configured sigma_r, or the MAD-scaled spread of current residuals."""
    if config.sigma_r is not None:
        return config.sigma_r
    components = []
    for l in range(len(problem.landmarks)):
        for k in range(len(problem.landmarks[l].track)):
            try:
                components.extend(np.abs(reprojection_residual(problem, l, k)))
            except BehindCamera:
                continue
    if not components:
        return 1.0
    return max(MAD_SIGMA * float(np.median(components)), SIGMA_FLOOR)


def optimize(
    problem: BAProblem, config: BAConfig = BAConfig()
) -> tuple[BAProblem, ConvergenceReport]:
    """Levenberg-Marquardt refinement of (s, landmarks[, intrinsics]).

    Landmark blocks are eliminated with a Schur complement, damping is
    multiplicative (x10 on reject, x0.1 on accept), and a step counts only
    if the true robust cost decreases, so the accepted-cost sequence is
    non-increasing.  Poses and the rig are never touched.
    """
    sigma_r = _resolve_sigma(problem, config)
    obs = _Observations(problem)
    positions = np.array([lm.position for lm in problem.landmarks])
    intr = problem.intrinsics.as_array()
    s = problem.s
    n_k = 4 if config.optimize_intrinsics else 0

    state = _evaluate(problem, config, sigma_r, obs, positions, intr, s, True)
    initial_cost = state["cost"]
    trace = [initial_cost]
    damping = config.lm_initial_damping
    converged = False
    reason = "max_iterations"
    iterations = 0

    for _ in range(config.max_iterations):
        if float(np.max(np.abs(state["g_global"]), initial=0.0)) <= config.gradient_tolerance and float(
            np.max(np.abs(state["g_x"]), initial=0.0)
        ) <= config.gradient_tolerance:
            converged, reason = True, "gradient"
            break

        step = None
        stalled = False
        while damping <= DAMPING_CAP:
            try:
                step = _schur_step(state, damping, n_k)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                delta_g, delta_x = step
                predicted = -(
                    float(delta_g @ state["g_global"])
                    + float(np.sum(delta_x * state["g_x"]))
                )
                if 0 <= predicted <= 1e-12 * max(state["cost"], 1e-300):
                    # descent direction exists but any representable progress
                    # is below float resolution of the cost: we are done
                    stalled = True
                    step = None
                    break
                trial_s = s + delta_g[0]
                trial_intr = intr.copy()
                if n_k:
                    trial_intr += delta_g[1:]
                trial_pos = positions + delta_x
                if trial_intr[0] > 0 and trial_intr[1] > 0:
                    trial = _evaluate(
                        problem, config, sigma_r, obs, trial_pos, trial_intr, trial_s, True
                    )
                    if trial["cost"] < state["cost"]:
                        break
            damping *= 10.0
            step = None
        if stalled:
            converged, reason = True, "cost"
            break
        if step is None:
            raise SingularNormalEquations(
                f"no acceptable step up to damping {DAMPING_CAP:g}"
            )

        s, positions, intr, state = trial_s, trial_pos, trial_intr, trial
        trace.append(state["cost"])
        iterations += 1
        damping = max(damping * 0.1, 1e-15)

        step_norm = math.sqrt(float(delta_g @ delta_g) + float(np.sum(delta_x**2)))
        param_norm = math.sqrt(s * s + float(np.sum(positions**2)) + float(intr @ intr))
        if step_norm <= config.parameter_tolerance * (param_norm + config.parameter_tolerance):
            converged, reason = True, "parameter"
            break

    if not converged:
        log.warning("bundle adjustment hit max_iterations without converging")

    refined = replace(
        problem,
        s=float(s),
        landmarks=tuple(
            replace(lm, position=positions[i]) for i, lm in enumerate(problem.landmarks)
        ),
        intrinsics=Intrinsics(*intr) if n_k else problem.intrinsics,
    )
    report = ConvergenceReport(
        converged=converged,
        reason=reason,
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=trace[-1],
        cost_trace=tuple(trace),
        behind_camera=state["behind"],
        sigma_r=sigma_r,
    )
    return refined, report


def _schur_step(state, damping: float, n_k: int):
    """Solve the damped normal equations, eliminating landmark blocks."""
    h_gg = state["h_gg"].copy()
    h_gl = state["h_gl"]
    h_ll = state["h_ll"].copy()
    g_g = state["g_global"]
    g_x = state["g_x"]

    diag_g = np.maximum(np.diag(h_gg), DIAGONAL_FLOOR)
    h_gg[np.diag_indices_from(h_gg)] += damping * diag_g
    diag_l = np.maximum(h_ll[:, (0, 1, 2), (0, 1, 2)], DIAGONAL_FLOOR)
    h_ll[:, (0, 1, 2), (0, 1, 2)] += damping * diag_l

    h_ll_inv = np.linalg.inv(h_ll)
    schur = h_gg - np.einsum("lga,lab,lhb->gh", h_gl, h_ll_inv, h_gl)
    rhs = -g_g + np.einsum("lga,lab,lb->g", h_gl, h_ll_inv, g_x)
    delta_g = np.linalg.solve(schur, rhs)
    delta_x = -np.einsum(
        "lab,lb->la", h_ll_inv, g_x + np.einsum("lga,g->la", h_gl, delta_g)
    )
    return delta_g, delta_x


def triangulate(
    track,
    poses,
    rig: StereoRig,
    intrinsics: Intrinsics,
    s: float,
    algorithm: Algorithm = Algorithm.ALG1,
    angle_epsilon_deg: float = 0.1,
) -> np.ndarray:
    """Linear (DLT) triangulation of a pixel track in the world frame at scale `s`.

    Raises DegenerateRays when every pair of observation rays is closer
    than `angle_epsilon_deg` apart.
    """
    track = [(int(v), np.asarray(p, dtype=float).reshape(2)) for v, p in track]
    if len(track) < 2:
        raise ValueError("triangulation needs at least two observations")
    r_s = rig.extrinsic.rotation
    t_s = rig.extrinsic.translation

    rows = []
    rhs = []
    dirs = []
    for view, pixel in track:
        pose = poses[view]
        m = r_s @ pose.rotation
        w = r_s @ pose.translation
        t = s * w + t_s if algorithm is Algorithm.ALG1 else w + s * t_s
        x, y = normalize_array(pixel[None, :], intrinsics)[0]
        rows.append(x * m[2] - m[0])
        rhs.append(t[0] - x * t[2])
        rows.append(y * m[2] - m[1])
        rhs.append(t[1] - y * t[2])
        d = m.T @ np.array([x, y, 1.0])
        dirs.append(d / np.linalg.norm(d))

    dirs = np.array(dirs)
    cosines = np.clip(np.abs(dirs @ dirs.T), -1.0, 1.0)
    np.fill_diagonal(cosines, 1.0)
    max_angle = float(np.max(np.degrees(np.arccos(cosines))))
    if max_angle < angle_epsilon_deg:
        raise DegenerateRays(
            f"max ray separation {max_angle:.4f} deg < {angle_epsilon_deg} deg"
        )
    solution, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return solution


def build_tracks(correspondences: dict) -> list[tuple[tuple[int, np.ndarray], ...]]:
    """Merge per-pair pixel matches into multi-view tracks.

    Observations are identified by (view, pixel) with exact coordinate
    equality after rounding to 1e-9 pixels, which holds when the same
    detection feeds several pairs.  Returns tracks covering >= 2 views,
    ordered deterministically.
    """
    parent: dict = {}

    def find(key):
        root = key
        while parent[root] != root:
            root = parent[root]
        while parent[key] != root:
            parent[key], key = root, parent[key]
        return root

    def union(a, b):
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    def keyed(view, pixel):
        return (view, round(float(pixel[0]), 9), round(float(pixel[1]), 9))

    for (i, j) in sorted(correspondences):
        block = np.asarray(correspondences[(i, j)], dtype=float)
        for row in block:
            union(keyed(i, row[:2]), keyed(j, row[2:]))

    groups: dict = {}
    for key in sorted(parent):
        groups.setdefault(find(key), []).append(key)

    tracks = []
    for root in sorted(groups):
        members = groups[root]
        views = {}
        for view, u, v in members:
            views.setdefault(view, (u, v))
        if len(views) < 2:
            continue
        tracks.append(
            tuple((view, np.array(views[view])) for view in sorted(views))
        )
    return tracks


def make_problem(
    poses,
    rig: StereoRig,
    correspondences: dict,
    s: float,
    algorithm: Algorithm = Algorithm.ALG1,
    config: BAConfig = BAConfig(),
) -> BAProblem:
    """Assemble a BAProblem from pairwise matches: tracks, then DLT at `s`.

    Tracks that triangulate behind a camera or from degenerate rays are
    dropped with a log message.
    """
    intrinsics = rig.intrinsics_secondary
    landmarks = []
    dropped = 0
    for track in build_tracks(correspondences):
        try:
            position = triangulate(
                track, poses, rig, intrinsics, s, algorithm, config.angle_epsilon_deg
            )
        except DegenerateRays:
            dropped += 1
            continue
        landmarks.append(Landmark(position, track))
    if dropped:
        log.info("dropped %d degenerate tracks during initialization", dropped)
    if not landmarks:
        raise ValueError("no triangulable tracks in the correspondence set")
    return BAProblem(
        s=float(s),
        landmarks=tuple(landmarks),
        intrinsics=intrinsics,
        poses=tuple(poses),
        rig=rig,
        algorithm=algorithm,
    )
