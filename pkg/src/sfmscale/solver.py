"""Closed-form least-squares scale estimation with epipolar outlier rejection.

The scale is the unique minimizer of the stacked epipolar cost

    J(s) = 1/2 * sum_pairs || U (s*f + g) ||^2

which gives the closed form

    s = - sum(f^T U^T U g) / sum(f^T U^T U f).

Pairs whose f-vector is annihilated by U (pure-rotation motion, which is
uninformative for the scale) are flagged and skipped rather than errored.
Internally all pairs are flattened into contiguous arrays and trimming
rounds update the closed-form sums by subtracting rejected rows, so large
sweeps stay cheap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Algorithm, Intrinsics, PairCoefficients, PairObservation, RigidTransform

log = logging.getLogger(__name__)

# pairs with ||U f||^2 below this times ||U g||^2 carry no scale information;
# the same cutoff applied to ||f||^2 vs ||f||^2 + ||g||^2 catches noise-free
# pure rotations, where both residual norms degenerate to float dust together
UNINFORMATIVE_RATIO = 1e-12

# adaptive rejection: keep |e| <= MAD_FACTOR * 1.4826 * median|e| per pair,
# floored so noise-free data is never trimmed on float dust
MAD_SIGMA = 1.4826
MAD_FACTOR = 3.0
THRESHOLD_FLOOR = 1e-12

# the trimming loop stops once the rejected set stops changing materially
# or the estimate stops moving
STABLE_ROW_FRACTION = 0.02
ESTIMATE_STABILITY = 1e-10

# pairs longer than this estimate their threshold median on a strided
# subsample; the 3-sigma cut is insensitive to that much median noise
MEDIAN_SUBSAMPLE_LIMIT = 256


class DegenerateSystem(ValueError):
    """The pair set carries no scale information (denominator ~ 0)."""


class AllRejected(ValueError):
    """Outlier rejection removed every correspondence."""


@dataclass(frozen=True)
class StereoRig:
    """Fixed two-camera rig: extrinsic offset plus secondary-camera intrinsics."""

    extrinsic: RigidTransform
    intrinsics_secondary: Intrinsics

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("rig baseline must be positive")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.extrinsic.translation))


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the robust scale solve.

    `residual_threshold` of None means adaptive per-pair trimming at
    MAD_FACTOR scaled median absolute residuals, recomputed each round.
    `rng_seed` is reserved for interface stability; the trimming scheme is
    deterministic and does not draw random numbers.
    """

    residual_threshold: float | None = None
    min_correspondences_per_pair: int = 8
    ransac_iterations: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.residual_threshold is not None and not self.residual_threshold > 0:
            raise ValueError("residual_threshold must be positive")
        if self.min_correspondences_per_pair < 1:
            raise ValueError("min_correspondences_per_pair must be >= 1")
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be >= 1")


@dataclass(frozen=True)
class ScaleEstimate:
    """Scale estimate with the two closed-form sums kept as diagnostics."""

    s: float
    algorithm: Algorithm
    pairs_used: int
    inlier_fraction: float
    residual_rms: float
    numerator: float
    denominator: float

    @property
    def is_negative(self) -> bool:
        """Negative scale signals a pose-convention mismatch upstream."""
        return self.s < 0


def _pair_uf_ug(observation: PairObservation, coeffs: PairCoefficients):
    """(U f, U g, row norms) without keeping U around.

    The monomial row is the Kronecker product of the homogeneous points,
    so its norm is exactly ||p_i|| * ||p_j||; that is the natural scale of
    the row's residual and what the adaptive rejection normalizes by.
    """
    pi = observation.points_i
    pj = observation.points_j
    u = np.empty((len(pi), 9))
    xi, yi = pi[:, 0], pi[:, 1]
    xj, yj = pj[:, 0], pj[:, 1]
    u[:, 0] = xi * xj
    u[:, 1] = xi * yj
    u[:, 2] = xi
    u[:, 3] = yi * xj
    u[:, 4] = yi * yj
    u[:, 5] = yi
    u[:, 6] = xj
    u[:, 7] = yj
    u[:, 8] = 1.0
    norms = np.sqrt((1.0 + xi * xi + yi * yi) * (1.0 + xj * xj + yj * yj))
    return u @ coeffs.f, u @ coeffs.g, norms


class _System:
    """All pairs flattened into contiguous row arrays, segment-addressed."""

    def __init__(self, uf, ug, lengths, f_sq, g_sq, fg, row_scale, _sums=None):
        dtype = np.result_type(np.asarray(uf).dtype, np.float32)
        self.uf = np.ascontiguousarray(uf, dtype=dtype)
        self.ug = np.ascontiguousarray(ug, dtype=dtype)
        self.row_scale = np.ascontiguousarray(row_scale, dtype=dtype)
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.starts = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])
        self.f_sq = np.asarray(f_sq, dtype=float)
        self.g_sq = np.asarray(g_sq, dtype=float)
        self.fg = np.asarray(fg, dtype=float)
        self.total = int(self.lengths.sum())
        self.uniform = bool((self.lengths == self.lengths[0]).all())
        if _sums is None:
            # full-row per-pair sums, the baseline the trimming subtracts from
            self.den_full = np.add.reduceat(self.uf * self.uf, self.starts).astype(float)
            self.num_full = np.add.reduceat(self.uf * self.ug, self.starts).astype(float)
            self.gg_full = np.add.reduceat(self.ug * self.ug, self.starts).astype(float)
        else:
            self.den_full, self.num_full, self.gg_full = _sums

    def pair_of_rows(self, row_indices: np.ndarray) -> np.ndarray:
        """Pair index of each given row without materializing the full map."""
        return np.searchsorted(self.starts, row_indices, side="right") - 1

    @classmethod
    def from_pairs(cls, pairs) -> "_System":
        ufs, ugs, norms, lengths, f_sq, g_sq, fg = [], [], [], [], [], [], []
        for observation, coeffs in pairs:
            uf, ug, norm = _pair_uf_ug(observation, coeffs)
            ufs.append(uf)
            ugs.append(ug)
            norms.append(norm)
            lengths.append(len(uf))
            f_sq.append(float(coeffs.f @ coeffs.f))
            g_sq.append(float(coeffs.g @ coeffs.g))
            fg.append(float(coeffs.f @ coeffs.g))
        return cls(
            np.concatenate(ufs), np.concatenate(ugs), lengths, f_sq, g_sq, fg,
            np.concatenate(norms),
        )

    def swapped(self) -> "_System":
        """The dual system with the roles of f and g exchanged.

        Swapping b and c in the pair coefficients exchanges f with g, so
        the flattened rows of the other algorithm are the same arrays with
        uf and ug swapped.
        """
        return _System(
            self.ug, self.uf, self.lengths, self.g_sq, self.f_sq, self.fg,
            self.row_scale,
            _sums=(self.gg_full, self.num_full, self.den_full),
        )

    @property
    def informative(self) -> np.ndarray:
        return self.f_sq > UNINFORMATIVE_RATIO**2 * (self.f_sq + self.g_sq)

    def residuals(self, s: float) -> np.ndarray:
        return s * self.uf + self.ug

    def coefficient_norms(self, s: float) -> np.ndarray:
        """Per-pair ||s*f + g||, the translation scale of each pair's residuals."""
        value = s * s * self.f_sq + 2.0 * s * self.fg + self.g_sq
        return np.sqrt(np.maximum(value, 1e-300))

    def expand(self, per_pair: np.ndarray) -> np.ndarray:
        return np.repeat(per_pair, self.lengths)

    def normalized_residuals(self, s: float) -> np.ndarray:
        """|residual| scaled to comparable units across rows and pairs.

        Each row is divided by its monomial norm and by the pair's
        coefficient norm at `s`, which makes the noise level of the result
        roughly uniform so one global threshold is meaningful.
        """
        abs_e = np.abs(self.residuals(s))
        abs_e /= self.row_scale
        vnorm = self.coefficient_norms(s).astype(abs_e.dtype)
        if self.uniform:
            abs_e.reshape(len(self.lengths), -1)[...] /= vnorm[:, None]
        else:
            abs_e /= self.expand(vnorm)
        return abs_e

    def global_median(self, values: np.ndarray) -> float:
        """Median of `values`, subsampled by stride for very large systems."""
        if len(values) > 4 * MEDIAN_SUBSAMPLE_LIMIT**2:
            stride = len(values) // (4 * MEDIAN_SUBSAMPLE_LIMIT**2)
            values = values[::stride]
        return float(np.median(values))


# systems larger than this report the residual RMS through the quadratic
# identity instead of an extra full pass; below it the RMS is exact even
# for noise-free data where the identity cancels catastrophically
EXACT_RMS_LIMIT = 2_000_000


def _finalize(
    system: _System,
    sums: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    rejected: np.ndarray | None,
    active: np.ndarray,
    algorithm: Algorithm,
) -> ScaleEstimate:
    """Closed form and residual statistics over the kept rows."""
    num_p, den_p, gg_p, counts = sums
    kept = int(counts[active].sum())
    denominator = float(den_p[active].sum())
    numerator = float(num_p[active].sum())
    scale_ref = float(system.den_full.sum() + system.gg_full.sum())
    if kept == 0 or denominator <= scale_ref * np.finfo(float).eps ** 2:
        raise DegenerateSystem(
            "no pair constrains the scale (all f-vectors annihilated by U)"
        )
    s = -numerator / denominator
    if system.total <= EXACT_RMS_LIMIT:
        keep_rows = system.expand(active)
        if rejected is not None:
            keep_rows &= ~rejected
        e = system.residuals(s)[keep_rows]
        rms = math.sqrt(float(e @ e) / kept)
    else:
        sq_sum = s * s * denominator + 2.0 * s * numerator + float(gg_p[active].sum())
        rms = math.sqrt(max(sq_sum, 0.0) / kept)
    if s < 0:
        log.warning("negative scale estimate %g: check pose conventions", s)
    return ScaleEstimate(
        s=s,
        algorithm=algorithm,
        pairs_used=int(active.sum()),
        inlier_fraction=kept / system.total if system.total else 0.0,
        residual_rms=rms,
        numerator=numerator,
        denominator=denominator,
    )


def _active_pairs(system, counts, den, gg, min_rows):
    """Pairs that still constrain the scale; raise when none are left."""
    enough = counts >= min_rows
    if not enough.any():
        raise AllRejected("every pair fell below the correspondence minimum")
    active = enough & system.informative & (den > UNINFORMATIVE_RATIO * gg)
    if not active.any():
        raise DegenerateSystem(
            "no pair constrains the scale (all f-vectors annihilated by U)"
        )
    return active


def _solve_system(system: _System, algorithm: Algorithm) -> ScaleEstimate:
    active = _active_pairs(
        system, system.lengths, system.den_full, system.gg_full, min_rows=1
    )
    sums = (
        system.num_full,
        system.den_full,
        system.gg_full,
        system.lengths.astype(float),
    )
    return _finalize(system, sums, None, active, algorithm)


def _median_row_root(system: _System) -> float | None:
    """Median over correspondences of the single-row roots -ug/uf.

    Each informative row pins the scale at -ug/uf exactly when clean, so
    the median is a cheap high-breakdown starting hypothesis that gross
    outliers cannot poison.  Returns None when no row is informative.
    """
    informative = system.informative
    if not informative.any():
        return None
    if system.uniform and system.total > 4 * MEDIAN_SUBSAMPLE_LIMIT**2:
        stride = max(1, system.total // (4 * MEDIAN_SUBSAMPLE_LIMIT**2))
        n = int(system.lengths[0])
        uf = system.uf.reshape(-1, n)[informative, ::stride].ravel()
        ug = system.ug.reshape(-1, n)[informative, ::stride].ravel()
    else:
        keep = system.expand(informative)
        uf = system.uf[keep]
        ug = system.ug[keep]
    floor = 1e-12 * float(np.max(np.abs(uf), initial=0.0))
    usable = np.abs(uf) > floor
    if not usable.any():
        return None
    return float(np.median(-ug[usable] / uf[usable]))


def _robust_system(
    system: _System, algorithm: Algorithm, config: SolverConfig
) -> ScaleEstimate:
    min_rows = config.min_correspondences_per_pair
    n_pairs = len(system.lengths)
    hypothesis = _median_row_root(system)
    if hypothesis is None:
        # nothing informative; let the plain path raise the right error
        return _solve_system(system, algorithm)

    rejected = np.zeros(system.total, dtype=bool)
    estimate = None
    for _ in range(config.ransac_iterations):
        if config.residual_threshold is not None:
            # explicit thresholds cut the raw residual
            abs_e = np.abs(system.residuals(hypothesis))
            new_rejected = abs_e > config.residual_threshold
        else:
            # adaptive trimming cuts residuals normalized per row and per
            # pair, so one global MAD threshold applies to all of them and
            # pairs inconsistent with the consensus scale drop out whole
            normalized = system.normalized_residuals(hypothesis)
            med = system.global_median(normalized)
            threshold = max(MAD_FACTOR * MAD_SIGMA * med, THRESHOLD_FLOOR)
            new_rejected = normalized > threshold
        changed = int(np.count_nonzero(new_rejected != rejected))
        stable = estimate is not None and changed <= STABLE_ROW_FRACTION * system.total

        idx = np.flatnonzero(new_rejected)
        ids = system.pair_of_rows(idx)
        uf_r = system.uf[idx].astype(float)
        ug_r = system.ug[idx].astype(float)
        counts = (system.lengths - np.bincount(ids, minlength=n_pairs)).astype(float)
        den = system.den_full - np.bincount(ids, weights=uf_r * uf_r, minlength=n_pairs)
        gg = system.gg_full - np.bincount(ids, weights=ug_r * ug_r, minlength=n_pairs)
        num = system.num_full - np.bincount(ids, weights=uf_r * ug_r, minlength=n_pairs)
        active = _active_pairs(system, counts, den, gg, min_rows)
        denominator = float(den[active].sum())
        numerator = float(num[active].sum())
        previous = estimate
        estimate = -numerator / denominator
        rejected = new_rejected
        sums = (num, den, gg, counts)
        if stable:
            break
        if previous is not None and abs(estimate - previous) <= (
            ESTIMATE_STABILITY * max(1.0, abs(estimate))
        ):
            break
        hypothesis = estimate

    return _finalize(system, sums, rejected, active, algorithm)


def _algorithm_of(pairs) -> Algorithm:
    algorithms = {coeffs.algorithm for _, coeffs in pairs}
    if len(algorithms) > 1:
        raise ValueError("pairs mix coefficients from both algorithms")
    return algorithms.pop()


def solve_scale(
    pairs: list[tuple[PairObservation, PairCoefficients]],
) -> ScaleEstimate:
    """Closed-form scale over all correspondences of all pairs.

    Raises DegenerateSystem when the denominator sum vanishes, e.g. for a
    pure-rotation motion set under ALG1.
    """
    if not pairs:
        raise DegenerateSystem("empty pair list")
    return _solve_system(_System.from_pairs(pairs), _algorithm_of(pairs))


def reject_outliers(
    pair: PairObservation,
    coeffs: PairCoefficients,
    s_hypothesis: float,
    config: SolverConfig = SolverConfig(),
) -> PairObservation:
    """Correspondences of `pair` whose residual at `s_hypothesis` passes the cut.

    Keeps rows with ``|u_k . (s*f + g)| <= threshold``, order preserved;
    the default threshold is the exact MAD-scaled cut of this pair's
    residuals.  Raises AllRejected when nothing survives.
    """
    if not math.isfinite(s_hypothesis):
        raise ValueError("scale hypothesis must be finite")
    uf, ug, norms = _pair_uf_ug(pair, coeffs)
    residuals = s_hypothesis * uf + ug
    if config.residual_threshold is not None:
        mask = np.abs(residuals) <= config.residual_threshold
    else:
        v = s_hypothesis * coeffs.f + coeffs.g
        vnorm = max(float(np.linalg.norm(v)), 1e-150)
        normalized = np.abs(residuals) / (norms * vnorm)
        threshold = max(
            MAD_FACTOR * MAD_SIGMA * float(np.median(normalized)),
            THRESHOLD_FLOOR,
        )
        mask = normalized <= threshold
    if not mask.any():
        raise AllRejected(f"no inliers left in pair {pair.pair}")
    if mask.all():
        return pair
    return pair.select(mask)


def solve_scale_robust(
    pairs: list[tuple[PairObservation, PairCoefficients]],
    config: SolverConfig = SolverConfig(),
) -> ScaleEstimate:
    """Alternate closed-form solves with per-pair outlier trimming.

    The starting hypothesis is the median of per-row roots, so the first
    rejection pass already sees a sane scale even when gross mismatches
    would poison the plain closed form.  Rows are re-tested against the
    full pair each round (early rejects can re-enter); iteration stops
    when the rejected set stops changing materially, when the estimate
    stops moving, or after `config.ransac_iterations` rounds.  Pairs
    trimmed below `config.min_correspondences_per_pair` are excluded from
    the solve; when every pair is excluded AllRejected is raised.
    """
    if not pairs:
        raise DegenerateSystem("empty pair list")
    return _robust_system(_System.from_pairs(pairs), _algorithm_of(pairs), config)


def cost(
    pairs: list[tuple[PairObservation, PairCoefficients]], s: float
) -> float:
    """Stacked epipolar cost J(s) = 1/2 sum ||U (s*f + g)||^2."""
    total = 0.0
    for observation, coeffs in pairs:
        uf, ug, _ = _pair_uf_ug(observation, coeffs)
        e = s * uf + ug
        total += float(e @ e)
    return 0.5 * total
