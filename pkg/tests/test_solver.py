"""Closed-form scale solver and robust trimming tests.

The independent oracle for optimality is a dense grid search over the
stacked quadratic cost; expected scales for synthetic systems come from
the forward construction (the generating scale is known).
"""

import numpy as np
import pytest

from sfmscale.geometry import Algorithm, PairCoefficients, PairObservation
from sfmscale.solver import (
    AllRejected,
    DegenerateSystem,
    ScaleEstimate,
    SolverConfig,
    StereoRig,
    cost,
    reject_outliers,
    solve_scale,
    solve_scale_robust,
)

from test_geometry import make_rig, random_transform, synthetic_pair


def synthetic_pairs(rng, n_pairs=5, algorithm=Algorithm.ALG1, scale=1.0, n=40):
    rig = make_rig(rng)
    return [
        synthetic_pair(rng, n=n, algorithm=algorithm, scale=scale, rig=rig)
        for _ in range(n_pairs)
    ]


class TestSolveScale:
    @pytest.mark.parametrize("algorithm", [Algorithm.ALG1, Algorithm.ALG2])
    def test_noise_free_single_pair_recovers_unit_scale(self, algorithm):
        rng = np.random.default_rng(30)
        pairs = synthetic_pairs(rng, n_pairs=1, algorithm=algorithm)
        estimate = solve_scale(pairs)
        assert abs(estimate.s - 1.0) < 1e-9
        assert estimate.pairs_used == 1
        assert estimate.inlier_fraction == 1.0

    @pytest.mark.parametrize(
        "algorithm,expected",
        [(Algorithm.ALG1, 1 / 3.0), (Algorithm.ALG2, 3.0)],
    )
    def test_scaled_poses_recovered_exactly(self, algorithm, expected):
        rng = np.random.default_rng(31)
        pairs = synthetic_pairs(rng, algorithm=algorithm, scale=3.0)
        estimate = solve_scale(pairs)
        assert abs(estimate.s - expected) / expected < 1e-8

    def test_constructed_root_is_returned(self):
        # with g = -s0 * f per pair the closed form reduces to s0 by algebra
        rng = np.random.default_rng(32)
        s0 = 1.7
        pairs = []
        for k in range(4):
            observation, coeffs = synthetic_pair(rng, n=20)
            forced = PairCoefficients(
                coeffs.A, coeffs.b, -s0 * coeffs.b, Algorithm.ALG1
            )
            pairs.append((observation, forced))
        estimate = solve_scale(pairs)
        assert np.isclose(estimate.s, s0, rtol=1e-12)

    def test_estimate_identity_and_diagnostics(self):
        rng = np.random.default_rng(33)
        pairs = synthetic_pairs(rng)
        estimate = solve_scale(pairs)
        assert estimate.s == -estimate.numerator / estimate.denominator
        assert estimate.denominator > 0
        assert estimate.residual_rms >= 0.0
        assert estimate.algorithm is Algorithm.ALG1

    def test_pair_order_invariance(self):
        rng = np.random.default_rng(34)
        pairs = synthetic_pairs(rng, n_pairs=6)
        noisy = [
            (PairObservation(o.pair, o.points_i + rng.normal(scale=1e-3, size=o.points_i.shape), o.points_j), c)
            for o, c in pairs
        ]
        s_fwd = solve_scale(noisy).s
        s_rev = solve_scale(noisy[::-1]).s
        assert abs(s_fwd - s_rev) <= 1e-12 * abs(s_fwd)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(35)
        pairs = synthetic_pairs(rng, n_pairs=2)
        perm = rng.permutation(len(pairs[0][0]))
        shuffled = [
            (PairObservation(o.pair, o.points_i[perm], o.points_j[perm]), c)
            for o, c in pairs
        ]
        assert abs(solve_scale(pairs).s - solve_scale(shuffled).s) <= 1e-12

    def test_pure_rotation_under_alg1_is_degenerate(self):
        # zero view translation annihilates every f-vector
        rng = np.random.default_rng(36)
        rig = make_rig()
        from sfmscale.geometry import RigidTransform, pair_coefficients, relative_pose

        t_i = random_transform(rng)
        # pure rotation about the primary camera center: same center,
        # different orientation, so the relative translation vanishes
        center = t_i.center
        rot_j = random_transform(rng).rotation
        t_j = RigidTransform(rot_j, -rot_j @ center)
        rel = relative_pose(t_i, t_j)
        assert np.allclose(rel.translation_direction, np.zeros(3), atol=1e-12)
        coeffs = pair_coefficients(rel, rig, Algorithm.ALG1)
        points = rng.uniform(-1, 1, size=(20, 3)) + [0, 0, 6.0]
        from sfmscale.geometry import compose

        obs_i = compose(rig.extrinsic, t_i).apply(points)
        obs_j = compose(rig.extrinsic, t_j).apply(points)
        observation = PairObservation(
            (0, 1), obs_i[:, :2] / obs_i[:, 2:], obs_j[:, :2] / obs_j[:, 2:]
        )
        with pytest.raises(DegenerateSystem):
            solve_scale([(observation, coeffs)])

    def test_empty_input_is_degenerate(self):
        with pytest.raises(DegenerateSystem):
            solve_scale([])

    def test_mixed_algorithms_rejected(self):
        rng = np.random.default_rng(37)
        p1 = synthetic_pair(rng, algorithm=Algorithm.ALG1)
        p2 = synthetic_pair(rng, algorithm=Algorithm.ALG2)
        with pytest.raises(ValueError):
            solve_scale([p1, p2])


class TestClosedFormOptimality:
    def test_grid_search_never_beats_closed_form(self):
        rng = np.random.default_rng(38)
        for _ in range(20):
            pairs = synthetic_pairs(rng, n_pairs=3, n=25)
            noisy = [
                (
                    PairObservation(
                        o.pair,
                        o.points_i + rng.normal(scale=1e-3, size=o.points_i.shape),
                        o.points_j + rng.normal(scale=1e-3, size=o.points_j.shape),
                    ),
                    c,
                )
                for o, c in pairs
            ]
            s_hat = solve_scale(noisy).s
            best = cost(noisy, s_hat)
            grid = np.linspace(s_hat / 10.0, 10.0 * s_hat, 1000)
            values = [cost(noisy, s) for s in grid]
            assert min(values) >= best - 1e-9

    def test_derivative_vanishes_at_solution(self):
        rng = np.random.default_rng(39)
        pairs = synthetic_pairs(rng, n_pairs=3)
        noisy = [
            (
                PairObservation(
                    o.pair,
                    o.points_i + rng.normal(scale=1e-3, size=o.points_i.shape),
                    o.points_j,
                ),
                c,
            )
            for o, c in pairs
        ]
        s_hat = solve_scale(noisy).s
        h = 1e-6 * max(abs(s_hat), 1.0)
        derivative = (cost(noisy, s_hat + h) - cost(noisy, s_hat - h)) / (2 * h)
        assert abs(derivative) <= 1e-6 * cost(noisy, s_hat) + 1e-12


class TestRejectOutliers:
    def test_clean_data_all_retained(self):
        rng = np.random.default_rng(40)
        observation, coeffs = synthetic_pair(rng)
        out = reject_outliers(observation, coeffs, 1.0, SolverConfig(residual_threshold=1e-6))
        assert len(out) == len(observation)

    def test_infinite_threshold_returns_input(self):
        rng = np.random.default_rng(41)
        observation, coeffs = synthetic_pair(rng)
        out = reject_outliers(
            observation, coeffs, 1.0, SolverConfig(residual_threshold=np.inf)
        )
        assert out is observation

    def test_planted_mismatch_is_rejected(self):
        rng = np.random.default_rng(42)
        observation, coeffs = synthetic_pair(rng, n=30)
        noisy_i = observation.points_i + rng.normal(scale=1e-4, size=(30, 2))
        noisy_j = observation.points_j + rng.normal(scale=1e-4, size=(30, 2))
        # swap one target point with another row: gross mismatch at row 5
        noisy_j[[5, 20]] = noisy_j[[20, 5]]
        tampered = PairObservation(observation.pair, noisy_i, noisy_j)
        clean_residuals = tampered.U @ (1.0 * coeffs.f + coeffs.g)
        clean_rms = float(np.sqrt(np.mean(np.delete(clean_residuals, [5, 20]) ** 2)))
        config = SolverConfig(residual_threshold=3.0 * clean_rms)
        kept = reject_outliers(tampered, coeffs, 1.0, config)
        kept_rows = {tuple(p) for p in kept.points_j}
        assert tuple(noisy_j[5]) not in kept_rows or tuple(noisy_j[20]) not in kept_rows
        assert len(kept) < len(tampered)

    def test_order_preserved(self):
        rng = np.random.default_rng(43)
        observation, coeffs = synthetic_pair(rng, n=25)
        noisy = PairObservation(
            observation.pair,
            observation.points_i + rng.normal(scale=1e-3, size=(25, 2)),
            observation.points_j,
        )
        kept = reject_outliers(noisy, coeffs, 1.0)
        # surviving rows appear in their original relative order
        idx = [
            int(np.flatnonzero((noisy.points_i == row).all(axis=1))[0])
            for row in kept.points_i
        ]
        assert idx == sorted(idx)

    def test_all_rejected_raises(self):
        rng = np.random.default_rng(44)
        observation, coeffs = synthetic_pair(rng)
        with pytest.raises(AllRejected):
            reject_outliers(observation, coeffs, 250.0, SolverConfig(residual_threshold=1e-15))

    def test_nonfinite_hypothesis_rejected(self):
        rng = np.random.default_rng(45)
        observation, coeffs = synthetic_pair(rng)
        with pytest.raises(ValueError):
            reject_outliers(observation, coeffs, float("nan"))


class TestSolveScaleRobust:
    def test_clean_data_matches_plain_solve(self):
        rng = np.random.default_rng(46)
        pairs = synthetic_pairs(rng, n_pairs=4)
        plain = solve_scale(pairs)
        robust = solve_scale_robust(pairs, SolverConfig())
        assert robust.s == pytest.approx(plain.s, rel=1e-12)
        assert robust.inlier_fraction == 1.0

    @pytest.mark.parametrize("algorithm", [Algorithm.ALG1, Algorithm.ALG2])
    def test_planted_gross_outliers_are_neutralized(self, algorithm):
        rng = np.random.default_rng(47)
        pairs = []
        clean_pairs = []
        rig = make_rig(rng)
        for _ in range(6):
            observation, coeffs = synthetic_pair(rng, n=50, algorithm=algorithm, rig=rig)
            pts_i = observation.points_i + rng.normal(scale=1e-4, size=(50, 2))
            pts_j = observation.points_j + rng.normal(scale=1e-4, size=(50, 2))
            # 10% gross outliers: replace target rows with random image points
            bad = rng.choice(50, size=5, replace=False)
            pts_j[bad] = rng.uniform(-0.8, 0.8, size=(5, 2))
            good = np.setdiff1d(np.arange(50), bad)
            pairs.append((PairObservation(observation.pair, pts_i, pts_j), coeffs))
            clean_pairs.append(
                (PairObservation(observation.pair, pts_i[good], pts_j[good]), coeffs)
            )
        estimate = solve_scale_robust(pairs, SolverConfig())
        clean = solve_scale(clean_pairs)
        assert abs(estimate.s - 1.0) < 0.01
        assert estimate.s == pytest.approx(clean.s, abs=0.01)
        assert estimate.inlier_fraction < 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(48)
        pairs = synthetic_pairs(rng, n_pairs=3)
        noisy = [
            (
                PairObservation(
                    o.pair,
                    o.points_i + rng.normal(scale=2e-3, size=o.points_i.shape),
                    o.points_j,
                ),
                c,
            )
            for o, c in pairs
        ]
        first = solve_scale_robust(noisy, SolverConfig(rng_seed=11))
        second = solve_scale_robust(noisy, SolverConfig(rng_seed=11))
        assert first == second

    def test_min_correspondence_exclusion(self):
        rng = np.random.default_rng(49)
        small, coeffs = synthetic_pair(rng, n=4)
        big = synthetic_pair(rng, n=40)
        estimate = solve_scale_robust(
            [(small, coeffs), big], SolverConfig(min_correspondences_per_pair=8)
        )
        assert estimate.pairs_used == 1

    def test_all_pairs_excluded_raises(self):
        rng = np.random.default_rng(50)
        observation, coeffs = synthetic_pair(rng, n=4)
        with pytest.raises(AllRejected):
            solve_scale_robust(
                [(observation, coeffs)], SolverConfig(min_correspondences_per_pair=8)
            )


class TestStereoRig:
    def test_zero_baseline_rejected(self):
        from sfmscale.geometry import Intrinsics, RigidTransform

        with pytest.raises(ValueError):
            StereoRig(
                RigidTransform(np.eye(3), np.zeros(3)),
                Intrinsics(100.0, 100.0, 0.0, 0.0),
            )

    def test_baseline_is_translation_norm(self):
        rig = make_rig(baseline=0.25)
        assert rig.baseline == pytest.approx(0.25)


class TestScaleEstimate:
    def test_negative_flag(self):
        estimate = ScaleEstimate(
            s=-0.5,
            algorithm=Algorithm.ALG1,
            pairs_used=1,
            inlier_fraction=1.0,
            residual_rms=0.0,
            numerator=0.5,
            denominator=1.0,
        )
        assert estimate.is_negative
