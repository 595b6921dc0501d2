"""Rigid transforms, normalized image coordinates, and per-pair epipolar coefficients.

Conventions used throughout the package:

* Poses map world coordinates to camera coordinates: ``X_cam = R @ X_world + t``.
* Rotations are stored as 3x3 matrices; quaternions appear only at file
  boundaries (see :mod:`sfmscale.dataset`).
* Normalized image coordinates are pixel coordinates premultiplied by the
  inverse intrinsic matrix, i.e. points on the z=1 plane of the camera.
* Correspondences are assumed lens-undistorted; distorted inputs break the
  epipolar relations silently.

For an image pair (i, j) the essential matrix of the secondary cameras is
affine in the unknown scale ``s``::

    E(s) = skew(s * b + c) @ A

and the epipolar residual of one correspondence flattens to
``u . (s*f + g)`` where ``u`` is a 9-vector of coordinate monomials and
``f``, ``g`` stack the cross products of ``b`` and ``c`` with the columns
of ``A``.  Both forms are implemented here and pinned against each other
in the tests.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

ROTATION_ATOL = 1e-9


class Algorithm(enum.Enum):
    """Which translation carries the scale parameter.

    ALG1 scales the inter-view translations of the primary camera (the
    SfM output); ALG2 scales the rig baseline instead.  The two are
    geometrically dual: scaling the baseline by ``s`` is equivalent to
    scaling the view translations by ``1/s``.
    """

    ALG1 = 1
    ALG2 = 2

    @classmethod
    def parse(cls, value: "Algorithm | int | str") -> "Algorithm":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            value = value.strip().lower().removeprefix("alg")
        return cls(int(value))


def _as_matrix3(value) -> np.ndarray:
    m = np.asarray(value, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {m.shape}")
    return m


def _as_vector3(value) -> np.ndarray:
    v = np.asarray(value, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"expected length-3 vector, got shape {v.shape}")
    return v


def check_rotation(rotation: np.ndarray, atol: float = ROTATION_ATOL) -> np.ndarray:
    """Validate that `rotation` is orthonormal with determinant +1."""
    r = _as_matrix3(rotation)
    if not np.all(np.abs(r.T @ r - np.eye(3)) <= atol):
        raise ValueError("rotation is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValueError("rotation has negative determinant")
    return r


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD (used on file ingest)."""
    u, _, vt = np.linalg.svd(_as_matrix3(rotation))
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = _as_vector3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: ``X_out = rotation @ X_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(self, "translation", _as_vector3(self.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (n, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera center in the input (world) frame."""
        return -self.rotation.T @ self.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Left-to-right matrix product of homogeneous forms: result == a . b.

    ``compose(a, b).apply(x) == a.apply(b.apply(x))``, so composing a rig
    offset onto a world-to-camera pose is ``compose(rig, pose)``.
    """
    return RigidTransform(
        a.rotation @ b.rotation,
        a.rotation @ b.translation + a.translation,
    )


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


@dataclass(frozen=True)
class RelativePose:
    """Relative motion from view i to view j: blocks of ``T_j @ inv(T_i)``."""

    rotation: np.ndarray
    translation_direction: np.ndarray
    source_index: int = 0
    target_index: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        object.__setattr__(
            self, "translation_direction", _as_vector3(self.translation_direction)
        )


def relative_pose(
    t_i: RigidTransform,
    t_j: RigidTransform,
    source_index: int = 0,
    target_index: int = 1,
) -> RelativePose:
    """Rotation/translation blocks of ``T_j @ inv(T_i)``."""
    rot = t_j.rotation @ t_i.rotation.T
    trans = t_j.translation - rot @ t_i.translation
    return RelativePose(rot, trans, source_index, target_index)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class NormalizedPoint:
    """Image point on the z=1 plane (implied homogeneous third coordinate 1)."""

    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def homogeneous(self) -> np.ndarray:
        return np.array([self.x, self.y, 1.0])


def normalize(pixel, intrinsics: Intrinsics) -> NormalizedPoint:
    """Map a pixel (u, v) to normalized coordinates via the inverse intrinsics."""
    u, v = float(pixel[0]), float(pixel[1])
    return NormalizedPoint((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy)


def normalize_array(pixels: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Vectorized `normalize` for an (n, 2) pixel array."""
    px = np.asarray(pixels, dtype=float)
    out = np.empty_like(px)
    out[..., 0] = (px[..., 0] - intrinsics.cx) / intrinsics.fx
    out[..., 1] = (px[..., 1] - intrinsics.cy) / intrinsics.fy
    return out


def monomial_rows(points_i: np.ndarray, points_j: np.ndarray) -> np.ndarray:
    """Per-correspondence monomial rows of the expanded epipolar constraint.

    Row k is ``[x_i x_j, x_i y_j, x_i, y_i x_j, y_i y_j, y_i, x_j, y_j, 1]``
    built from the normalized coordinates of correspondence k.
    """
    pi = np.asarray(points_i, dtype=float)
    pj = np.asarray(points_j, dtype=float)
    if pi.shape != pj.shape or pi.ndim != 2 or pi.shape[1] != 2:
        raise ValueError("points_i and points_j must both have shape (n, 2)")
    xi, yi = pi[:, 0], pi[:, 1]
    xj, yj = pj[:, 0], pj[:, 1]
    return np.stack(
        [xi * xj, xi * yj, xi, yi * xj, yi * yj, yi, xj, yj, np.ones_like(xi)],
        axis=1,
    )


@dataclass(frozen=True)
class PairObservation:
    """Normalized correspondences of one image pair (i, j).

    `U` is the n x 9 monomial matrix with one `monomial_rows` row per
    correspondence; it is derived from the stored points on access so the
    observation stays cheap to slice and carry around.
    """

    pair: tuple[int, int]
    points_i: np.ndarray
    points_j: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.points_i, dtype=float)
        pj = np.asarray(self.points_j, dtype=float)
        if pi.shape != pj.shape or pi.ndim != 2 or pi.shape[1] != 2:
            raise ValueError("points_i and points_j must both have shape (n, 2)")
        if len(pi) < 1:
            raise ValueError("a pair needs at least one correspondence")
        object.__setattr__(self, "points_i", pi)
        object.__setattr__(self, "points_j", pj)
        object.__setattr__(self, "pair", (int(self.pair[0]), int(self.pair[1])))

    def __len__(self) -> int:
        return len(self.points_i)

    @property
    def U(self) -> np.ndarray:
        return monomial_rows(self.points_i, self.points_j)

    def select(self, mask: np.ndarray) -> "PairObservation":
        """Row subset, order preserved."""
        return PairObservation(self.pair, self.points_i[mask], self.points_j[mask])


@dataclass(frozen=True)
class PairCoefficients:
    """Scale-affine essential-matrix coefficients of one pair.

    ``E(s) = skew(s*b + c) @ A`` with `A` the conjugated relative rotation.
    `f` and `g` are the 9-vectors stacking ``b x a_k`` and ``c x a_k`` over
    the columns ``a_k`` of `A`, ordered so that ``u . (s*f + g)`` equals
    ``p_j^T E(s) p_i`` for the monomial layout of `monomial_rows`.
    """

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    algorithm: Algorithm
    f: np.ndarray = field(init=False)
    g: np.ndarray = field(init=False)

    def __post_init__(self):
        a = check_rotation(self.A)
        b = _as_vector3(self.b)
        c = _as_vector3(self.c)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "f", _column_stacked_cross(b, a))
        object.__setattr__(self, "g", _column_stacked_cross(c, a))


def _column_stacked_cross(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    # columns of skew(v) @ a are v x a_k; column-major flatten matches the
    # monomial layout (u . vec == p_j^T M p_i)
    return (skew(v) @ a).flatten(order="F")


def pair_coefficients(
    rel: RelativePose,
    rig: "StereoRig",
    algorithm: Algorithm | int | str = Algorithm.ALG1,
) -> PairCoefficients:
    """Coefficients (A, b, c, f, g) of a pair under the chosen algorithm.

    With `R_s`, `t_s` the rig extrinsic and `R_v`, `t_v` the relative pose
    of the primary cameras:

    * ALG1: ``A = R_s R_v R_s^-1``, ``b = R_s t_v``, ``c = (I - A) t_s``
    * ALG2: same ``A``, ``b = (I - A) t_s``, ``c = R_s t_v``
    """
    algorithm = Algorithm.parse(algorithm)
    r_s = rig.extrinsic.rotation
    t_s = rig.extrinsic.translation
    a = r_s @ rel.rotation @ r_s.T
    rotated_t = r_s @ rel.translation_direction
    rig_term = t_s - a @ t_s
    if algorithm is Algorithm.ALG1:
        b, c = rotated_t, rig_term
    else:
        b, c = rig_term, rotated_t
    return PairCoefficients(A=a, b=b, c=c, algorithm=algorithm)


def essential_matrix(coeffs: PairCoefficients, s: float) -> np.ndarray:
    """Essential matrix at scale `s`: ``skew(s*b + c) @ A``."""
    return skew(s * coeffs.b + coeffs.c) @ coeffs.A


def epipolar_residuals(
    observation: PairObservation, coeffs: PairCoefficients, s: float
) -> np.ndarray:
    """Per-correspondence scalar residuals ``u_k . (s*f + g)``."""
    return observation.U @ (s * coeffs.f + coeffs.g)
