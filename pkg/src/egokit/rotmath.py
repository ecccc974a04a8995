"""Rotation representations and SO(3) operations.

All functions accept a single item or a batch; leading dimensions are
preserved. A 6D rotation is the first two columns of a rotation matrix,
stacked as ``(c1x, c1y, c1z, c2x, c2y, c2z)``.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, InvalidRotation, RankDeficient

ORTHO_TOL = 1e-6
_MIN_NORM = 1e-9
_MIN_ANGLE = 1e-7
_MIN_SINGULAR = 1e-9


def rot6d_to_matrix(a) -> np.ndarray:
    """Gram-Schmidt a 6D rotation into a 3x3 matrix, shape (..., 6) -> (..., 3, 3).

    Raises DegenerateInput if a column is near zero or the two columns
    are (anti)parallel.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != 6:
        raise DegenerateInput(f"expected trailing dimension 6, got {a.shape}")
    a1, a2 = a[..., :3], a[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    if np.any(~np.isfinite(a)):
        raise DegenerateInput("non-finite 6D rotation")
    if np.any(n1 < _MIN_NORM) or np.any(n2 < _MIN_NORM):
        raise DegenerateInput("6D rotation column with near-zero norm")
    sin_angle = np.linalg.norm(np.cross(a1, a2), axis=-1) / (n1 * n2)
    if np.any(sin_angle < np.sin(_MIN_ANGLE)):
        raise DegenerateInput("6D rotation columns are parallel")
    b1 = a1 / n1[..., None]
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u2 / np.linalg.norm(u2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def is_rotation(m, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    eye = np.eye(3)
    err = np.linalg.norm(np.swapaxes(m, -1, -2) @ m - eye, axis=(-2, -1))
    det = np.linalg.det(m)
    return bool(np.all(err < tol) and np.all(np.abs(det - 1.0) < tol))


def matrix_to_rot6d(m, check: bool = True) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if check and not is_rotation(m):
        raise InvalidRotation("matrix is not a valid rotation")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def geodesic_distance(r1, r2) -> np.ndarray | float:
    """Angle in [0, pi] of the relative rotation r1^T r2.

    Equal to arccos((tr - 1) / 2), evaluated as atan2(sin, cos) so that small angles
    (and identical inputs) do not lose precision to arccos near 1.
    """
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    rel = np.swapaxes(r1, -1, -2) @ r2
    tr = np.trace(rel, axis1=-2, axis2=-1)
    skew = np.stack([rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0],
                     rel[..., 1, 0] - rel[..., 0, 1]], axis=-1)
    ang = np.arctan2(0.5 * np.linalg.norm(skew, axis=-1), 0.5 * (tr - 1.0))
    return float(ang) if ang.ndim == 0 else ang


def project_to_so3(m) -> np.ndarray:
    """Frobenius-nearest rotation, U diag(1, 1, det(UV^T)) V^T."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise RankDeficient("non-finite matrix")
    u, s, vt = np.linalg.svd(m)
    if np.any(np.sum(s < _MIN_SINGULAR, axis=-1) >= 2):
        raise RankDeficient("matrix has rank < 2")
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    return u @ vt


def average_rotations(rs) -> np.ndarray:
    """Chordal mean: project the elementwise mean onto SO(3)."""
    rs = np.asarray(rs, dtype=float)
    if rs.ndim < 3 or rs.shape[0] == 0:
        raise ValueError("average_rotations needs a nonempty stack of 3x3 matrices")
    return project_to_so3(rs.mean(axis=0))


def axis_angle_to_matrix(axis, angle=None) -> np.ndarray:
    """Rodrigues' formula.

    With ``angle=None`` the axis is a rotation vector whose norm is the angle.
    """
    axis = np.asarray(axis, dtype=float)
    if angle is None:
        angle = np.linalg.norm(axis, axis=-1)
        safe = np.where(angle < 1e-12, 1.0, angle)
        unit = axis / safe[..., None]
    else:
        angle = np.asarray(angle, dtype=float)
        unit = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    x, y, z = unit[..., 0], unit[..., 1], unit[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def random_rotation(rng: np.random.Generator, size=None, max_angle: float = np.pi) -> np.ndarray:
    """Random rotations with uniformly distributed axis and angle in [0, max_angle]."""
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    axis = rng.standard_normal(shape + (3,))
    angle = rng.uniform(0.0, max_angle, size=shape)
    return axis_angle_to_matrix(axis, angle)
