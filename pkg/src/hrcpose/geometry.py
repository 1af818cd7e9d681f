"""Pose representation, pose distances and error metrics.

Rotations are carried as two perpendicular unit plane normals ``r_x`` and
``r_y`` (the first two columns of the rotation matrix). Symmetric categories
rotate freely about ``r_y``. All lengths are meters.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNormalsError, InvalidPoseError

POSE_TOL = 1e-6

_CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))


@dataclass(frozen=True)
class Pose:
    r_x: np.ndarray
    r_y: np.ndarray
    t: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for name in ("r_x", "r_y", "t", "s"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            object.__setattr__(self, name, arr)

    def validate(self, tol=POSE_TOL):
        """Raise InvalidPoseError unless the normals are unit, perpendicular and s > 0."""
        for name in ("r_x", "r_y"):
            n = np.linalg.norm(getattr(self, name))
            if not abs(n - 1.0) <= tol:
                raise InvalidPoseError(f"{name} has norm {n!r}, expected 1")
        d = float(self.r_x @ self.r_y)
        if not abs(d) <= tol:
            raise InvalidPoseError(f"r_x . r_y = {d!r}, expected 0")
        if not np.all(self.s > 0):
            raise InvalidPoseError(f"size must be positive, got {self.s.tolist()}")
        if not (np.all(np.isfinite(self.t))):
            raise InvalidPoseError("translation is not finite")
        return self

    @property
    def rotation(self):
        return rotation_from_normals(self.r_x, self.r_y)

    @classmethod
    def from_matrix(cls, R, t, s):
        R = np.asarray(R, dtype=np.float64)
        return cls(R[:, 0], R[:, 1], t, s)


@dataclass(frozen=True)
class CategoryInfo:
    """One object category.

    ``shape`` names the canonical surface used by the synthetic generator and
    ``extents`` its base size in meters. The symmetry axis is always ``r_y``.
    """

    id: int
    name: str
    symmetric: bool
    shape: str = "box"
    extents: tuple = (0.1, 0.1, 0.1)
    symmetry_axis: str = field(default="r_y", init=False)


DEFAULT_CATEGORIES = (
    CategoryInfo(0, "can", True, "cylinder", (0.08, 0.16, 0.08)),
    CategoryInfo(1, "bracket", False, "lprism", (0.16, 0.12, 0.06)),
    CategoryInfo(2, "block", False, "notchbox", (0.12, 0.09, 0.14)),
)


def check_category_table(categories):
    ids = [c.id for c in categories]
    if ids != list(range(len(categories))):
        raise ValueError(f"category ids must be dense 0..C-1, got {ids}")
    names = [c.name for c in categories]
    if len(set(names)) != len(names):
        raise ValueError(f"category names must be unique, got {names}")
    return categories


def rotation_distance(a: Pose, b: Pose, cat: CategoryInfo) -> float:
    """Plane-normal rotation distance, in [0, 4] (or [0, 2] if symmetric)."""
    a.validate()
    b.validate()
    d = 1.0 - float(a.r_y @ b.r_y)
    if not cat.symmetric:
        d += 1.0 - float(a.r_x @ b.r_x)
    return max(d, 0.0)


def translation_distance(a: Pose, b: Pose) -> float:
    diff = a.t - b.t
    return float(diff @ diff) / 3.0


def rotation_distance_matrix(rx, ry, symmetric):
    """Pairwise rotation distances for stacked unit normals.

    ``symmetric`` is a per-sample boolean array; a pair uses the axis-only
    distance when both members are symmetric.
    """
    rx = np.asarray(rx, dtype=np.float64)
    ry = np.asarray(ry, dtype=np.float64)
    sym = np.asarray(symmetric, dtype=bool)
    # elementwise products, not BLAS: identical pairs must give identical entries
    d = 1.0 - (ry[:, None, :] * ry[None, :, :]).sum(axis=-1)
    both_sym = sym[:, None] & sym[None, :]
    dx = 1.0 - (rx[:, None, :] * rx[None, :, :]).sum(axis=-1)
    d = d + np.where(both_sym, 0.0, dx)
    d = np.maximum(d, 0.0)
    np.fill_diagonal(d, 0.0)
    # exact symmetry regardless of summation order
    return np.triu(d) + np.triu(d, 1).T


def translation_distance_matrix(t):
    t = np.asarray(t, dtype=np.float64)
    diff = t[:, None, :] - t[None, :, :]
    return (diff * diff).sum(axis=-1) / 3.0


def rotation_from_normals(r_x, r_y) -> np.ndarray:
    """Orthonormal rotation matrix with columns (r_x', r_y, r_x' x r_y).

    ``r_y`` keeps its direction; ``r_x`` is made perpendicular to it.
    """
    r_x = np.asarray(r_x, dtype=np.float64).reshape(3)
    r_y = np.asarray(r_y, dtype=np.float64).reshape(3)
    ny = np.linalg.norm(r_y)
    nx = np.linalg.norm(r_x)
    if not (ny > 1e-12 and nx > 1e-12) or not (np.isfinite(nx) and np.isfinite(ny)):
        raise DegenerateNormalsError("zero or non-finite plane normal")
    y = r_y / ny
    x = r_x - (r_x @ y) * y
    nxo = np.linalg.norm(x)
    if nxo <= 1e-8 * nx:
        raise DegenerateNormalsError("plane normals are parallel")
    x = x / nxo
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def _angle_between(a, b):
    # 2*atan2(|a-b|, |a+b|) is the angle between unit vectors, stable near 0 and pi
    return 2.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b))


def rotation_error_deg(pred: Pose, gt: Pose, cat: CategoryInfo) -> float:
    """Rotation error in degrees; symmetric categories compare only the axes."""
    if cat.symmetric:
        a = pred.r_y / np.linalg.norm(pred.r_y)
        b = gt.r_y / np.linalg.norm(gt.r_y)
        return float(np.degrees(_angle_between(a, b)))
    Rp = rotation_from_normals(pred.r_x, pred.r_y)
    Rg = rotation_from_normals(gt.r_x, gt.r_y)
    # arccos((tr(Rp^T Rg) - 1) / 2) loses precision near 0; use the half angle:
    # |Rp - Rg|_F = 2 sqrt(2) sin(a/2) and 1 + tr(Rp^T Rg) = 4 cos^2(a/2)
    half_sin = np.linalg.norm(Rp - Rg) / (2.0 * np.sqrt(2.0))
    half_cos = np.sqrt(max(1.0 + float(np.sum(Rp * Rg)), 0.0)) / 2.0
    ang = 2.0 * np.arctan2(half_sin, half_cos)
    return float(np.clip(np.degrees(ang), 0.0, 180.0))


def translation_error_cm(pred: Pose, gt: Pose) -> float:
    return float(np.linalg.norm(pred.t - gt.t)) * 100.0


def box_corners(p: Pose) -> np.ndarray:
    """(8, 3) corners of the oriented box, ordered by sign pattern (-,-,-) ... (+,+,+)."""
    R = rotation_from_normals(p.r_x, p.r_y)
    local = _CORNER_SIGNS * (p.s / 2.0)
    return local @ R.T + p.t


def axis_rotation(axis, angle_rad) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` (normalized here)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
