"""Synthetic multi-category point-cloud pose dataset.

Every sample is a pure function of ``(seed, category id, sample index)``:
its generator is ``np.random.default_rng([seed, cat_id, index])``, so any
single record can be regenerated without producing the rest.

Canonical shapes live in the unit-extent box ``[-0.5, 0.5]^3`` and are
scaled per axis by the pose size ``s``:

* ``cylinder`` -- radius 0.5 about the y axis (the symmetry axis).
* ``lprism``   -- L-shaped profile in x/y with unequal arm thickness, extruded along z.
* ``notchbox`` -- box with an unequal corner notch removed.

Neither prism has a proper rotational symmetry.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .errors import DatasetParseError, DatasetVersionError
from .geometry import (
    DEFAULT_CATEGORIES,
    CategoryInfo,
    Pose,
    axis_rotation,
    quaternion_to_matrix,
)

FORMAT_VERSION = 1


@dataclass
class GenConfig:
    seed: int = 0
    categories: tuple = DEFAULT_CATEGORIES
    samples_per_category: int = 200
    test_per_category: int = 50
    n_points: int = 256
    translation_range: tuple = ((-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3))
    scale_range: tuple = (0.8, 1.2)
    noise_sigma: float = 0.002
    # augmentation (applied by the trainer, per step)
    aug_noise: bool = True
    aug_noise_mag: float = 0.002
    aug_scale: bool = True
    aug_scale_range: tuple = (0.9, 1.1)
    aug_rigid: bool = True
    aug_rot_deg: float = 5.0
    aug_trans: float = 0.02

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.translation_range = tuple(tuple(r) for r in self.translation_range)
        self.scale_range = tuple(self.scale_range)
        self.aug_scale_range = tuple(self.aug_scale_range)
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        for lo, hi in (*self.translation_range, self.scale_range, self.aug_scale_range):
            if not lo <= hi:
                raise ValueError(f"empty range ({lo}, {hi})")


@dataclass(frozen=True)
class PoseSample:
    points: np.ndarray
    pose: Pose
    category: int
    symmetric: bool

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))


# ---------------------------------------------------------------- shapes


def _voxel_faces(edges, occ):
    """Exposed axis-aligned faces of a union of grid cells.

    ``edges`` holds the cell boundaries per axis, ``occ`` the occupancy.
    Returns a list of ``(axis, coord, (lo_u, hi_u), (lo_v, hi_v))`` where u, v
    are the two other axes in increasing order.
    """
    occ = np.asarray(occ, dtype=bool)
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        padded = np.pad(occ, [(1, 1) if a == axis else (0, 0) for a in range(3)])
        for b in range(occ.shape[axis] + 1):
            lo = np.take(padded, b, axis=axis)
            hi = np.take(padded, b + 1, axis=axis)
            exposed = lo != hi
            for iu, iv in zip(*np.nonzero(exposed)):
                eu, ev = edges[others[0]], edges[others[1]]
                faces.append((axis, edges[axis][b], (eu[iu], eu[iu + 1]), (ev[iv], ev[iv + 1])))
    return faces


def _lprism_faces():
    edges = ([-0.5, 0.0, 0.5], [-0.5, -0.2, 0.5], [-0.5, 0.5])
    occ = np.ones((2, 2, 1), dtype=bool)
    occ[1, 1, 0] = False
    return _voxel_faces(edges, occ)


def _notchbox_faces():
    edges = ([-0.5, 0.1, 0.5], [-0.5, 0.2, 0.5], [-0.5, -0.1, 0.5])
    occ = np.ones((2, 2, 2), dtype=bool)
    occ[1, 1, 1] = False
    return _voxel_faces(edges, occ)


_FACES = {"lprism": _lprism_faces(), "notchbox": _notchbox_faces()}


def _sample_faces(faces, u, v):
    areas = np.array([(fu[1] - fu[0]) * (fv[1] - fv[0]) for _, _, fu, fv in faces])
    cdf = np.concatenate([[0.0], np.cumsum(areas)]) / areas.sum()
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(faces) - 1)
    local_u = (u - cdf[idx]) / (cdf[idx + 1] - cdf[idx])
    pts = np.empty((len(u), 3))
    for f, (axis, c, fu, fv) in enumerate(faces):
        sel = idx == f
        ou, ov = [a for a in range(3) if a != axis]
        pts[sel, axis] = c
        pts[sel, ou] = fu[0] + local_u[sel] * (fu[1] - fu[0])
        pts[sel, ov] = fv[0] + v[sel] * (fv[1] - fv[0])
    return pts


def _sample_cylinder(u, v):
    lateral, cap = math.pi, math.pi / 4.0
    total = lateral + 2 * cap
    pts = np.empty((len(u), 3))
    c0, c1 = lateral / total, (lateral + cap) / total
    side = u < c0
    top = (u >= c0) & (u < c1)
    bottom = u >= c1
    th = 2 * math.pi * u[side] / c0
    pts[side] = np.stack([0.5 * np.cos(th), v[side] - 0.5, 0.5 * np.sin(th)], axis=1)
    for sel, y, lo, hi in ((top, 0.5, c0, c1), (bottom, -0.5, c1, 1.0)):
        r = 0.5 * np.sqrt((u[sel] - lo) / (hi - lo))
        ph = 2 * math.pi * v[sel]
        pts[sel] = np.stack([r * np.cos(ph), np.full(r.shape, y), r * np.sin(ph)], axis=1)
    return pts


def canonical_points(shape, n, rng):
    """``n`` surface points of a canonical shape, from a scrambled Halton sequence."""
    uv = qmc.Halton(d=2, scramble=True, seed=rng).random(n)
    u, v = uv[:, 0], uv[:, 1]
    if shape == "cylinder":
        return _sample_cylinder(u, v)
    if shape in _FACES:
        return _sample_faces(_FACES[shape], u, v)
    raise ValueError(f"unknown shape {shape!r}")


def surface_distance(shape, pts):
    """Distance from canonical-frame points to the canonical surface."""
    pts = np.asarray(pts, dtype=np.float64)
    if shape == "cylinder":
        rad = np.hypot(pts[:, 0], pts[:, 2])
        y = pts[:, 1]
        d_side = np.hypot(rad - 0.5, np.maximum(np.abs(y) - 0.5, 0.0))
        d_cap = np.hypot(np.abs(y) - 0.5, np.maximum(rad - 0.5, 0.0))
        return np.minimum(d_side, d_cap)
    best = np.full(len(pts), np.inf)
    for axis, c, fu, fv in _FACES[shape]:
        ou, ov = [a for a in range(3) if a != axis]
        du = np.maximum(np.maximum(fu[0] - pts[:, ou], pts[:, ou] - fu[1]), 0.0)
        dv = np.maximum(np.maximum(fv[0] - pts[:, ov], pts[:, ov] - fv[1]), 0.0)
        d = np.sqrt((pts[:, axis] - c) ** 2 + du ** 2 + dv ** 2)
        best = np.minimum(best, d)
    return best


# ---------------------------------------------------------------- sampling


def sample_rng(seed, cat_id, index):
    return np.random.default_rng([int(seed), int(cat_id), int(index)])


def sample_pose(rng, cfg: GenConfig, extents=(1.0, 1.0, 1.0)) -> Pose:
    """Uniform SO(3) rotation, uniform translation in the box, scaled extents."""
    R = quaternion_to_matrix(rng.standard_normal(4))
    lo = np.array([r[0] for r in cfg.translation_range])
    hi = np.array([r[1] for r in cfg.translation_range])
    t = lo + (hi - lo) * rng.random(3)
    k = rng.uniform(*cfg.scale_range)
    return Pose(R[:, 0], R[:, 1], t, np.asarray(extents, dtype=np.float64) * k)


def generate_sample(rng, cat: CategoryInfo, cfg: GenConfig) -> PoseSample:
    pose = sample_pose(rng, cfg, cat.extents)
    canon = canonical_points(cat.shape, cfg.n_points, rng)
    R = np.stack([pose.r_x, pose.r_y, np.cross(pose.r_x, pose.r_y)], axis=1)
    pts = (canon * pose.s) @ R.T + pose.t
    if cfg.noise_sigma > 0:
        pts = pts + rng.normal(0.0, cfg.noise_sigma, size=pts.shape)
    return PoseSample(pts, pose, cat.id, cat.symmetric)


def generate_split(cfg: GenConfig, split="train"):
    """All samples of one split, grouped by category then index.

    Test samples continue the index range after the training samples, so the
    two splits never share a generator stream.
    """
    if split == "train":
        start, count = 0, cfg.samples_per_category
    elif split == "test":
        start, count = cfg.samples_per_category, cfg.test_per_category
    else:
        raise ValueError(f"unknown split {split!r}")
    return [
        generate_sample(sample_rng(cfg.seed, cat.id, start + i), cat, cfg)
        for cat in cfg.categories
        for i in range(count)
    ]


def augment(sample: PoseSample, rng, cfg: GenConfig) -> PoseSample:
    """Random scaling, uniform point noise and a small rigid perturbation.

    Scaling by ``k`` acts about the point centroid ``c``; the labels follow as
    ``s -> k s`` and ``t -> c + k (t - c)``. The rigid perturbation rotates
    about the object center ``t`` and then shifts it.
    """
    pts = sample.points
    pose = sample.pose
    r_x, r_y, t, s = pose.r_x, pose.r_y, pose.t, pose.s
    if cfg.aug_scale:
        k = rng.uniform(*cfg.aug_scale_range)
        c = pts.mean(axis=0)
        pts = c + k * (pts - c)
        t = c + k * (t - c)
        s = s * k
    if cfg.aug_rigid:
        Rp = perturbation_rotation(rng, cfg.aug_rot_deg)
        dt = rng.uniform(-cfg.aug_trans, cfg.aug_trans, size=3)
        pts = (pts - t) @ Rp.T + t + dt
        r_x, r_y = Rp @ r_x, Rp @ r_y
        t = t + dt
    if cfg.aug_noise:
        pts = pts + rng.uniform(-cfg.aug_noise_mag, cfg.aug_noise_mag, size=pts.shape)
    if pts is sample.points:
        return sample
    return replace(sample, points=pts, pose=Pose(r_x, r_y, t, s))


def perturbation_rotation(rng, max_deg):
    axis = rng.standard_normal(3)
    angle = math.radians(max_deg) * rng.uniform(-1.0, 1.0)
    return axis_rotation(axis, angle)


# ---------------------------------------------------------------- IO


def sample_to_record(sample: PoseSample) -> dict:
    p = sample.pose
    return {
        "v": FORMAT_VERSION,
        "cat": int(sample.category),
        "sym": bool(sample.symmetric),
        "rx": p.r_x.tolist(),
        "ry": p.r_y.tolist(),
        "t": p.t.tolist(),
        "s": p.s.tolist(),
        "pts": sample.points.tolist(),
    }


def record_to_sample(rec: dict) -> PoseSample:
    pts = np.asarray(rec["pts"], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"pts must be N x 3, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("pts contains non-finite values")
    pose = Pose(rec["rx"], rec["ry"], rec["t"], rec["s"])
    return PoseSample(pts, pose, int(rec["cat"]), bool(rec["sym"]))


def write_dataset(samples, path):
    # json floats use the shortest repr that round-trips exactly
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path):
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(line_no, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetParseError(line_no, "record is not an object")
            if rec.get("v") != FORMAT_VERSION:
                raise DatasetVersionError(
                    f"line {line_no}: schema version {rec.get('v')!r}, expected {FORMAT_VERSION}"
                )
            try:
                samples.append(record_to_sample(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(line_no, f"bad record ({exc})") from None
    return samples
