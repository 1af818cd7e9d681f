"""Evaluation: pose precision, box IoU, embedding/pose correlation, CSV export.

Predictions are matched 1:1 with ground truth. Per-category values are
averaged with equal category weight to form the mean row, so every mean in a
report is the plain mean of its category rows (undefined entries skipped).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InvalidPoseError, ShapeError
from .geometry import (
    DEFAULT_CATEGORIES,
    Pose,
    box_corners,
    rotation_distance_matrix,
    rotation_error_deg,
    rotation_from_normals,
    translation_distance_matrix,
    translation_error_cm,
)

POSE_THRESHOLDS = ((5, 2), (5, 5), (10, 2), (10, 5))
IOU_THRESHOLDS = (0.50, 0.75)
BRANCHES = ("R", "t")

METRIC_COLUMNS = (
    [f"p_{n}deg_{m}cm" for n, m in POSE_THRESHOLDS]
    + [f"iou_{int(round(th * 100))}" for th in IOU_THRESHOLDS]
    + [f"pearson_{b}" for b in BRANCHES]
    + [f"spearman_{b}" for b in BRANCHES]
    + [f"rank_consistency_{b}" for b in BRANCHES]
)
CSV_HEADER = ["category", "name", "n"] + METRIC_COLUMNS


@dataclass
class EvalConfig:
    n_pairs: int = 20000
    n_triples: int = 20000
    mc_samples: int = 200000
    seed: int = 0

    def __post_init__(self):
        for k in ("n_pairs", "n_triples", "mc_samples"):
            if int(getattr(self, k)) < 1:
                raise ConfigError(f"eval.{k} must be >= 1")


@dataclass
class EvalReport:
    """Per-category metric rows plus the mean row.

    ``rows`` maps category id to ``{column: value}`` (value None when
    undefined); ``mean`` holds the equal-weight mean over categories.
    """

    rows: dict
    mean: dict
    counts: dict
    names: dict
    config: dict = field(default_factory=dict)

    def value(self, column, category=None):
        return self.mean[column] if category is None else self.rows[category][column]


# ------------------------------------------------------------------ helpers


def _check_aligned(preds, gts):
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth samples")


def _category_mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _by_category(flags, cats):
    cats = np.asarray(cats)
    return {int(c): float(np.mean(flags[cats == c])) for c in np.unique(cats)}


# ------------------------------------------------------------------ pose precision


def pose_errors(preds, gts, cat_table=DEFAULT_CATEGORIES):
    """Rotation error (deg) and translation error (cm) per aligned pair."""
    _check_aligned(preds, gts)
    rot = np.array([rotation_error_deg(p, g.pose, cat_table[g.category]) for p, g in zip(preds, gts)])
    tr = np.array([translation_error_cm(p, g.pose) for p, g in zip(preds, gts)])
    return rot, tr


def pose_precision(preds, gts, n_deg, m_cm, cat_table=DEFAULT_CATEGORIES, per_category=False):
    """Fraction with rotation error < n_deg and translation error < m_cm.

    Returns the mean over categories, or ``{category: fraction}`` when
    ``per_category`` is set.
    """
    rot, tr = pose_errors(preds, gts, cat_table)
    return _precision_from_errors(rot, tr, [g.category for g in gts], n_deg, m_cm, per_category)


def _precision_from_errors(rot, tr, cats, n_deg, m_cm, per_category=False):
    if len(cats) == 0:
        return {} if per_category else None
    ok = (rot < n_deg) & (tr < m_cm)
    per = _by_category(ok, cats)
    return per if per_category else _category_mean(per.values())


# ------------------------------------------------------------------ IoU


def box_iou(a: Pose, b: Pose, mc_samples=200000, seed=0) -> float:
    """Monte Carlo 3D IoU of two oriented boxes (extents ``s``, centre ``t``)."""
    for p in (a, b):
        if not np.all(np.asarray(p.s) > 0):
            raise InvalidPoseError(f"box has non-positive extents {p.s}")
    corners = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = lo + rng.random((int(mc_samples), 3)) * (hi - lo)
    inside = []
    for p in (a, b):
        R = rotation_from_normals(p.r_x, p.r_y)
        local = (pts - p.t) @ R
        inside.append(np.all(np.abs(local) <= np.asarray(p.s) / 2.0, axis=1))
    inter = np.count_nonzero(inside[0] & inside[1])
    union = np.count_nonzero(inside[0] | inside[1])
    return inter / union if union else 0.0


def pair_ious(preds, gts, mc_samples=200000, seed=0):
    """IoU per aligned pair; pair ``k`` uses seed ``[seed, k]``."""
    _check_aligned(preds, gts)
    return np.array([
        box_iou(p, g.pose, mc_samples, np.random.default_rng([seed, k]))
        for k, (p, g) in enumerate(zip(preds, gts))
    ])


def iou_precision(preds, gts, threshold, mc_samples=200000, seed=0, per_category=False):
    """Fraction of pairs with IoU >= threshold; mean over categories."""
    ious = pair_ious(preds, gts, mc_samples, seed)
    if len(ious) == 0:
        return {} if per_category else None
    per = _by_category(ious >= threshold, [g.category for g in gts])
    return per if per_category else _category_mean(per.values())


# ------------------------------------------------------------------ correlation


def pose_distance_matrices(poses, categories, cat_table=DEFAULT_CATEGORIES):
    sym = np.array([cat_table[c].symmetric for c in categories], dtype=bool)
    rx = np.stack([p.r_x for p in poses])
    ry = np.stack([p.r_y for p in poses])
    t = np.stack([p.t for p in poses])
    return {"R": rotation_distance_matrix(rx, ry, sym), "t": translation_distance_matrix(t)}


def _pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return max(-1.0, min(1.0, r))


def _spearman(x, y):
    return _pearson(rankdata(x), rankdata(y))


def _group_indices(categories, min_size):
    cats = np.asarray(categories)
    out = {}
    for c in np.unique(cats):
        idx = np.flatnonzero(cats == c)
        if len(idx) >= min_size:
            out[int(c)] = idx
    return out


@dataclass
class CorrelationStats:
    pearson: dict
    spearman: dict
    per_category: dict
    scatter: dict


def correlation_stats(embeddings, poses, categories, cat_table=DEFAULT_CATEGORIES, n_pairs=20000, seed=0):
    """Pearson and Spearman correlation of embedding vs pose distance per branch.

    ``embeddings`` maps branch ("R", "t") to an ``(N, D)`` array. ``n_pairs``
    within-category pairs are drawn (category chosen in proportion to its
    pair count). Coefficients are computed per category and averaged;
    undefined values (zero variance) are None. ``scatter[branch]`` is the
    ``(n_pairs, 2)`` array of (pose distance, embedding distance).
    """
    groups = _group_indices(categories, 2)
    if not groups:
        raise ShapeError("correlation needs a category with at least two samples")
    dpose = pose_distance_matrices(poses, categories, cat_table)
    rng = np.random.default_rng([seed, 0xC0])
    keys = sorted(groups)
    sizes = np.array([len(groups[c]) for c in keys])
    w = sizes * (sizes - 1)
    which = rng.choice(len(keys), size=n_pairs, p=w / w.sum())
    a = rng.random(n_pairs)
    b = rng.random(n_pairs)
    I = np.empty(n_pairs, dtype=np.int64)
    J = np.empty(n_pairs, dtype=np.int64)
    for g, c in enumerate(keys):
        sel = which == g
        nc = sizes[g]
        i = np.minimum((a[sel] * nc).astype(np.int64), nc - 1)
        j = np.minimum((b[sel] * (nc - 1)).astype(np.int64), nc - 2)
        j = j + (j >= i)
        I[sel], J[sel] = groups[c][i], groups[c][j]

    pearson, spearman, per_cat, scatter = {}, {}, {c: {} for c in keys}, {}
    for br, emb in embeddings.items():
        emb = np.asarray(emb, dtype=np.float64)
        de = np.linalg.norm(emb[I] - emb[J], axis=1)
        dp = dpose[br][I, J]
        scatter[br] = np.stack([dp, de], axis=1)
        for g, c in enumerate(keys):
            sel = which == g
            per_cat[c][f"pearson_{br}"] = _pearson(dp[sel], de[sel])
            per_cat[c][f"spearman_{br}"] = _spearman(dp[sel], de[sel])
        pearson[br] = _category_mean(per_cat[c][f"pearson_{br}"] for c in keys)
        spearman[br] = _category_mean(per_cat[c][f"spearman_{br}"] for c in keys)
    return CorrelationStats(pearson, spearman, per_cat, scatter)


def ranking_consistency(embeddings, poses, categories, cat_table=DEFAULT_CATEGORIES, branch="R",
                        n_triples=20000, seed=0):
    """Fraction of within-category triples whose embedding order matches the pose order.

    A triple ``(i, j, k)`` with distinct pose distances ``d(i, j) != d(i, k)``
    is consistent when the embedding distances order ``j`` and ``k`` the same
    way. Returns None if no category has three samples.
    """
    groups = _group_indices(categories, 3)
    if not groups:
        return None
    dpose = pose_distance_matrices(poses, categories, cat_table)[branch]
    emb = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng([seed, 0x3C])
    keys = sorted(groups)
    sizes = np.array([len(groups[c]) for c in keys])
    w = sizes * (sizes - 1) * (sizes - 2)
    got, hits = 0, 0
    for _ in range(64):
        m = 2 * (n_triples - got) + 16
        which = rng.choice(len(keys), size=m, p=w / w.sum())
        u = rng.random((m, 3))
        I, J, K = (np.empty(m, dtype=np.int64) for _ in range(3))
        for g, c in enumerate(keys):
            sel = which == g
            nc = sizes[g]
            # distinct (i, j, k) from three uniforms
            i = np.minimum((u[sel, 0] * nc).astype(np.int64), nc - 1)
            j = np.minimum((u[sel, 1] * (nc - 1)).astype(np.int64), nc - 2)
            j = j + (j >= i)
            k = np.minimum((u[sel, 2] * (nc - 2)).astype(np.int64), nc - 3)
            lo, hi = np.minimum(i, j), np.maximum(i, j)
            k = k + (k >= lo)
            k = k + (k >= hi)
            I[sel], J[sel], K[sel] = groups[c][i], groups[c][j], groups[c][k]
        dp = dpose[I, J] - dpose[I, K]
        keep = np.flatnonzero(dp != 0)[: n_triples - got]
        if len(keep):
            de = np.linalg.norm(emb[I[keep]] - emb[J[keep]], axis=1) - np.linalg.norm(emb[I[keep]] - emb[K[keep]], axis=1)
            hits += int(np.count_nonzero(np.sign(de) == np.sign(dp[keep])))
            got += len(keep)
        if got >= n_triples:
            break
    return hits / got if got else None


# ------------------------------------------------------------------ report


def build_report(preds, gts, embeddings, cat_table=DEFAULT_CATEGORIES, cfg: EvalConfig | None = None,
                 config_echo=None):
    """Assemble an EvalReport and the scatter data for aligned predictions."""
    cfg = cfg or EvalConfig()
    cats = [g.category for g in gts]
    rot, tr = pose_errors(preds, gts, cat_table)
    ious = pair_ious(preds, gts, cfg.mc_samples, cfg.seed)
    present = sorted({int(c) for c in cats})
    rows = {c: {} for c in present}
    for n, m in POSE_THRESHOLDS:
        per = _precision_from_errors(rot, tr, cats, n, m, per_category=True)
        for c in present:
            rows[c][f"p_{n}deg_{m}cm"] = per[c]
    for th in IOU_THRESHOLDS:
        per = _by_category(ious >= th, cats)
        for c in present:
            rows[c][f"iou_{int(round(th * 100))}"] = per[c]
    poses = [g.pose for g in gts]
    corr = correlation_stats(embeddings, poses, cats, cat_table, cfg.n_pairs, cfg.seed)
    cats_arr = np.asarray(cats)
    for c in present:
        for br in BRANCHES:
            vals = corr.per_category.get(c, {})
            rows[c][f"pearson_{br}"] = vals.get(f"pearson_{br}")
            rows[c][f"spearman_{br}"] = vals.get(f"spearman_{br}")
            idx = np.flatnonzero(cats_arr == c)
            rows[c][f"rank_consistency_{br}"] = ranking_consistency(
                np.asarray(embeddings[br])[idx], [poses[i] for i in idx], cats_arr[idx], cat_table,
                branch=br, n_triples=cfg.n_triples, seed=cfg.seed,
            )
    mean = {col: _category_mean(rows[c][col] for c in present) for col in METRIC_COLUMNS}
    counts = {c: int(np.count_nonzero(cats_arr == c)) for c in present}
    names = {c: cat_table[c].name for c in present}
    report = EvalReport(rows, mean, counts, names, dict(config_echo or {}))
    return report, corr.scatter


def _fmt(v):
    return "" if v is None else repr(float(v))


def export_report(report: EvalReport, scatter, prefix):
    """Write ``<prefix>_metrics.csv`` and ``<prefix>_scatter_{R,t}.csv``; returns the paths."""
    paths = [f"{prefix}_metrics.csv"] + [f"{prefix}_scatter_{br}.csv" for br in BRANCHES if br in scatter]
    try:
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for c, row in report.rows.items():
                w.writerow([c, report.names[c], report.counts[c]] + [_fmt(row[k]) for k in METRIC_COLUMNS])
            w.writerow(["mean", "mean", sum(report.counts.values())] + [_fmt(report.mean[k]) for k in METRIC_COLUMNS])
        for br, path in zip([b for b in BRANCHES if b in scatter], paths[1:]):
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["pose_distance", "embedding_distance"])
                for dp, de in scatter[br]:
                    w.writerow([repr(float(dp)), repr(float(de))])
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or prefix}: {exc.strerror}") from exc
    return paths


def read_metrics(path) -> EvalReport:
    """Parse a metrics CSV written by :func:`export_report`."""
    rows, counts, names, mean = {}, {}, {}, None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            vals = {k: (float(r[k]) if r[k] != "" else None) for k in METRIC_COLUMNS}
            if r["category"] == "mean":
                mean = vals
                continue
            c = int(r["category"])
            rows[c], counts[c], names[c] = vals, int(r["n"]), r["name"]
    if mean is None:
        raise ValueError(f"{path}: no mean row")
    return EvalReport(rows, mean, counts, names)


def comparison_table(reports, columns=("p_10deg_5cm", "p_10deg_2cm", "p_5deg_2cm", "iou_50", "pearson_R",
                                        "pearson_t", "rank_consistency_R", "rank_consistency_t")):
    """Rows ``[label] + mean values`` for a ``{label: EvalReport}`` mapping, plus the header."""
    header = ["run"] + list(columns)
    rows = [[label] + [rep.mean.get(c) for c in columns] for label, rep in reports.items()]
    return header, rows
