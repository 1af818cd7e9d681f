"""Pose-aware hierarchical ranking and the ranking contrastive losses.

For an anchor ``i`` and positive ``j`` of the same category, the
denominator sets are

* ``S_R(i, j)     = {k != i : dR[i, k] >= dR[i, j]}``
* ``S_t(i, j)     = {k != i : dt[i, k] >= dt[i, j]}``
* ``S_joint(i, j) = S_R(i, j) & S_t(i, j)``

restricted to ``k`` in the anchor's category. The positive itself always
belongs to every set, so each term is a proper log-softmax and all losses
are nonnegative. Similarity is the negative L2 distance between global
embeddings divided by ``tau``.

Each per-category loss averages over positives, then anchors; the batch
loss averages over the categories with at least two samples. The final
per-branch loss is ``joint + lambda * task``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import Tape
from .errors import ConfigError
from .geometry import rotation_distance_matrix, translation_distance_matrix

log = logging.getLogger(__name__)

BRANCHES = ("R", "t")


@dataclass
class CLConfig:
    tau: float = 2.0
    lam: float = 0.8
    off: bool = False
    disable_joint: bool = False
    joint_only: bool = False
    single_task: bool = False
    ignore_category: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("cl.tau must be positive")
        if self.lam < 0:
            raise ConfigError("cl.lambda must be nonnegative")
        if self.joint_only and self.disable_joint:
            raise ConfigError("cl.joint_only and cl.disable_joint are mutually exclusive")

    def term_weights(self):
        """(joint weight, task weight) in the per-branch loss."""
        if self.off:
            return 0.0, 0.0
        if self.joint_only:
            return 1.0, 0.0
        if self.disable_joint:
            return 0.0, self.lam
        return 1.0, self.lam


@dataclass
class DistanceMatrices:
    """Batch-wide pose distances and category grouping.

    ``dR`` and ``dt`` are full ``N x N`` matrices; only within-group entries
    are meaningful. ``group`` assigns each sample to a ranking group (its
    category, or 0 for all when categories are ignored).
    """

    dR: np.ndarray
    dt: np.ndarray
    categories: np.ndarray
    group: np.ndarray
    groups: dict
    excluded: list

    def per_category(self):
        """``{group: (batch indices, dR block, dt block)}`` for included groups."""
        out = {}
        for g, idx in self.groups.items():
            out[g] = (idx, self.dR[np.ix_(idx, idx)], self.dt[np.ix_(idx, idx)])
        return out

    @property
    def n(self):
        return len(self.categories)


@dataclass(frozen=True)
class NegativeSets:
    joint: frozenset
    R: frozenset
    t: frozenset


def distance_matrices(poses, categories, cat_table, ignore_category=False) -> DistanceMatrices:
    """Pose distance matrices for a batch. Groups with < 2 samples are excluded."""
    if len(poses) == 0:
        raise ValueError("empty batch")
    cats = np.asarray(categories, dtype=np.int64)
    sym = np.array([cat_table[c].symmetric for c in cats], dtype=bool)
    rx = np.stack([p.r_x for p in poses])
    ry = np.stack([p.r_y for p in poses])
    t = np.stack([p.t for p in poses])
    dR = rotation_distance_matrix(rx, ry, sym)
    dt = translation_distance_matrix(t)
    group = np.zeros_like(cats) if ignore_category else cats.copy()
    groups, excluded = {}, []
    for g in sorted(set(group.tolist())):
        idx = np.flatnonzero(group == g)
        if len(idx) >= 2:
            groups[g] = idx
        else:
            excluded.append(g)
    return DistanceMatrices(dR, dt, cats, group, groups, excluded)


def build_negative_sets(dm: DistanceMatrices, i, j) -> NegativeSets:
    if i == j:
        raise ValueError("anchor and positive must differ")
    if dm.group[i] != dm.group[j]:
        raise ValueError("anchor and positive must share a category")
    cand = [k for k in np.flatnonzero(dm.group == dm.group[i]) if k != i]
    S_R = frozenset(int(k) for k in cand if dm.dR[i, k] >= dm.dR[i, j])
    S_t = frozenset(int(k) for k in cand if dm.dt[i, k] >= dm.dt[i, j])
    S_joint = frozenset(
        int(k) for k in cand if dm.dR[i, k] >= dm.dR[i, j] and dm.dt[i, k] >= dm.dt[i, j]
    )
    return NegativeSets(S_joint, S_R, S_t)


def negative_masks(dm: DistanceMatrices):
    """Vectorized negative sets: boolean ``(N, N, N)`` arrays indexed ``[i, j, k]``.

    Returns ``{"joint", "R", "t"}`` masks; entries for pairs that are not
    (anchor, positive) pairs are all False.
    """
    n = dm.n
    same = dm.group[:, None] == dm.group[None, :]
    eye = np.eye(n, dtype=bool)
    included = np.isin(dm.group, list(dm.groups))
    pair = same & ~eye & included[:, None]
    cand = (same & ~eye)[:, None, :] & pair[:, :, None]
    R = cand & (dm.dR[:, None, :] >= dm.dR[:, :, None])
    t = cand & (dm.dt[:, None, :] >= dm.dt[:, :, None])
    return {"joint": R & t, "R": R, "t": t}


def pair_weights(dm: DistanceMatrices, only=None):
    """Averaging weight of each (anchor, positive) pair.

    ``1 / (C n_c (n_c - 1))`` over the C included groups, or
    ``1 / (n_c (n_c - 1))`` for the single group ``only``.
    """
    w = np.zeros((dm.n, dm.n))
    groups = dm.groups if only is None else {only: dm.groups[only]}
    if not groups:
        return w
    c = len(groups)
    for idx in groups.values():
        nc = len(idx)
        block = np.full((nc, nc), 1.0 / (c * nc * (nc - 1)))
        np.fill_diagonal(block, 0.0)
        w[np.ix_(idx, idx)] = block
    return w


# ------------------------------------------------------------------ graph


def mask_bindings(dm: DistanceMatrices, prefix="cl"):
    masks = negative_masks(dm)
    return {
        f"{prefix}.mask_joint": masks["joint"],
        f"{prefix}.mask_R": masks["R"],
        f"{prefix}.mask_t": masks["t"],
        f"{prefix}.weight": pair_weights(dm),
    }


def add_cl_terms(tape: Tape, features: dict, n, cfg: CLConfig, prefix="cl"):
    """Add the contrastive terms for each branch in ``features`` to ``tape``.

    Declares the mask and weight inputs (bind them with :func:`mask_bindings`).
    Returns ``{branch: {"joint": node, "task": node, "cl": node}}``; absent
    terms (zero weight) are None.
    """
    m_joint = tape.input(f"{prefix}.mask_joint", (n, n, n), const=True)
    m_task = {
        "R": tape.input(f"{prefix}.mask_R", (n, n, n), const=True),
        "t": tape.input(f"{prefix}.mask_t", (n, n, n), const=True),
    }
    weight = tape.input(f"{prefix}.weight", (n, n), const=True)
    wj, wt = cfg.term_weights()
    out = {}
    for g, feat in features.items():
        d2 = tape.pairwise_sqdist(feat, name=f"{prefix}.d2_{g}")
        joint_mask = m_task[g] if cfg.single_task else m_joint
        joint = tape.ranked_contrast(d2, joint_mask, weight, cfg.tau, name=f"{prefix}.joint_{g}")
        task = tape.ranked_contrast(d2, m_task[g], weight, cfg.tau, name=f"{prefix}.task_{g}")
        total = None
        if wj:
            total = joint if wj == 1.0 else tape.scale(joint, wj)
        if wt:
            wtask = tape.scale(task, wt)
            total = wtask if total is None else tape.add(total, wtask)
        out[g] = {"joint": joint, "task": task, "cl": total}
    return out


def _evaluate_terms(features, dm, cfg, weight=None):
    n = dm.n
    tape = Tape(np.float64)
    leaves = {g: tape.input(f"f_{g}", (n, np.shape(features[g])[1])) for g in features}
    terms = add_cl_terms(tape, leaves, n, cfg)
    bindings = {f"f_{g}": np.asarray(features[g], dtype=np.float64) for g in features}
    bindings.update(mask_bindings(dm))
    if weight is not None:
        bindings["cl.weight"] = weight
    wanted = [(g, k) for g in terms for k in ("joint", "task")]
    vals = tape.evaluate(bindings, [terms[g][k] for g, k in wanted])
    return {key: float(v) for key, v in zip(wanted, vals)}


def _warn_if_empty(dm):
    if not dm.groups:
        log.warning("no category has two or more samples; contrastive loss is 0")
        return True
    return False


def joint_loss(features, dm: DistanceMatrices, cfg: CLConfig):
    """Joint-ranking loss per branch, ``{"R": float, "t": float}``."""
    if _warn_if_empty(dm):
        return {g: 0.0 for g in features}
    vals = _evaluate_terms(features, dm, CLConfig(cfg.tau, cfg.lam, single_task=cfg.single_task))
    return {g: vals[(g, "joint")] for g in features}


def task_loss(features, dm: DistanceMatrices, cfg: CLConfig):
    """Per-task ranking loss per branch (``S_R`` for R, ``S_t`` for t)."""
    if _warn_if_empty(dm):
        return {g: 0.0 for g in features}
    vals = _evaluate_terms(features, dm, CLConfig(cfg.tau, cfg.lam))
    return {g: vals[(g, "task")] for g in features}


def cl_loss(features, dm: DistanceMatrices, cfg: CLConfig):
    """Final per-branch contrastive losses ``(L_R, L_t)`` under the config's toggles."""
    wj, wt = cfg.term_weights()
    if _warn_if_empty(dm) or (wj == 0 and wt == 0):
        return 0.0, 0.0
    vals = _evaluate_terms(features, dm, cfg)
    out = [wj * vals[(g, "joint")] + wt * vals[(g, "task")] for g in BRANCHES]
    return out[0], out[1]


def per_category_losses(features, dm: DistanceMatrices, cfg: CLConfig):
    """Unaveraged per-group terms ``{group: {(branch, "joint"|"task"): float}}``."""
    return {
        g: _evaluate_terms(features, dm, cfg, weight=pair_weights(dm, only=g))
        for g in dm.groups
    }
