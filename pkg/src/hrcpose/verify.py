"""Verification suites: brute-force loss oracle, RnC reduction, gradient check.

The oracle re-derives every loss from scalar pose distances and explicit
loops over (group, anchor, positive, negative); it shares no code with the
vectorized masks or the tape.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import hrcl
from .diffcore import finite_diff_check
from .encoder import ModelConfig, init_params
from .geometry import (
    DEFAULT_CATEGORIES,
    Pose,
    quaternion_to_matrix,
    rotation_distance,
    translation_distance,
)
from .synthdata import GenConfig, generate_sample, sample_rng
from .trainer import TrainingGraph

# ------------------------------------------------------------------ oracle


def _pair_rotation_distance(a, b, cat_a, cat_b):
    # axis-only distance only when both members are symmetric
    both = cat_a.symmetric and cat_b.symmetric
    return rotation_distance(a, b, dataclasses.replace(cat_a, symmetric=both))


def oracle_terms(features, poses, categories, cat_table=DEFAULT_CATEGORIES, cfg=None):
    """Brute-force joint and per-task terms.

    Returns ``{(branch, "joint"|"task"): value}`` with the joint term using the
    joint negative set (or the branch's own set under ``single_task``).
    """
    cfg = cfg or hrcl.CLConfig()
    groups = {}
    for i, c in enumerate(categories):
        groups.setdefault(0 if cfg.ignore_category else int(c), []).append(i)
    groups = {g: idx for g, idx in groups.items() if len(idx) >= 2}
    out = {(b, k): 0.0 for b in features for k in ("joint", "task")}
    if not groups:
        return out

    # scalar distances, each pair computed once
    members_all = [i for idx in groups.values() for i in idx]
    DR = {(i, k): _pair_rotation_distance(poses[i], poses[k], cat_table[categories[i]], cat_table[categories[k]])
          for i in members_all for k in members_all}
    DT = {(i, k): translation_distance(poses[i], poses[k]) for i in members_all for k in members_all}

    def dR(i, k):
        return DR[(i, k)]

    def dt(i, k):
        return DT[(i, k)]

    def emb(f, i, k):
        return math.sqrt(sum((float(f[i][c]) - float(f[k][c])) ** 2 for c in range(len(f[i]))))

    C = len(groups)
    for branch, f in features.items():
        task_d = dR if branch == "R" else dt
        for members in groups.values():
            nc = len(members)
            for i in members:
                for j in members:
                    if j == i:
                        continue
                    sets = {"joint": [], "task": []}
                    for k in members:
                        if k == i:
                            continue
                        in_R = dR(i, k) >= dR(i, j)
                        in_t = dt(i, k) >= dt(i, j)
                        in_task = task_d(i, k) >= task_d(i, j)
                        if (in_task if cfg.single_task else (in_R and in_t)):
                            sets["joint"].append(k)
                        if in_task:
                            sets["task"].append(k)
                    for kind, S in sets.items():
                        denom = sum(math.exp(-emb(f, i, k) / cfg.tau) for k in S)
                        term = emb(f, i, j) / cfg.tau + math.log(denom)
                        out[(branch, kind)] += term / (C * nc * (nc - 1))
    return out


def oracle_cl_loss(features, poses, categories, cat_table=DEFAULT_CATEGORIES, cfg=None):
    cfg = cfg or hrcl.CLConfig()
    wj, wt = cfg.term_weights()
    terms = oracle_terms(features, poses, categories, cat_table, cfg)
    return tuple(wj * terms[(b, "joint")] + wt * terms[(b, "task")] for b in hrcl.BRANCHES)


def rnc_loss(features, labels_dist, tau):
    """Rank-N-Contrast loss with a precomputed label-distance matrix.

    Follows the reference formulation: logits are negative L2 distances over
    temperature (row-max shifted), and for each anchor/positive the
    denominator runs over samples whose label distance is at least the
    positive's.
    """
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    diff = f[:, None, :] - f[None, :, :]
    logits = -np.sqrt((diff ** 2).sum(-1)) / tau
    logits = logits - logits.max(axis=1, keepdims=True)
    exp_logits = np.exp(logits)
    off = ~np.eye(n, dtype=bool)
    logits = logits[off].reshape(n, n - 1)
    exp_logits = exp_logits[off].reshape(n, n - 1)
    label_diffs = np.asarray(labels_dist, dtype=np.float64)[off].reshape(n, n - 1)
    loss = 0.0
    for k in range(n - 1):
        pos_logits = logits[:, k]
        neg_mask = (label_diffs >= label_diffs[:, k:k + 1]).astype(np.float64)
        pos_log_probs = pos_logits - np.log((neg_mask * exp_logits).sum(axis=-1))
        loss += -(pos_log_probs / (n * (n - 1))).sum()
    return float(loss)


# ------------------------------------------------------------------ random batches


def random_pose(rng, extents=(0.1, 0.1, 0.1)):
    R = quaternion_to_matrix(rng.normal(size=4))
    t = rng.uniform(-0.3, 0.3, size=3)
    s = np.asarray(extents) * rng.uniform(0.8, 1.2)
    return Pose.from_matrix(R, t, s)


def random_batch(rng, max_size=8, n_categories=(2, 3), dim=6, cat_table=DEFAULT_CATEGORIES):
    """Random (features, poses, categories) with 2 or 3 categories present.

    At least one category has two samples; others may be singletons, which
    the losses must exclude.
    """
    n_cat = int(rng.integers(n_categories[0], n_categories[1] + 1))
    n = int(rng.integers(n_cat + 1, max_size + 1))
    cats = list(rng.permutation(len(cat_table))[:n_cat])
    cats += [int(rng.choice(cats)) for _ in range(n - n_cat)]
    cats = [int(c) for c in rng.permutation(cats)]
    poses = [random_pose(rng, cat_table[c].extents) for c in cats]
    feats = {b: rng.normal(size=(n, dim)) for b in hrcl.BRANCHES}
    return feats, poses, cats


ORACLE_VARIANTS = (
    hrcl.CLConfig(),
    hrcl.CLConfig(joint_only=True),
    hrcl.CLConfig(disable_joint=True),
    hrcl.CLConfig(single_task=True),
    hrcl.CLConfig(ignore_category=True),
    hrcl.CLConfig(tau=0.5, lam=0.3),
)


@dataclass
class OracleResult:
    max_abs_diff: float
    n_batches: int
    n_comparisons: int
    worst: tuple = ()


def oracle_check(n_batches=100, seed=0, max_size=8, variants=ORACLE_VARIANTS, cat_table=DEFAULT_CATEGORIES):
    """Compare joint_loss, task_loss and cl_loss with the brute-force oracle."""
    rng = np.random.default_rng([seed, 0x0A])
    worst, max_diff, count = (), 0.0, 0
    for b in range(n_batches):
        feats, poses, cats = random_batch(rng, max_size, cat_table=cat_table)
        cfg = variants[b % len(variants)]
        dm = hrcl.distance_matrices(poses, cats, cat_table, cfg.ignore_category)
        terms = oracle_terms(feats, poses, cats, cat_table, cfg)
        plain = oracle_terms(feats, poses, cats, cat_table, dataclasses.replace(cfg, single_task=False))
        got = {}
        jl = hrcl.joint_loss(feats, dm, cfg)
        tl = hrcl.task_loss(feats, dm, cfg)
        cl = hrcl.cl_loss(feats, dm, cfg)
        wj, wt = cfg.term_weights()
        for i, br in enumerate(hrcl.BRANCHES):
            got[("joint", br)] = (jl[br], terms[(br, "joint")])
            got[("task", br)] = (tl[br], plain[(br, "task")])
            got[("cl", br)] = (cl[i], wj * terms[(br, "joint")] + wt * terms[(br, "task")])
        for key, (a, o) in got.items():
            d = abs(a - o)
            count += 1
            if d > max_diff or not math.isfinite(d):
                max_diff, worst = (d if math.isfinite(d) else math.inf), (b, key, a, o)
    return OracleResult(max_diff, n_batches, count, worst)


def rnc_check(n_batches=50, seed=0, max_size=8, tau=2.0, cat_table=DEFAULT_CATEGORIES):
    """Single-category task_loss against the RnC loss; returns the max |difference|."""
    rng = np.random.default_rng([seed, 0x4C])
    max_diff = 0.0
    cfg = hrcl.CLConfig(tau=tau)
    for _ in range(n_batches):
        c = int(rng.integers(len(cat_table)))
        n = int(rng.integers(2, max_size + 1))
        poses = [random_pose(rng, cat_table[c].extents) for _ in range(n)]
        feats = {b: rng.normal(size=(n, 6)) for b in hrcl.BRANCHES}
        dm = hrcl.distance_matrices(poses, [c] * n, cat_table)
        got = hrcl.task_loss(feats, dm, cfg)
        for br, labels in (("R", dm.dR), ("t", dm.dt)):
            max_diff = max(max_diff, abs(got[br] - rnc_loss(feats[br], labels, tau)))
    return max_diff


# ------------------------------------------------------------------ gradient check

GRAD_CHECK_MODEL = ModelConfig(n_points=32, dim=16, widths=(8, 16), head_hidden=8)


def grad_check(n_coords=120, step=1e-5, seed=0, batch=6, model_cfg=GRAD_CHECK_MODEL, cl_cfg=None):
    """Finite-difference check of the full float64 training graph.

    Covers both encoders, all heads, the contrastive losses and the basic
    pose loss. Biases are jittered away from their zero init so the check
    runs at a point where the graph is differentiable. Returns the diffcore
    FDResult.
    """
    cl_cfg = cl_cfg or hrcl.CLConfig()
    gen = GenConfig(seed=seed, n_points=model_cfg.n_points)
    samples = []
    for i in range(batch):
        cat = gen.categories[i % 2]
        samples.append(generate_sample(sample_rng(seed, cat.id, i), cat, gen))
    graph = TrainingGraph(model_cfg, cl_cfg, 1.0, batch, dtype=np.float64)
    params = init_params(seed, model_cfg, dtype=np.float64)
    # zero biases put every fully dead unit exactly on a relu kink, where
    # central differences disagree with any subgradient; move off it
    brng = np.random.default_rng([seed, 0xB1])
    for name, arr in params.arrays.items():
        if arr.ndim == 1:
            arr += brng.uniform(-0.05, 0.05, size=arr.shape)
    bindings = graph.bindings(params.arrays, samples)
    return finite_diff_check(graph.tape, graph.total, bindings, n_coords=n_coords, step=step, seed=seed)
