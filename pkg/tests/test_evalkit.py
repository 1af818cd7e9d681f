import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_pose
from hrcpose.errors import InvalidPoseError, ShapeError
from hrcpose.evalkit import (
    CSV_HEADER,
    METRIC_COLUMNS,
    EvalConfig,
    box_iou,
    build_report,
    comparison_table,
    correlation_stats,
    export_report,
    iou_precision,
    pose_errors,
    pose_precision,
    ranking_consistency,
    read_metrics,
)
from hrcpose.evalkit import _pearson, _spearman
from hrcpose.geometry import DEFAULT_CATEGORIES, Pose, axis_rotation
from hrcpose.synthdata import PoseSample

BRACKET = 1


def sample(pose, cat=BRACKET):
    return PoseSample(np.zeros((1, 3)), pose, cat, DEFAULT_CATEGORIES[cat].symmetric)


def box(t=(0, 0, 0), s=(1, 1, 1), R=np.eye(3)):
    return Pose.from_matrix(R, t, s)


def coords(poses):
    return np.stack([np.concatenate([p.r_x, p.r_y]) for p in poses])


# ---------------------------------------------------------------- precision


def test_exact_predictions_full_precision(rng):
    gts = [sample(make_pose(rng), c % 3) for c in range(12)]
    preds = [g.pose for g in gts]
    for n, m in ((5, 2), (5, 5), (10, 2), (10, 5)):
        assert pose_precision(preds, gts, n, m) == 1.0
    assert iou_precision(preds, gts, 0.5, mc_samples=20000) == 1.0
    assert iou_precision(preds, gts, 0.75, mc_samples=20000) == 1.0


def test_threshold_semantics():
    gt = box()
    pred = Pose.from_matrix(axis_rotation([0, 0, 1], math.radians(6)), (0.01, 0, 0), (1, 1, 1))
    rot, tr = pose_errors([pred], [sample(gt)])
    assert rot[0] == pytest.approx(6.0) and tr[0] == pytest.approx(1.0)
    assert pose_precision([pred], [sample(gt)], 10, 2) == 1.0
    assert pose_precision([pred], [sample(gt)], 5, 2) == 0.0


def test_symmetric_spin_passes():
    gt = Pose.from_matrix(axis_rotation([1, 1, 0], 0.4), (0, 0, 0), (0.1, 0.2, 0.1))
    pred = Pose.from_matrix(gt.rotation @ axis_rotation([0, 1, 0], 2.0), gt.t, gt.s)
    assert pose_precision([pred], [sample(gt, 0)], 0.001, 0.001) == 1.0
    assert pose_precision([pred], [sample(gt, 1)], 5, 2) == 0.0


def test_length_mismatch():
    with pytest.raises(ShapeError):
        pose_precision([box()], [], 5, 2)
    with pytest.raises(ShapeError):
        iou_precision([box()], [sample(box()), sample(box())], 0.5)


def test_precision_is_category_mean():
    gt = box()
    off = box(t=(0.5, 0, 0))
    gts = [sample(gt, 1), sample(gt, 1), sample(gt, 1), sample(gt, 2)]
    preds = [gt, off, off, gt]
    per = pose_precision(preds, gts, 5, 2, per_category=True)
    assert per == {1: pytest.approx(1 / 3), 2: 1.0}
    assert pose_precision(preds, gts, 5, 2) == pytest.approx((1 / 3 + 1) / 2)


@given(st.integers(0, 10000))
def test_precision_monotone(seed):
    rng = np.random.default_rng(seed)
    gts = [sample(make_pose(rng)) for _ in range(20)]
    preds = []
    for g in gts:
        R = g.pose.rotation @ axis_rotation(rng.normal(size=3), math.radians(rng.uniform(0, 15)))
        preds.append(Pose.from_matrix(R, g.pose.t + rng.normal(size=3) * 0.03, g.pose.s))
    p = {(n, m): pose_precision(preds, gts, n, m) for n in (5, 10) for m in (2, 5)}
    assert p[(10, 5)] >= p[(10, 2)] >= p[(5, 2)]
    assert p[(10, 5)] >= p[(5, 5)] >= p[(5, 2)]


# ---------------------------------------------------------------- IoU


def test_identical_boxes():
    assert box_iou(box(), box()) == pytest.approx(1.0, abs=0.01)


def test_disjoint_boxes():
    assert box_iou(box(), box(t=(2.5, 0, 0))) == 0.0


def test_half_shift_is_one_third():
    assert box_iou(box(), box(t=(0.5, 0, 0))) == pytest.approx(1 / 3, abs=0.01)


def test_iou_standard_error_at_default():
    vals = [box_iou(box(), box(t=(0.5, 0, 0)), seed=s) for s in range(20)]
    assert np.std(vals) <= 0.005
    assert box_iou(box(), box(t=(0.5, 0, 0)), seed=3) == box_iou(box(), box(t=(0.5, 0, 0)), seed=3)


def test_zero_volume_rejected():
    with pytest.raises(InvalidPoseError):
        box_iou(box(), Pose((1, 0, 0), (0, 1, 0), (0, 0, 0), (1, 0, 1)))


def test_iou_symmetric_and_rigid_invariant(rng):
    a = make_pose(rng, (0.2, 0.1, 0.15))
    b = Pose.from_matrix(a.rotation @ axis_rotation([0, 1, 0], 0.3), a.t + 0.03, a.s)
    base = box_iou(a, b, 100000)
    assert box_iou(b, a, 100000) == pytest.approx(base, abs=0.01)
    G = axis_rotation([1, -2, 0.5], 1.1)
    shift = np.array([0.3, -0.1, 0.2])
    ga = Pose.from_matrix(G @ a.rotation, G @ a.t + shift, a.s)
    gb = Pose.from_matrix(G @ b.rotation, G @ b.t + shift, b.s)
    assert box_iou(ga, gb, 100000) == pytest.approx(base, abs=0.01)


def test_iou_precision_mixed_cases():
    gts = [sample(box())] * 4
    preds = [box(), box(t=(0.1, 0, 0)), box(t=(0.5, 0, 0)), box(t=(3, 0, 0))]
    ious = [box_iou(p, g.pose) for p, g in zip(preds, gts)]
    assert sum(v >= 0.5 for v in ious) == 2
    assert iou_precision(preds, gts, 0.5, mc_samples=50000) == 0.5
    assert iou_precision([box(t=(3, 0, 0))] * 4, gts, 0.5) == 0.0


# ---------------------------------------------------------------- correlation


def group_data(rng, n=30, cats=(1,)):
    poses = [make_pose(rng) for _ in range(n * len(cats))]
    categories = [c for c in cats for _ in range(n)]
    return poses, categories


def test_pearson_exact_linear_relation(rng):
    dp = rng.uniform(0, 4, 200)
    assert _pearson(dp, 2.0 * dp) == pytest.approx(1.0, abs=1e-12)
    assert _spearman(dp, 2.0 * dp) == 1.0


def test_spearman_anti_monotone(rng):
    dp = rng.uniform(0, 4, 200)
    assert _spearman(dp, np.exp(-dp)) == pytest.approx(-1.0, abs=1e-12)
    assert _pearson(dp, -3.0 * dp + 1.0) == pytest.approx(-1.0, abs=1e-12)


def test_zero_variance_is_none():
    assert _pearson(np.ones(5), np.arange(5.0)) is None
    assert _spearman(np.arange(5.0), np.full(5, 2.0)) is None
    assert _pearson([1.0], [2.0]) is None


def test_monotone_embedding_spearman_one(rng):
    # embedding = translation, so embedding distance = sqrt(3 * pose distance)
    n = 25
    poses = [Pose.from_matrix(np.eye(3), rng.uniform(-1, 1, 3), (0.1, 0.1, 0.1)) for _ in range(n)]
    t = np.stack([p.t for p in poses])
    stats = correlation_stats({"t": t}, poses, [1] * n, n_pairs=3000)
    sc = stats.scatter["t"]
    assert np.allclose(sc[:, 1], np.sqrt(3 * sc[:, 0]), rtol=1e-12)
    assert stats.spearman["t"] == pytest.approx(1.0, abs=1e-12)
    assert np.corrcoef(np.sqrt(sc[:, 0]), sc[:, 1])[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_constant_embedding_is_undefined(rng):
    poses, cats = group_data(rng, 10)
    stats = correlation_stats({"R": np.ones((10, 4))}, poses, cats, n_pairs=200)
    assert stats.pearson["R"] is None and stats.spearman["R"] is None


def test_correlation_affine_invariance(rng):
    poses, cats = group_data(rng, 20, (1, 2))
    emb = rng.normal(size=(40, 8))
    a = correlation_stats({"R": emb, "t": emb}, poses, cats, n_pairs=1000, seed=4)
    b = correlation_stats({"R": 3.5 * emb + 2.0, "t": 3.5 * emb - 7.0}, poses, cats, n_pairs=1000, seed=4)
    for br in ("R", "t"):
        assert b.pearson[br] == pytest.approx(a.pearson[br], abs=1e-12)
        assert b.spearman[br] == a.spearman[br]


def test_correlation_pairs_within_category(rng):
    poses, cats = group_data(rng, 5, (0, 1, 2))
    emb = rng.normal(size=(15, 4))
    stats = correlation_stats({"R": emb}, poses, cats, n_pairs=777, seed=1)
    assert stats.scatter["R"].shape == (777, 2)
    assert set(stats.per_category) == {0, 1, 2}
    vals = [stats.per_category[c]["pearson_R"] for c in (0, 1, 2)]
    assert stats.pearson["R"] == pytest.approx(np.mean(vals))
    for br in ("R",):
        assert -1.0 <= stats.pearson[br] <= 1.0


def test_correlation_needs_a_pair(rng):
    with pytest.raises(ShapeError):
        correlation_stats({"R": np.zeros((3, 2))}, [make_pose(rng) for _ in range(3)], [0, 1, 2])


def test_correlation_deterministic(rng):
    poses, cats = group_data(rng, 12)
    emb = rng.normal(size=(12, 3))
    a = correlation_stats({"R": emb}, poses, cats, n_pairs=300, seed=9)
    b = correlation_stats({"R": emb}, poses, cats, n_pairs=300, seed=9)
    assert np.array_equal(a.scatter["R"], b.scatter["R"]) and a.pearson == b.pearson


# ---------------------------------------------------------------- ranking consistency


def test_ranking_consistency_generating_coordinates(rng):
    poses, cats = group_data(rng, 25)
    assert ranking_consistency(coords(poses), poses, cats, branch="R", n_triples=5000) == 1.0
    t = np.stack([p.t for p in poses])
    assert ranking_consistency(t, poses, cats, branch="t", n_triples=5000) == 1.0


def test_ranking_consistency_random_null():
    # fresh random poses and embeddings per draw, so triples are close to independent
    rng = np.random.default_rng(0)
    poses = [make_pose(rng) for _ in range(400)]
    emb = rng.normal(size=(400, 16))
    v = ranking_consistency(emb, poses, [1] * 400, branch="R", n_triples=20000)
    assert v == pytest.approx(0.5, abs=0.05)


def test_ranking_consistency_anti_monotone(rng):
    # three samples on a line, embedded so every anchor's order is reversed
    poses = [Pose.from_matrix(np.eye(3), (v, 0, 0), (0.1, 0.1, 0.1)) for v in (0.0, 0.1, 0.3)]
    # pose distances order the pairs d01 < d12 < d02; place embeddings with
    # e01 = 3 > e12 = 2 > e02 = 1.5 so every anchor sees the reverse order
    x = (1.5 ** 2 - 2.0 ** 2 + 9.0) / 6.0
    emb = np.array([[0.0, 0.0], [3.0, 0.0], [x, math.sqrt(1.5 ** 2 - x * x)]])
    assert ranking_consistency(emb, poses, [1, 1, 1], branch="t", n_triples=600) == 0.0


def test_ranking_consistency_needs_three(rng):
    assert ranking_consistency(np.zeros((2, 2)), [make_pose(rng), make_pose(rng)], [1, 1]) is None


# ---------------------------------------------------------------- report


@pytest.fixture
def report_inputs(rng):
    gts, preds = [], []
    for c in range(3):
        for _ in range(8):
            p = make_pose(rng, DEFAULT_CATEGORIES[c].extents)
            gts.append(sample(p, c))
            preds.append(Pose.from_matrix(p.rotation @ axis_rotation(rng.normal(size=3), 0.1),
                                          p.t + rng.normal(size=3) * 0.01, p.s))
    emb = {"R": rng.normal(size=(24, 5)), "t": rng.normal(size=(24, 5))}
    return preds, gts, emb


def test_report_round_trip(report_inputs, tmp_path):
    preds, gts, emb = report_inputs
    cfg = EvalConfig(n_pairs=500, n_triples=500, mc_samples=5000)
    rep, scatter = build_report(preds, gts, emb, cfg=cfg)
    paths = export_report(rep, scatter, tmp_path / "run")
    assert [p.split("/")[-1] for p in map(str, paths)] == ["run_metrics.csv", "run_scatter_R.csv", "run_scatter_t.csv"]
    back = read_metrics(paths[0])
    for c in rep.rows:
        for col in METRIC_COLUMNS:
            a, b = rep.rows[c][col], back.rows[c][col]
            assert (a is None and b is None) or abs(a - b) <= 1e-9
    for col in METRIC_COLUMNS:
        vals = [back.rows[c][col] for c in back.rows if back.rows[c][col] is not None]
        assert back.mean[col] == pytest.approx(np.mean(vals), abs=1e-9)
        if col.startswith(("p_", "iou")):
            assert 0.0 <= back.mean[col] <= 1.0
    with open(paths[1]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["pose_distance", "embedding_distance"] and len(rows) == 501
    with open(paths[0]) as fh:
        header = next(csv.reader(fh))
    assert header == CSV_HEADER
    assert back.counts == {0: 8, 1: 8, 2: 8} and back.names[0] == "can"


def test_report_deterministic(report_inputs):
    preds, gts, emb = report_inputs
    cfg = EvalConfig(n_pairs=300, n_triples=300, mc_samples=2000, seed=5)
    a, sa = build_report(preds, gts, emb, cfg=cfg)
    b, sb = build_report(preds, gts, emb, cfg=cfg)
    assert a.rows == b.rows and np.array_equal(sa["R"], sb["R"])


def test_undefined_marker_written_empty(report_inputs, tmp_path):
    preds, gts, emb = report_inputs
    emb = {"R": np.ones((24, 3)), "t": emb["t"]}
    rep, sc = build_report(preds, gts, emb, cfg=EvalConfig(n_pairs=100, n_triples=100, mc_samples=1000))
    assert rep.mean["pearson_R"] is None
    path = export_report(rep, sc, tmp_path / "u")[0]
    back = read_metrics(path)
    assert back.mean["pearson_R"] is None and back.mean["pearson_t"] is not None


def test_export_error_names_path(report_inputs, tmp_path):
    preds, gts, emb = report_inputs
    rep, sc = build_report(preds, gts, emb, cfg=EvalConfig(n_pairs=50, n_triples=50, mc_samples=500))
    with pytest.raises(OSError, match="missing"):
        export_report(rep, sc, tmp_path / "missing" / "x")


def test_comparison_table(report_inputs):
    preds, gts, emb = report_inputs
    rep, _ = build_report(preds, gts, emb, cfg=EvalConfig(n_pairs=50, n_triples=50, mc_samples=500))
    header, rows = comparison_table({"a": rep, "b": rep})
    assert header[0] == "run" and [r[0] for r in rows] == ["a", "b"] and rows[0][1:] == rows[1][1:]


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(n_pairs=0)
