import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrcpose.errors import DatasetParseError, DatasetVersionError
from hrcpose.geometry import DEFAULT_CATEGORIES, Pose, rotation_error_deg
from hrcpose.synthdata import (
    GenConfig,
    PoseSample,
    augment,
    canonical_points,
    generate_sample,
    generate_split,
    perturbation_rotation,
    read_dataset,
    sample_pose,
    sample_rng,
    surface_distance,
    write_dataset,
)

SHAPES = {c.shape: c for c in DEFAULT_CATEGORIES}
QUIET = GenConfig(noise_sigma=0.0)
NO_AUG = dict(aug_noise=False, aug_scale=False, aug_rigid=False)


def canon_frame(sample):
    p = sample.pose
    return ((sample.points - p.t) @ p.rotation) / p.s


def test_sample_pose_deterministic():
    a = sample_pose(np.random.default_rng(5), GenConfig())
    b = sample_pose(np.random.default_rng(5), GenConfig())
    for f in ("r_x", "r_y", "t", "s"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    a.validate()


def test_sample_pose_rotation_uniformity():
    rng = np.random.default_rng(0)
    ry = np.stack([sample_pose(rng, GenConfig()).r_y for _ in range(10000)])
    assert np.linalg.norm(ry.mean(axis=0)) < 0.05


def test_translation_and_scale_ranges():
    cfg = GenConfig(translation_range=((-0.1, 0.2), (0.0, 0.05), (-0.3, -0.2)), scale_range=(0.9, 1.1))
    rng = np.random.default_rng(1)
    for _ in range(500):
        p = sample_pose(rng, cfg, (1.0, 2.0, 3.0))
        for k, (lo, hi) in enumerate(cfg.translation_range):
            assert lo <= p.t[k] <= hi
        assert 0.9 - 1e-12 <= p.s[0] <= 1.1 + 1e-12
        assert np.allclose(p.s / p.s[0], [1, 2, 3])


@pytest.mark.parametrize("shape", sorted(SHAPES))
def test_identity_pose_points_on_surface(shape):
    pts = canonical_points(shape, 512, np.random.default_rng(0))
    assert pts.shape == (512, 3)
    assert np.max(surface_distance(shape, pts)) < 1e-12
    assert np.all(np.abs(pts) <= 0.5 + 1e-12)


@pytest.mark.parametrize("cat", DEFAULT_CATEGORIES, ids=lambda c: c.name)
def test_label_consistency(cat):
    for i in range(20):
        s = generate_sample(sample_rng(3, cat.id, i), cat, QUIET)
        assert s.points.shape == (256, 3)
        assert np.max(surface_distance(cat.shape, canon_frame(s))) < 1e-6


def test_cylinder_centroid_near_center():
    # brute-force centroid offset of the canonical cylinder surface
    dense = canonical_points("cylinder", 200000, np.random.default_rng(0))
    assert np.linalg.norm(dense.mean(axis=0)) < 1e-3
    can = DEFAULT_CATEGORIES[0]
    for i in range(20):
        s = generate_sample(sample_rng(0, 0, i), can, QUIET)
        assert np.linalg.norm(s.points.mean(axis=0) - s.pose.t) < 0.01 * np.linalg.norm(s.pose.s)


def test_different_seeds_differ():
    cat = DEFAULT_CATEGORIES[1]
    a = generate_sample(sample_rng(0, 1, 0), cat, GenConfig())
    b = generate_sample(sample_rng(1, 1, 0), cat, GenConfig())
    assert not np.allclose(a.points, b.points)


def test_single_sample_regeneration_matches_split():
    cfg = GenConfig(seed=9, samples_per_category=5, test_per_category=3, n_points=16)
    train = generate_split(cfg, "train")
    test = generate_split(cfg, "test")
    assert len(train) == 15 and len(test) == 9
    assert [s.category for s in train] == [0] * 5 + [1] * 5 + [2] * 5
    again = generate_sample(sample_rng(9, 2, 3), DEFAULT_CATEGORIES[2], cfg)
    assert np.array_equal(again.points, train[13].points)
    # test indices continue after the training range
    assert np.array_equal(generate_sample(sample_rng(9, 0, 5), DEFAULT_CATEGORIES[0], cfg).points, test[0].points)


def test_noise_level():
    cat = DEFAULT_CATEGORIES[1]
    cfg = GenConfig(noise_sigma=0.002, n_points=4096)
    s = generate_sample(sample_rng(0, 1, 0), cat, cfg)
    clean = generate_sample(sample_rng(0, 1, 0), cat, GenConfig(noise_sigma=0.0, n_points=4096))
    assert np.std(s.points - clean.points) == pytest.approx(0.002, rel=0.05)


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(n_points=4)
    with pytest.raises(ValueError):
        GenConfig(noise_sigma=-1)
    with pytest.raises(ValueError):
        GenConfig(scale_range=(1.2, 0.8))


# ---------------------------------------------------------------- augmentation


def test_augment_all_off_is_identity():
    s = generate_sample(sample_rng(0, 1, 0), DEFAULT_CATEGORIES[1], GenConfig())
    assert augment(s, np.random.default_rng(0), GenConfig(**NO_AUG)) is s


def test_augment_scaling_about_centroid():
    s = generate_sample(sample_rng(0, 1, 0), DEFAULT_CATEGORIES[1], QUIET)
    cfg = GenConfig(aug_noise=False, aug_rigid=False, aug_scale_range=(1.07, 1.07))
    out = augment(s, np.random.default_rng(0), cfg)
    c = s.points.mean(axis=0)
    assert np.allclose(out.points, c + 1.07 * (s.points - c))
    assert np.allclose(out.pose.s, 1.07 * s.pose.s)
    assert np.max(surface_distance("lprism", canon_frame(out))) < 1e-6


@given(st.integers(0, 10000))
def test_augment_labels_stay_consistent(seed):
    cat = DEFAULT_CATEGORIES[seed % 3]
    s = generate_sample(sample_rng(0, cat.id, seed), cat, GenConfig(noise_sigma=0.0, n_points=32))
    out = augment(s, np.random.default_rng(seed), GenConfig(aug_noise=False))
    out.pose.validate()
    assert np.max(surface_distance(cat.shape, canon_frame(out))) < 1e-6


def test_rigid_perturbation_composition():
    rng = np.random.default_rng(7)
    s = generate_sample(sample_rng(0, 2, 0), DEFAULT_CATEGORIES[2], QUIET)
    cfg = GenConfig(aug_noise=False, aug_scale=False)
    out = augment(s, rng, cfg)
    # recover the perturbation from the two label rotations and undo it
    Rp = out.pose.rotation @ s.pose.rotation.T
    assert np.degrees(np.arccos(np.clip((np.trace(Rp) - 1) / 2, -1, 1))) <= 5.0 + 1e-9
    undone = Pose.from_matrix(Rp.T @ out.pose.rotation, s.pose.t, s.pose.s)
    assert rotation_error_deg(undone, s.pose, DEFAULT_CATEGORIES[2]) < 1e-6
    assert np.all(np.abs(out.pose.t - s.pose.t) <= 0.02 + 1e-12)


def test_perturbation_rotation_bound():
    rng = np.random.default_rng(0)
    for _ in range(200):
        R = perturbation_rotation(rng, 5.0)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))) <= 5.0 + 1e-9


# ---------------------------------------------------------------- IO


def test_round_trip(tmp_path):
    cfg = GenConfig(samples_per_category=4, n_points=16)
    samples = generate_split(cfg)[:10]
    path = tmp_path / "d.jsonl"
    write_dataset(samples, path)
    back = read_dataset(path)
    assert len(back) == 10
    for a, b in zip(samples, back):
        assert np.max(np.abs(a.points - b.points)) <= 1e-7
        for f in ("r_x", "r_y", "t", "s"):
            assert np.max(np.abs(getattr(a.pose, f) - getattr(b.pose, f))) <= 1e-7
        assert (a.category, a.symmetric) == (b.category, b.symmetric)


def test_round_trip_is_exact_and_byte_stable(tmp_path):
    samples = generate_split(GenConfig(samples_per_category=2, n_points=8))
    write_dataset(samples, tmp_path / "a.jsonl")
    write_dataset(read_dataset(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_truncated_line_reports_line_number(tmp_path):
    samples = generate_split(GenConfig(samples_per_category=1, n_points=8))
    path = tmp_path / "d.jsonl"
    write_dataset(samples, path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetParseError) as err:
        read_dataset(path)
    assert err.value.line_no == 3
    assert "line 3" in str(err.value)


def test_version_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"v": 2, "cat": 0}\n')
    with pytest.raises(DatasetVersionError):
        read_dataset(path)


def test_empty_file(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("")
    assert read_dataset(path) == []


def test_bad_record_fields(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"v": 1, "cat": 0, "sym": true, "rx": [1,0,0], "ry": [0,1,0], "t": [0,0,0], "s": [1,1,1], "pts": [[1, 2]]}\n')
    with pytest.raises(DatasetParseError):
        read_dataset(path)


def test_pose_sample_coerces_points():
    s = PoseSample([[0, 0, 0]], Pose((1, 0, 0), (0, 1, 0), (0, 0, 0), (1, 1, 1)), 0, True)
    assert s.points.dtype == np.float64
