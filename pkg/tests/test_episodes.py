import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guidedseg import pnm
from guidedseg.episodes import (FAMILY_NAMES, Dataset, Sample, downsample_mask,
                                generate_synthetic_dataset, load_dataset, sample_episode,
                                shape_mask, write_dataset)
from guidedseg.errors import (ConfigError, EmptyMaskFileError, EpisodeSamplingError,
                              IngestionError, MalformedHeaderError, SizeMismatchError,
                              SplitOverlapError)
from helpers import small_dataset


def test_generation_is_deterministic():
    a = generate_synthetic_dataset(4, 8, 32, seed=7)
    b = generate_synthetic_dataset(4, 8, 32, seed=7)
    for x, y in zip(a.samples, b.samples):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
    c = generate_synthetic_dataset(4, 8, 32, seed=8)
    assert a.samples[0].image.tobytes() != c.samples[0].image.tobytes()


def test_generated_samples_respect_invariants():
    ds = small_dataset()
    assert set(ds.train_classes).isdisjoint(ds.test_classes)
    assert ds.train_classes == (0, 1, 2, 3) and ds.test_classes == (4, 5)
    for s in ds.samples:
        assert s.image.shape == (32, 32, 3) and s.mask.shape == (32, 32)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {0, 1}
        assert 0.01 < s.mask.mean() < 0.9
        assert s.params["family"] == FAMILY_NAMES[s.class_id]


def test_disc_mask_matches_predicate():
    ds = generate_synthetic_dataset(4, 8, 32, seed=3)
    for s in ds.samples_of(0):
        cx, cy, r = s.params["cx"], s.params["cy"], s.params["radius"]
        expected = np.zeros((32, 32), dtype=np.uint8)
        for y in range(32):
            for x in range(32):
                if (x + 0.5 - cx) ** 2 + (y + 0.5 - cy) ** 2 <= r * r:
                    expected[y, x] = 1
        np.testing.assert_array_equal(s.mask, expected)


def test_every_family_rasterises():
    for family in FAMILY_NAMES:
        m = shape_mask(family, 32, 16.0, 16.0, 8.0)
        assert m.any() and not m.all()


def test_generator_rejects_bad_config():
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(9, 8, 32)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(3, 8, 32)
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(4, 8, 16)


def test_dataset_rejects_overlapping_split():
    s = small_dataset().samples[0]
    with pytest.raises(ValueError):
        Dataset([s], (0, 1), (1, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["train", "test"]), st.integers(1, 5), st.integers(1, 3))
def test_episode_properties(seed, side, K, N):
    ds = small_dataset()
    ep = sample_episode(ds, side, K, N, seed)
    assert ep.class_id in ds.classes(side)
    members = ep.support + ep.query
    assert len(ep.support) == K and len(ep.query) == N
    assert all(s.class_id == ep.class_id for s in members)
    assert len({s.sample_id for s in members}) == K + N
    again = sample_episode(ds, side, K, N, seed)
    assert [s.sample_id for s in again.support + again.query] == [s.sample_id for s in members]


def test_episode_needs_enough_samples():
    with pytest.raises(EpisodeSamplingError):
        sample_episode(small_dataset(), "test", 10, 5, 0)
    with pytest.raises(EpisodeSamplingError):
        sample_episode(small_dataset(), "test", 0, 1, 0)


def test_downsample_examples():
    np.testing.assert_array_equal(downsample_mask(np.ones((8, 8)), 3, 5), np.ones((3, 5)))
    m = np.random.default_rng(0).integers(0, 2, size=(6, 6))
    np.testing.assert_array_equal(downsample_mask(m, 6, 6), m)
    block = np.zeros((8, 8))
    block[2:6, 2:6] = 1
    # area fraction of each 2x2 cell, thresholded at one half
    fractions = block.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    np.testing.assert_array_equal(downsample_mask(block, 4, 4), (fractions >= 0.5).astype(np.uint8))
    assert downsample_mask(block, 4, 4).sum() == 4


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(0, 39), st.integers(0, 39))
def test_downsample_never_loses_a_single_pixel(H, W, y, x):
    m = np.zeros((H, W), dtype=np.uint8)
    m[y % H, x % W] = 1
    out = downsample_mask(m, max(1, H // 8), max(1, W // 8))
    assert out.sum() >= 1


def test_dataset_directory_round_trip(tmp_path):
    ds = generate_synthetic_dataset(4, 8, 32, seed=1)
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.train_classes == ds.train_classes and back.test_classes == ds.test_classes
    assert len(back.samples) == len(ds.samples)
    for a, b in zip(ds.samples, back.samples):
        assert a.sample_id == b.sample_id and a.class_id == b.class_id
        assert np.max(np.abs(a.image - b.image)) <= 1 / 255
        np.testing.assert_array_equal(a.mask, b.mask)


def _tiny_dir(tmp_path):
    ds = generate_synthetic_dataset(4, 8, 32, seed=1)
    write_dataset(Dataset(ds.samples[:2], (0,), (1, 2, 3)), tmp_path)
    return tmp_path, ds.samples[0].sample_id


def test_ingestion_errors_name_the_file(tmp_path):
    root, sid = _tiny_dir(tmp_path)
    mask_path = root / "masks" / f"{sid}.pgm"
    pnm.write_pnm(mask_path, np.zeros((32, 32), dtype=np.uint8))
    with pytest.raises(EmptyMaskFileError, match=sid):
        load_dataset(root)
    pnm.write_pnm(mask_path, np.full((16, 32), 255, dtype=np.uint8))
    with pytest.raises(SizeMismatchError, match=sid):
        load_dataset(root)
    mask_path.write_bytes(b"P5\n32 32\n")
    with pytest.raises(MalformedHeaderError, match=sid):
        load_dataset(root)


def test_split_overlap_detected(tmp_path):
    root, _ = _tiny_dir(tmp_path)
    (root / "split.txt").write_text("0 train\n3 train\n3 test\n")
    with pytest.raises(SplitOverlapError, match="split.txt"):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path)


def test_sample_rejects_mismatched_mask():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4, 3)), np.ones((3, 4), dtype=np.uint8), 0, "x")
