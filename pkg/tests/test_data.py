import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cmunet.data import (
    Sample,
    augment,
    batches,
    load_dataset,
    split,
    synthetic_dataset,
    transform,
    write_synthetic,
)
from cmunet.errors import DataError

GOLDEN = Path(__file__).parent / "golden"
IDS = [f"s{i:02d}" for i in range(10)]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_split_matches_golden(seed):
    want = json.loads((GOLDEN / f"split_seed{seed}.json").read_text())
    assert split(IDS, seed).to_dict() == want


def test_split_sizes_and_partition():
    plan = split(IDS, 5)
    assert len(plan.train) == 8 and len(plan.val) == 2
    assert sorted(plan.train + plan.val) == IDS
    assert split(IDS, 5) == plan
    assert split(IDS[:3], 0, train_fraction=0.99).val  # clamp keeps val non-empty
    with pytest.raises(DataError):
        split(IDS[:1], 0)


def _sample(rng, size=6):
    mask = (rng.random((1, size, size)) < 0.4).astype(np.float32)
    return Sample("x", rng.random((3, size, size)).astype(np.float32), mask)


def test_transform_identity_and_involution(rng):
    s = _sample(rng)
    same = transform(s, 0, False, False)
    np.testing.assert_array_equal(same.image, s.image)
    for hflip, vflip in ((True, False), (False, True), (True, True)):
        twice = transform(transform(s, 0, hflip, vflip), 0, hflip, vflip)
        np.testing.assert_array_equal(twice.image, s.image)
    full = s
    for _ in range(4):
        full = transform(full, 1, False, False)
    np.testing.assert_array_equal(full.mask, s.mask)


def test_augment_keeps_image_and_mask_aligned(rng):
    s = _sample(rng)
    # tag each pixel so the image and mask can be compared after the transform
    s = Sample("x", np.concatenate([s.image, s.mask]), s.mask)
    for seed in range(20):
        out = augment(s, np.random.default_rng(seed))
        np.testing.assert_array_equal(out.image[3:], out.mask)
        assert out.mask.sum() == s.mask.sum()
        assert out.mask.shape == s.mask.shape


def test_batches_sizes_and_determinism(rng):
    samples = [Sample(f"s{i}", np.zeros((3, 4, 4), np.float32), np.zeros((1, 4, 4), np.float32)) for i in range(10)]
    got = list(batches(samples, 8, seed=0, epoch=0))
    assert [len(b.ids) for b in got] == [8, 2]
    assert got[0].images.shape == (8, 3, 4, 4)
    again = list(batches(samples, 8, seed=0, epoch=0))
    assert [b.ids for b in got] == [b.ids for b in again]
    other = list(batches(samples, 8, seed=0, epoch=1))
    assert [b.ids for b in got] != [b.ids for b in other]
    assert [len(b.ids) for b in batches(samples, 8, seed=0, drop_last=True)] == [8]
    unshuffled = list(batches(samples, 4, seed=0, shuffle=False))
    assert unshuffled[0].ids == ("s0", "s1", "s2", "s3")


def test_load_dataset_round_trip(tmp_path):
    ids = write_synthetic(tmp_path, n=4, size=16, seed=3)
    assert ids == [f"synth_{i:04d}" for i in range(4)]
    loaded = load_dataset(tmp_path, size=16)
    memory = synthetic_dataset(4, 16, seed=3)
    for a, b in zip(loaded, memory):
        assert a.id == b.id
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.image.dtype == np.float32 and a.image.shape == (3, 16, 16)
    assert load_dataset(tmp_path, size=16, in_channels=1)[0].image.shape == (1, 16, 16)


def test_resized_masks_stay_binary(tmp_path):
    write_synthetic(tmp_path, n=2, size=20, seed=0)
    for s in load_dataset(tmp_path, size=32):
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_missing_mask_is_reported(tmp_path):
    write_synthetic(tmp_path, n=2, size=8, seed=0)
    (tmp_path / "masks" / "synth_0001.png").unlink()
    with pytest.raises(DataError, match="synth_0001"):
        load_dataset(tmp_path, size=8)


def test_missing_or_empty_directories(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "images").mkdir()
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_corrupt_image_is_data_error(tmp_path):
    write_synthetic(tmp_path, n=1, size=8, seed=0)
    (tmp_path / "images" / "synth_0000.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_dataset(tmp_path, size=8)


def test_all_white_mask(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    Image.fromarray(np.full((8, 8), 90, np.uint8)).save(tmp_path / "images" / "w.png")
    Image.fromarray(np.full((8, 8), 255, np.uint8)).save(tmp_path / "masks" / "w.png")
    (s,) = load_dataset(tmp_path, size=16)
    assert np.all(s.mask == 1)
