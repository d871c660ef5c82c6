import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse2fine.data import (MAGIC, Dataset, DatasetFormatError, augment,
                              gen_blob_dataset, gen_patch_dataset,
                              load_dataset, load_dataset_csv, save_dataset)
from coarse2fine.evaluate import recall_at_k


class _FixedRng:
    """Deterministic stand-in for a Generator: fixed coin, fixed offsets."""

    def __init__(self, coin, offset):
        self.coin = coin
        self.offset = offset

    def random(self):
        return self.coin

    def integers(self, low, high):
        return min(self.offset, high - 1)


class TestPatchDataset:
    def test_counts(self):
        d = gen_patch_dataset(64, 32, 128, seed=0)
        assert (d.n, d.C, d.F) == (64, 32, 128)
        assert d.dim == 32 * 32 * 3
        assert d.image_shape == (32, 32)

    def test_deterministic(self):
        a = gen_patch_dataset(16, 4, 8, seed=3)
        b = gen_patch_dataset(16, 4, 8, seed=3)
        assert a.examples.tobytes() == b.examples.tobytes()
        assert np.array_equal(a.coarse_labels, b.coarse_labels)
        assert np.array_equal(a.fine_labels, b.fine_labels)

    def test_single_patch_pool(self):
        d = gen_patch_dataset(5, 1, 1, seed=0)
        assert np.all(d.coarse_labels == 0)
        assert np.all(d.fine_labels == 0)

    def test_pixel_range(self):
        d = gen_patch_dataset(8, 4, 8, seed=1)
        assert d.examples.min() >= 0.0 and d.examples.max() <= 1.0

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            gen_patch_dataset(4, 0, 8)
        with pytest.raises(ValueError):
            gen_patch_dataset(4, 4, 8, big_size=40)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_hierarchy_consistency(self, seed):
        d = gen_patch_dataset(24, 3, 9, seed=seed)
        d.validate()  # raises if a fine class spans two coarse classes
        # the small-patch index determines the big-patch index
        assert np.array_equal(d.coarse_labels, d.fine_labels % d.C)


class TestBlobDataset:
    def test_counts(self):
        d = gen_blob_dataset(4, 5, 10, 16, seed=0)
        assert (d.n, d.C, d.F) == (200, 4, 20)
        counts = np.bincount(d.fine_labels)
        assert np.all(counts == 10)
        d.validate()

    def test_zero_noise_collapses_fine_classes(self):
        d = gen_blob_dataset(2, 2, 3, 4, noise=0.0, seed=1)
        for s in range(d.F):
            rows = d.examples[d.fine_labels == s]
            assert np.all(rows == rows[0])

    def test_separated_blobs_have_perfect_raw_retrieval(self):
        d = gen_blob_dataset(3, 4, 5, 8, coarse_spread=50.0, fine_spread=5.0,
                             noise=0.01, seed=2)
        recall, _ = recall_at_k(d.examples, d.fine_labels, [1])
        assert recall[1] == 1.0

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            gen_blob_dataset(0, 1, 1, 1)
        with pytest.raises(ValueError):
            gen_blob_dataset(1, 1, 1, 1, coarse_spread=0.0)


class TestAugment:
    def test_no_pad_no_mirror_is_identity(self, rng):
        x = rng.random(6 * 6 * 3)
        out = augment(x, 6, 6, 0, _FixedRng(coin=0.9, offset=0))
        np.testing.assert_array_equal(out, x)

    def test_double_mirror_is_identity(self, rng):
        x = rng.random(6 * 6 * 3)
        once = augment(x, 6, 6, 0, _FixedRng(coin=0.1, offset=0))
        twice = augment(once, 6, 6, 0, _FixedRng(coin=0.1, offset=0))
        np.testing.assert_array_equal(twice, x)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 6), st.integers(0, 2 ** 31 - 1))
    def test_length_preserved(self, pad, seed):
        r = np.random.default_rng(seed)
        x = r.random(8 * 8 * 3)
        assert augment(x, 8, 8, pad, r).shape == x.shape

    def test_centered_crop_recovers_image(self, rng):
        x = rng.random(6 * 6 * 3)
        out = augment(x, 6, 6, 2, _FixedRng(coin=0.9, offset=2))
        np.testing.assert_array_equal(out, x)


class TestDatasetFile:
    def test_round_trip(self, tmp_path, rng):
        d = gen_blob_dataset(2, 3, 4, 5, seed=7)
        path = tmp_path / "d.cfds"
        save_dataset(d, str(path))
        back = load_dataset(str(path))
        np.testing.assert_array_equal(back.examples, d.examples)
        np.testing.assert_array_equal(back.coarse_labels, d.coarse_labels)
        np.testing.assert_array_equal(back.fine_labels, d.fine_labels)
        assert (back.C, back.F) == (d.C, d.F)

    def test_round_trip_bytes_identical(self, tmp_path):
        d = gen_patch_dataset(6, 2, 4, img_h=8, img_w=8, big_size=3,
                              small_size=1, seed=1)
        p1, p2 = tmp_path / "a.cfds", tmp_path / "b.cfds"
        save_dataset(d, str(p1))
        save_dataset(load_dataset(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cfds"
        path.write_bytes(b"NOTMAG" + b"\0" * 40)
        with pytest.raises(DatasetFormatError, match="offset 0"):
            load_dataset(str(path))

    def test_truncated_file_names_offset(self, tmp_path):
        d = gen_blob_dataset(2, 2, 2, 3, seed=0)
        path = tmp_path / "t.cfds"
        save_dataset(d, str(path))
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(DatasetFormatError, match="offset"):
            load_dataset(str(path))

    def test_hand_built_file(self, tmp_path):
        # 2 examples, dim 2, C=2, F=2, f64 values, labels (0,1) / (1,0)
        raw = (MAGIC + struct.pack("<IIII", 2, 2, 2, 2) + struct.pack("<B", 1)
               + np.array([[1.0, 2.0], [3.0, 4.0]]).astype("<f8").tobytes()
               + np.array([0, 1], dtype="<u4").tobytes()
               + np.array([1, 0], dtype="<u4").tobytes())
        path = tmp_path / "hand.cfds"
        path.write_bytes(raw)
        d = load_dataset(str(path))
        np.testing.assert_array_equal(d.examples, [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(d.coarse_labels, [0, 1])
        np.testing.assert_array_equal(d.fine_labels, [1, 0])

    def test_label_out_of_range_in_file(self, tmp_path):
        raw = (MAGIC + struct.pack("<IIII", 1, 1, 1, 0) + struct.pack("<B", 1)
               + np.array([0.5]).astype("<f8").tobytes()
               + np.array([3], dtype="<u4").tobytes())
        path = tmp_path / "oob.cfds"
        path.write_bytes(raw)
        with pytest.raises(DatasetFormatError, match="out of range"):
            load_dataset(str(path))


class TestCsv:
    def test_load(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("coarse,fine,x0,x1\n0,0,1.0,2.0\n0,1,3.0,4.0\n"
                        "1,2,5.0,6.0\n")
        d = load_dataset_csv(str(path))
        assert (d.n, d.C, d.F) == (3, 2, 3)
        np.testing.assert_array_equal(d.examples[2], [5.0, 6.0])

    def test_missing_fine_column_allowed(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("coarse,fine,x0\n0,,1.0\n1,,2.0\n")
        d = load_dataset_csv(str(path))
        assert d.fine_labels is None and d.F == 0

    def test_bad_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DatasetFormatError):
            load_dataset_csv(str(path))


class TestValidate:
    def test_fine_spanning_two_coarse_rejected(self):
        d = Dataset(examples=np.zeros((2, 3)),
                    coarse_labels=np.array([0, 1]), C=2,
                    fine_labels=np.array([0, 0]), F=1)
        with pytest.raises(ValueError, match="spans"):
            d.validate()

    def test_label_range_checked(self):
        d = Dataset(examples=np.zeros((2, 3)),
                    coarse_labels=np.array([0, 5]), C=2)
        with pytest.raises(ValueError):
            d.validate()
