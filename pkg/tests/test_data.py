"""IDX parsing, downscaling, class filtering, and synthetic fixtures."""

import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from resetqnn.data import (
    Dataset,
    downscale,
    filter_classes,
    load_idx,
    save_idx,
    split,
    synthetic,
)
from resetqnn.errors import ConsistencyError, FormatError, SizeError

FIXTURES = Path(__file__).parent / "fixtures"
DIGITS_IMAGES = FIXTURES / "digits-images-idx3-ubyte.gz"
DIGITS_LABELS = FIXTURES / "digits-labels-idx1-ubyte.gz"


def linear_probe_accuracy(ds: Dataset, epochs=400, lr=0.5) -> float:
    """Logistic regression on raw pixels; the separability oracle."""
    x = ds.images.reshape(len(ds), -1)
    x = np.hstack([x - x.mean(axis=0), np.ones((len(x), 1))])
    y = ds.labels.astype(np.float64)
    w = np.zeros(x.shape[1])
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(x @ w)))
        w -= lr * x.T @ (p - y) / len(y)
    return float(np.mean((x @ w > 0) == ds.labels))


class TestIdxIO:
    def test_fixture_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(2, 5, 4), dtype=np.uint8)
        labels = np.array([3, 1], dtype=np.uint8)
        ip, lp = tmp_path / "imgs", tmp_path / "labs"
        save_idx(images, labels, ip, lp)
        ds = load_idx(ip, lp)
        np.testing.assert_array_equal(np.round(ds.images * 255).astype(np.uint8), images)
        np.testing.assert_array_equal(ds.labels, labels)
        # byte-level round trip
        ip2, lp2 = tmp_path / "imgs2", tmp_path / "labs2"
        save_idx(np.round(ds.images * 255).astype(np.uint8), ds.labels, ip2, lp2)
        assert ip.read_bytes() == ip2.read_bytes()
        assert lp.read_bytes() == lp2.read_bytes()

    def test_gzip_transparent(self, tmp_path):
        images = np.zeros((1, 2, 2), dtype=np.uint8)
        labels = np.zeros(1, dtype=np.uint8)
        ip, lp = tmp_path / "i.gz", tmp_path / "l.gz"
        save_idx(images, labels, ip, lp)
        assert gzip.open(ip).read(4) == struct.pack(">i", 0x00000803)
        assert len(load_idx(ip, lp)) == 1

    def test_wrong_image_magic(self, tmp_path):
        ip = tmp_path / "bad"
        ip.write_bytes(struct.pack(">iiii", 0x00000801, 1, 2, 2) + b"\0" * 4)
        lp = tmp_path / "labs"
        lp.write_bytes(struct.pack(">ii", 0x00000801, 1) + b"\0")
        with pytest.raises(FormatError, match="magic"):
            load_idx(ip, lp)

    def test_wrong_label_magic(self, tmp_path):
        ip = tmp_path / "imgs"
        ip.write_bytes(struct.pack(">iiii", 0x00000803, 1, 2, 2) + b"\0" * 4)
        lp = tmp_path / "bad"
        lp.write_bytes(struct.pack(">ii", 0x00000803, 1) + b"\0")
        with pytest.raises(FormatError, match="magic"):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip = tmp_path / "imgs"
        ip.write_bytes(struct.pack(">iiii", 0x00000803, 1, 2, 2) + b"\0" * 4)
        lp = tmp_path / "labs"
        lp.write_bytes(struct.pack(">ii", 0x00000801, 2) + b"\0\0")
        with pytest.raises(ConsistencyError, match="labels"):
            load_idx(ip, lp)

    def test_truncated_file(self, tmp_path):
        ip = tmp_path / "imgs"
        ip.write_bytes(struct.pack(">iiii", 0x00000803, 2, 2, 2) + b"\0" * 3)
        lp = tmp_path / "labs"
        lp.write_bytes(struct.pack(">ii", 0x00000801, 2) + b"\0\0")
        with pytest.raises(IOError, match="truncated"):
            load_idx(ip, lp)

    def test_bundled_digits_fixture(self):
        ds = load_idx(DIGITS_IMAGES, DIGITS_LABELS)
        assert len(ds) == 1797
        assert ds.images.shape == (1797, 8, 8)
        assert ds.class_count == 10
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0

    @pytest.mark.skipif(
        "MNIST_DIR" not in os.environ, reason="set MNIST_DIR to the raw IDX files"
    )
    def test_official_train_files(self):
        base = Path(os.environ["MNIST_DIR"])
        ds = load_idx(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte")
        assert len(ds) == 60000
        assert ds.images.shape[1:] == (28, 28)
        assert len(filter_classes(ds, [0, 1])) == 12665


class TestDownscale:
    def test_constant_stays_constant(self):
        out = downscale(np.full((16, 16), 0.37), 4, 4)
        np.testing.assert_allclose(out, np.full((4, 4), 0.37), atol=1e-12)

    def test_checkerboard_average(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(downscale(board, 1, 1), [[0.5]], atol=1e-12)

    def test_exact_divisor_mean_preserving(self):
        rng = np.random.default_rng(1)
        img = rng.random((32, 32))
        out = downscale(img, 8, 8)
        assert abs(out.mean() - img.mean()) < 1e-10

    def test_28_to_8_mean_matches_padded(self):
        rng = np.random.default_rng(2)
        img = rng.random((28, 28))
        out = downscale(img, 8, 8)
        padded = np.pad(img, ((2, 2), (2, 2)), mode="edge")
        assert abs(out.mean() - padded.mean()) < 1e-6
        assert out.shape == (8, 8)

    def test_stack_input(self):
        stack = np.random.default_rng(3).random((5, 16, 16))
        out = downscale(stack, 8, 8)
        assert out.shape == (5, 8, 8)

    def test_zero_target_rejected(self):
        with pytest.raises(SizeError):
            downscale(np.zeros((8, 8)), 0, 4)

    def test_upscale_rejected(self):
        with pytest.raises(SizeError):
            downscale(np.zeros((4, 4)), 8, 8)


class TestFilterClasses:
    def test_binary_digits_counts(self):
        ds = load_idx(DIGITS_IMAGES, DIGITS_LABELS)
        sub = filter_classes(ds, [0, 1])
        assert len(sub) == 360  # 178 zeros + 182 ones in the bundled fixture
        assert sub.class_count == 2
        assert set(np.unique(sub.labels)) == {0, 1}

    def test_keep_all_is_identity(self):
        ds = synthetic("two-gaussians", 20, seed=0)
        sub = filter_classes(ds, [0, 1])
        np.testing.assert_array_equal(sub.images, ds.images)
        np.testing.assert_array_equal(sub.labels, ds.labels)

    def test_order_stable_and_relabelled(self):
        images = np.zeros((6, 2, 2))
        images[:, 0, 0] = np.arange(6)
        ds = Dataset(images, np.array([2, 0, 2, 1, 0, 2]), class_count=3)
        sub = filter_classes(ds, [2, 0])
        np.testing.assert_array_equal(sub.labels, [0, 1, 0, 1, 0])
        np.testing.assert_array_equal(sub.images[:, 0, 0], [0, 1, 2, 4, 5])

    def test_missing_class_errors(self):
        ds = synthetic("two-gaussians", 10, seed=0)
        with pytest.raises(ConsistencyError):
            filter_classes(ds, [7])
        with pytest.raises(SizeError):
            filter_classes(ds, [])


class TestSynthetic:
    def test_seed_determinism(self):
        a = synthetic("rings", 64, seed=9)
        b = synthetic("rings", 64, seed=9)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_two_gaussians_linearly_separable(self):
        ds = synthetic("two-gaussians", 256, seed=0)
        assert linear_probe_accuracy(ds) >= 0.99

    def test_xor_blobs_defeat_linear_probe(self):
        ds = synthetic("xor-blobs", 256, seed=0)
        assert linear_probe_accuracy(ds) < 0.65

    def test_pixel_range(self):
        for kind in ("two-gaussians", "xor-blobs", "rings"):
            ds = synthetic(kind, 32, seed=1)
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_unknown_kind(self):
        with pytest.raises(SizeError):
            synthetic("spirals", 16, seed=0)


class TestSplit:
    def test_deterministic_and_disjoint(self):
        ds = synthetic("two-gaussians", 100, seed=0)
        tr1, te1 = split(ds, 0.25, seed=5)
        tr2, te2 = split(ds, 0.25, seed=5)
        np.testing.assert_array_equal(tr1.images, tr2.images)
        np.testing.assert_array_equal(te1.labels, te2.labels)
        assert len(te1) == 25 and len(tr1) == 75

    def test_bad_fraction(self):
        ds = synthetic("two-gaussians", 10, seed=0)
        with pytest.raises(SizeError):
            split(ds, 1.5, seed=0)
