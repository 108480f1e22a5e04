"""Dataset ingestion and deterministic synthetic fixtures.

IDX files follow the standard big-endian layout: a 4-byte magic, 4-byte
counts/dims, then raw uint8 payload. Paths ending in .gz are decompressed
transparently. Images everywhere in the package are float64 in [0, 1].
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, FormatError, SizeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images (N, H, W) in [0, 1], integer labels below class_count."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise SizeError(f"images must be (N, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConsistencyError("labels outside [0, class_count)")

    def __len__(self):
        return self.images.shape[0]


def _open_maybe_gz(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_exact(fh, count: int, path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IOError(f"truncated file {path}: wanted {count} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an image/label IDX pair, cross-checking their counts."""
    with _open_maybe_gz(images_path) as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x} in {images_path} "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, images_path), dtype=np.uint8)
    with _open_maybe_gz(labels_path) as fh:
        magic, n_labels = struct.unpack(">ii", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x} in {labels_path} "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path), dtype=np.uint8)
    if n != n_labels:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    images = pixels.reshape(n, rows, cols).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), class_count=int(labels.max()) + 1 if n else 1)


def save_idx(images_u8: np.ndarray, labels, images_path, labels_path) -> None:
    """Write a bit-exact IDX pair from uint8 images."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    if labels.shape != (n,):
        raise ConsistencyError(f"{n} images vs {labels.shape[0]} labels")
    with _open_maybe_gz_write(images_path) as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())
    with _open_maybe_gz_write(labels_path) as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        fh.write(labels.tobytes())


def _open_maybe_gz_write(path):
    path = str(path)
    return gzip.open(path, "wb") if path.endswith(".gz") else open(path, "wb")


def downscale(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average pooling; accepts one image or a stack.

    When a dimension does not divide evenly the image is first padded to the
    next multiple by edge replication (28 -> 32 for an 8-wide target), which
    keeps the pooling mean-preserving with respect to the padded image.
    """
    if out_h < 1 or out_w < 1:
        raise SizeError(f"target dims must be positive, got {out_h}x{out_w}")
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 2
    stack = image[None] if single else image
    n, h, w = stack.shape
    if out_h > h or out_w > w:
        raise SizeError(f"target {out_h}x{out_w} exceeds input {h}x{w}")
    fh = -(-h // out_h) * out_h  # next multiple
    fw = -(-w // out_w) * out_w
    ph, pw = fh - h, fw - w
    stack = np.pad(
        stack,
        ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)),
        mode="edge",
    )
    out = stack.reshape(n, out_h, fh // out_h, out_w, fw // out_w).mean(axis=(2, 4))
    return out[0] if single else out


def filter_classes(ds: Dataset, keep) -> Dataset:
    """Keep the listed classes, relabeled 0..k-1 in `keep` order, order-stable."""
    keep = list(keep)
    if not keep:
        raise SizeError("keep list is empty")
    relabel = {c: i for i, c in enumerate(keep)}
    mask = np.isin(ds.labels, keep)
    if not mask.any():
        raise ConsistencyError(f"no samples for classes {keep}")
    labels = np.array([relabel[int(c)] for c in ds.labels[mask]], dtype=np.int64)
    return Dataset(ds.images[mask], labels, class_count=len(keep))


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled train/test split."""
    if not 0 < test_fraction < 1:
        raise SizeError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = max(1, int(round(len(ds) * test_fraction)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (
        Dataset(ds.images[train_idx], ds.labels[train_idx], ds.class_count),
        Dataset(ds.images[test_idx], ds.labels[test_idx], ds.class_count),
    )


# -- synthetic fixtures ----------------------------------------------------------

_SYNTHETIC_KINDS = ("two-gaussians", "xor-blobs", "rings")


def _coordinate_masks(size: int) -> tuple[np.ndarray, np.ndarray]:
    ramp = np.linspace(-1.0, 1.0, size)
    gx = np.tile(ramp, (size, 1))
    return gx, gx.T


def _render(points: np.ndarray, size: int) -> np.ndarray:
    # Pixels are affine in the 2-D coordinates, so pixel-space linear
    # separability mirrors coordinate-space linear separability.
    gx, gy = _coordinate_masks(size)
    imgs = 0.5 + 0.22 * (points[:, 0, None, None] * gx + points[:, 1, None, None] * gy)
    return np.clip(imgs, 0.0, 1.0)


def synthetic(kind: str, count: int, seed: int, size: int = 8) -> Dataset:
    """Deterministic 2-class point clouds rendered as small images.

    two-gaussians: linearly separable (centers 6 sigma apart).
    xor-blobs: four corners with XOR labels; a linear probe stays near chance.
    rings: inner disk vs outer annulus; radial, also not linearly separable.
    """
    if kind not in _SYNTHETIC_KINDS:
        raise SizeError(f"unknown synthetic kind {kind!r}; pick from {_SYNTHETIC_KINDS}")
    if count < 2:
        raise SizeError(f"count must be >= 2, got {count}")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    if kind == "two-gaussians":
        sigma = 0.12
        centers = np.array([[-0.36, -0.36], [0.36, 0.36]])  # 6 sigma apart
        points = centers[labels] + sigma * rng.standard_normal((count, 2))
    elif kind == "xor-blobs":
        # label 0 on the agreeing corners, label 1 on the disagreeing ones
        corners = np.array([[-0.5, -0.5], [0.5, 0.5], [-0.5, 0.5], [0.5, -0.5]])
        which = rng.integers(0, 2, size=count)
        idx = np.where(labels == 0, which, 2 + which)
        points = corners[idx] + 0.1 * rng.standard_normal((count, 2))
    else:  # rings
        r = np.where(labels == 0, 0.15, 0.6) + 0.05 * rng.standard_normal(count)
        phi = rng.uniform(0, 2 * np.pi, count)
        points = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    points = np.clip(points, -1.0, 1.0)
    return Dataset(_render(points, size), labels, class_count=2)
