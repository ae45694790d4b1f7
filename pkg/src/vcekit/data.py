"""Dataset construction: IDX ingestion, synthetic shapes, resizing, splits.

Images are float32 in [-1, 1] with shape (N, 1, H, W); the uint8 <-> float
pixel map is exact on the 256-level grid, so IDX round-trips are lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SHAPE_CLASSES = ("filled_square", "hollow_square", "disc", "ring", "cross", "stripe")


class IdxFormatError(ValueError):
    """Malformed IDX header (wrong magic or dimension tag)."""


class IdxLengthError(ValueError):
    """IDX payload shorter or longer than the header promises."""


class IdxConsistencyError(ValueError):
    """Image and label files disagree about the record count."""


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable image/label pairs plus class names and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    split_tag: str = "train"

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if imgs.ndim != 4 or imgs.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {imgs.shape}")
        if imgs.shape[2] != imgs.shape[3]:
            raise ValueError(f"images must be square, got {imgs.shape}")
        if imgs.shape[0] == 0:
            raise ValueError("dataset is empty")
        if labels.shape != (imgs.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {imgs.shape[0]} images")
        if labels.min() < 0 or labels.max() >= len(self.class_names):
            raise ValueError("label outside class range")
        lo, hi = float(imgs.min()), float(imgs.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"pixels outside [-1, 1]: [{lo}, {hi}]")
        if not np.isfinite(imgs).all():
            raise ValueError("non-finite pixel values")
        if self.split_tag not in ("train", "val"):
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    @property
    def n(self) -> int:
        return int(self.images.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.images.shape[2])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def of_class(self, label: int) -> np.ndarray:
        return self.images[self.labels == label]


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------


def _read_header(buf: bytes, expected_magic: int, what: str):
    if len(buf) < 4:
        raise IdxLengthError(f"{what}: only {len(buf)} bytes, header needs 4")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{what}: bad magic 0x{magic:08x} (bytes {buf[:4].hex()}), expected 0x{expected_magic:08x}"
        )


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> LabeledDataset:
    """Decode big-endian IDX image/label buffers into a dataset.

    Pixels map 0..255 -> [-1, 1] via p = 2*b/255 - 1.
    """
    _read_header(image_bytes, IDX_IMAGE_MAGIC, "image file")
    if len(image_bytes) < 16:
        raise IdxLengthError(f"image file: {len(image_bytes)} bytes, header needs 16")
    n, rows, cols = struct.unpack(">III", image_bytes[4:16])
    expected = 16 + n * rows * cols
    if len(image_bytes) != expected:
        raise IdxLengthError(
            f"image file: {len(image_bytes)} bytes, header promises {expected} "
            f"({n} images of {rows}x{cols})"
        )

    _read_header(label_bytes, IDX_LABEL_MAGIC, "label file")
    if len(label_bytes) < 8:
        raise IdxLengthError(f"label file: {len(label_bytes)} bytes, header needs 8")
    (n_labels,) = struct.unpack(">I", label_bytes[4:8])
    if len(label_bytes) != 8 + n_labels:
        raise IdxLengthError(
            f"label file: {len(label_bytes)} bytes, header promises {8 + n_labels}"
        )
    if n != n_labels:
        raise IdxConsistencyError(f"{n} images but {n_labels} labels")
    if n == 0:
        raise IdxConsistencyError("empty IDX pair")
    if rows != cols:
        raise IdxFormatError(f"image file: non-square images {rows}x{cols}")

    raw = np.frombuffer(image_bytes, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    images = (raw.astype(np.float32) * (2.0 / 255.0)) - 1.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    names = tuple(str(i) for i in range(int(labels.max()) + 1))
    return LabeledDataset(images=images, labels=labels, class_names=names)


def serialize_idx(ds: LabeledDataset) -> tuple:
    """Encode a dataset back to IDX bytes (inverse of :func:`parse_idx`)."""
    n, _, rows, cols = ds.images.shape
    pixels = np.clip(np.rint((ds.images + 1.0) * (255.0 / 2.0)), 0, 255).astype(np.uint8)
    image_bytes = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", IDX_LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    return image_bytes, label_bytes


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def _soft_edge(dist: np.ndarray, radius: float, softness: float = 0.7) -> np.ndarray:
    """1 inside, 0 outside, linear ramp of width ``softness`` pixels."""
    return np.clip((radius - dist) / softness + 0.5, 0.0, 1.0)


def _render_shape(cls: str, res: int, cx: float, cy: float, half: float,
                  thick: float, bar: float) -> np.ndarray:
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if cls == "filled_square":
        return _soft_edge(np.maximum(np.abs(dx), np.abs(dy)), half)
    if cls == "hollow_square":
        d = np.maximum(np.abs(dx), np.abs(dy))
        return _soft_edge(d, half) * _soft_edge(half - thick - d, 0.0)
    if cls == "disc":
        return _soft_edge(np.hypot(dx, dy), half)
    if cls == "ring":
        d = np.hypot(dx, dy)
        return _soft_edge(d, half) * _soft_edge(half - thick - d, 0.0)
    if cls == "cross":
        arm = _soft_edge(np.maximum(np.abs(dx), np.abs(dy)), half)
        bars = np.maximum(_soft_edge(np.abs(dx), bar), _soft_edge(np.abs(dy), bar))
        return arm * bars
    if cls == "stripe":
        return _soft_edge(np.abs(dx - dy) / np.sqrt(2.0), bar)
    raise ValueError(f"unknown shape class {cls!r}")


def synth_shapes(seed: int, per_class: int, resolution: int = 16) -> LabeledDataset:
    """Procedural six-class shape dataset with position/size/intensity jitter.

    Deterministic given ``seed``.  Foreground intensity varies per image;
    background sits at -1.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    rng = np.random.default_rng(seed)
    res = int(resolution)
    images = np.empty((len(SHAPE_CLASSES) * per_class, 1, res, res), dtype=np.float32)
    labels = np.empty(len(SHAPE_CLASSES) * per_class, dtype=np.int64)
    k = 0
    for label, cls in enumerate(SHAPE_CLASSES):
        for _ in range(per_class):
            cx = (res - 1) / 2.0 + rng.uniform(-res / 10.0, res / 10.0)
            cy = (res - 1) / 2.0 + rng.uniform(-res / 10.0, res / 10.0)
            half = rng.uniform(0.27, 0.40) * res
            thick = rng.uniform(0.30, 0.42) * half
            bar = rng.uniform(0.10, 0.16) * res
            if cls == "stripe":
                bar *= 1.35
            fg = rng.uniform(0.55, 1.0)
            mask = _render_shape(cls, res, cx, cy, half, thick, bar)
            img = -1.0 + mask * (fg + 1.0)
            images[k, 0] = img.astype(np.float32)
            labels[k] = label
            k += 1
    return LabeledDataset(images=images, labels=labels, class_names=SHAPE_CLASSES)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def center_crop(ds: LabeledDataset, size: int) -> LabeledDataset:
    res = ds.resolution
    if size > res:
        raise ValueError(f"crop {size} exceeds resolution {res}")
    off = (res - size) // 2
    return replace(ds, images=ds.images[:, :, off:off + size, off:off + size])


def _bilinear_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    src_len = img.shape[axis]
    scale = src_len / out_len
    pos = (np.arange(out_len) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, src_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src_len - 1)
    w = (pos - lo).astype(np.float64)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    return a * (1.0 - w) + b * w


def downscale(ds: LabeledDataset, target: int, mode: str = "avgpool") -> LabeledDataset:
    """Resize every image to ``target`` x ``target``.

    ``avgpool`` requires the source resolution to be divisible by the target
    and averages non-overlapping blocks; ``bilinear`` handles any ratio.
    Both are convex combinations, so the [-1, 1] pixel range is preserved.
    """
    res = ds.resolution
    if target < 1 or target > res:
        raise ValueError(f"cannot downscale {res} -> {target}")
    if mode == "avgpool":
        if res % target:
            raise ValueError(f"avgpool needs divisible sizes, got {res} -> {target}")
        f = res // target
        imgs = ds.images.reshape(ds.n, 1, target, f, target, f).mean(axis=(3, 5), dtype=np.float64)
        return replace(ds, images=imgs.astype(np.float32))
    if mode == "bilinear":
        imgs = _bilinear_axis(ds.images.astype(np.float64), target, axis=2)
        imgs = _bilinear_axis(imgs, target, axis=3)
        return replace(ds, images=np.clip(imgs, -1.0, 1.0).astype(np.float32))
    raise ValueError(f"unknown downscale mode {mode!r}")


def load_mnist16(image_path, label_path) -> LabeledDataset:
    """Opt-in MNIST path: parse IDX, crop 28 -> 24, bilinear 24 -> 16."""
    with open(image_path, "rb") as fh:
        image_bytes = fh.read()
    with open(label_path, "rb") as fh:
        label_bytes = fh.read()
    ds = parse_idx(image_bytes, label_bytes)
    return downscale(center_crop(ds, 24), 16, mode="bilinear")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_stratified(ds: LabeledDataset, val_fraction: float, seed: int) -> tuple:
    """Label-stratified disjoint train/val split, deterministic given seed."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == label)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(idx.size * val_fraction))
        n_val = min(max(n_val, 1), idx.size - 1)
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    train = LabeledDataset(ds.images[train_idx], ds.labels[train_idx], ds.class_names, "train")
    val = LabeledDataset(ds.images[val_idx], ds.labels[val_idx], ds.class_names, "val")
    return train, val
