"""Datasets: synthetic Gaussian blobs, IDX (MNIST-format) files, batching."""
from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_VERSION = 1


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    """Flat ``N x D`` features with integer labels.

    Image datasets keep ``image_shape=(H, W)`` so they can be viewed as
    ``N x H x W x 1``; features stay flattened row-major.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    image_shape: Optional[tuple[int, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be N x D, got {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ValueError("feature and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.image_shape is not None:
            h, w = self.image_shape
            if h * w != self.features.shape[1]:
                raise ValueError("image_shape does not match feature width")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def images(self) -> np.ndarray:
        if self.image_shape is None:
            raise ValueError("not an image dataset")
        return self.features.reshape(len(self), *self.image_shape, 1)


# -- synthetic blobs ---------------------------------------------------------------
def gen_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int = 0,
              test_per_class: Optional[int] = None, center_scale: float = 1.0,
              clusters_per_class: int = 1) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters as matched train/test splits.

    Each class owns ``clusters_per_class`` means drawn from
    ``N(0, center_scale**2 I)``; a sample picks one of its class's means
    uniformly and adds ``N(0, spread**2 I)`` noise. With more than one cluster
    per class the classes are generally not linearly separable. Rows are
    grouped by class (shuffling is the batcher's job).
    """
    if classes <= 0 or per_class <= 0 or dim <= 0 or clusters_per_class <= 0:
        raise ValueError("classes, per_class, dim and clusters_per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    k = clusters_per_class
    means = rng.normal(0.0, center_scale, size=(classes, k, dim))
    meta = {"kind": "blobs", "classes": classes, "dim": dim, "spread": spread,
            "seed": seed, "center_scale": center_scale, "clusters_per_class": k}

    def draw(n: int, split: str) -> Dataset:
        labels = np.repeat(np.arange(classes), n)
        which = rng.integers(0, k, size=labels.size) if k > 1 else np.zeros(labels.size, int)
        noise = rng.normal(0.0, 1.0, size=(classes * n, dim))
        feats = means[labels, which] + spread * noise
        return Dataset(feats, labels, classes, split, meta={**meta, "per_class": n})

    train = draw(per_class, "train")
    test = draw(test_per_class, "test")
    return train, test


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Per-dimension z-scoring with statistics from ``train`` only."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (replace(train, features=(train.features - mu) / sd),
            replace(test, features=(test.features - mu) / sd))


# -- IDX files ---------------------------------------------------------------------
def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(path, len(raw), "truncated magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = int(np.prod(dims))
    body = raw[header_end:]
    if len(body) < need:
        raise IdxFormatError(path, len(raw), f"truncated data: expected {need} bytes, found {len(body)}")
    if len(body) > need:
        raise IdxFormatError(path, header_end + need, "trailing bytes after data")
    return dims, body


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    dims, body = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    n, h, w = dims
    (n_labels,), lab = _parse_idx(labels_path, IDX_LABELS_MAGIC)
    if n_labels != n:
        raise IdxFormatError(labels_path, 4, f"{n_labels} labels for {n} images")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, h * w).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise IdxFormatError(labels_path, 8 + int(labels.argmax()),
                             f"label {labels.max()} outside [0, {num_classes})")
    return Dataset(pixels, labels, num_classes, split, image_shape=(h, w),
                   meta={"kind": "idx", "images": str(images_path), "labels": str(labels_path)})


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``N x H x W`` images and ``N`` labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- caching / export ----------------------------------------------------------------
def save_dataset(path, ds: Dataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": CACHE_VERSION, "num_classes": ds.num_classes, "split": ds.split,
              "image_shape": list(ds.image_shape) if ds.image_shape else None, "meta": ds.meta}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8),
                 features=ds.features, labels=ds.labels)
    return path


def load_dataset(path) -> Dataset:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported dataset cache version {header.get('version')}")
        shape = tuple(header["image_shape"]) if header["image_shape"] else None
        return Dataset(z["features"].copy(), z["labels"].copy(), header["num_classes"],
                       header["split"], shape, header["meta"])


def export_csv(path, ds: Dataset) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", *(f"x{i}" for i in range(ds.dim))])
        for y, row in zip(ds.labels, ds.features):
            writer.writerow([int(y), *(repr(float(v)) for v in row)])
    return path


# -- batching and augmentation -----------------------------------------------------------
@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int
    epoch: int = 0
    shuffle: bool = True

    def permutation(self, n: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, self.epoch]).permutation(n)

    def batches(self, n: int) -> Iterator[np.ndarray]:
        """Index arrays covering ``range(n)`` once; the last one may be short."""
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        order = self.permutation(n)
        for start in range(0, n, self.batch_size):
            yield order[start:start + self.batch_size]


def augment(images: np.ndarray, pad: int, flip_prob: float, seed,
            return_offsets: bool = False):
    """Zero-pad, random-crop back to size, and randomly mirror left-right.

    ``images`` is ``B x H x W x 1``. ``seed`` may be any value accepted by
    ``numpy.random.default_rng`` (e.g. ``[seed, epoch, batch_index]``).
    """
    if pad < 0 or not 0.0 <= flip_prob <= 1.0:
        raise ValueError("pad must be >= 0 and flip_prob in [0, 1]")
    b, h, w = images.shape[:3]
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < flip_prob
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return (out, offsets) if return_offsets else out
