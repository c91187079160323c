"""Dataset loading (IDX, CIFAR-10 binary) and the anchor/positive/negative samplers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import DEFAULT_DTYPE

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072


class DatasetError(Exception):
    """Malformed or inconsistent dataset files."""


def _seed(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng([int(s) for s in seed])
    return np.random.default_rng(seed)


@dataclass
class LabeledDataset:
    """Images flattened to rows in [0, 1] with integer labels in ``[0, C)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_index: list[np.ndarray] = field(init=False, repr=False)
    position_in_class: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        self.class_index = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]
        self.position_in_class = np.empty(len(self.labels), dtype=np.int64)
        for idx in self.class_index:
            self.position_in_class[idx] = np.arange(len(idx))

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes)

    def check_nonempty_classes(self):
        empty = [c for c, idx in enumerate(self.class_index) if len(idx) == 0]
        if empty:
            raise DatasetError(f"classes without samples: {empty}")


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise DatasetError(f"{path}: truncated, expected {n} bytes, got {len(data)}")
    return data


def _read_idx(path, magic):
    path = Path(path)
    with open(path, "rb") as f:
        found, = struct.unpack(">i", _read_exact(f, 4, path))
        if found != magic:
            raise DatasetError(f"{path}: bad magic number, expected {magic}, found {found}")
        ndim = 3 if magic == IDX_IMAGE_MAGIC else 1
        dims = struct.unpack(f">{ndim}i", _read_exact(f, 4 * ndim, path))
        body = _read_exact(f, int(np.prod(dims)), path)
        if f.read(1):
            raise DatasetError(f"{path}: trailing bytes after {dims} payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(image_path, label_path, num_classes: int = 10) -> LabeledDataset:
    """Load an MNIST-style image/label IDX pair, scaling pixels by 1/255."""
    images = _read_idx(image_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise DatasetError(
            f"image count {len(images)} does not match label count {len(labels)}")
    flat = images.reshape(len(images), -1).astype(DEFAULT_DTYPE) / DEFAULT_DTYPE(255)
    return LabeledDataset(flat, labels.astype(np.int64), num_classes)


def load_cifar10(batch_paths: Sequence) -> LabeledDataset:
    """Load CIFAR-10 binary batches (label byte + 3072 RGB-plane bytes per record)."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() > 9:
            raise DatasetError(f"{path}: label byte {records[:, 0].max()} > 9")
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:])
    flat = np.concatenate(images).astype(DEFAULT_DTYPE) / DEFAULT_DTYPE(255)
    return LabeledDataset(flat, np.concatenate(labels), 10)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``(n, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    with open(image_path, "wb") as f:
        f.write(struct.pack(">4i", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">2i", IDX_LABEL_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def write_cifar10(path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``(n, 3072)`` and labels as CIFAR-10 binary records."""
    records = np.concatenate(
        [np.asarray(labels, np.uint8)[:, None], np.asarray(images, np.uint8)], axis=1)
    Path(path).write_bytes(records.tobytes())


# -- samplers ---------------------------------------------------------------

@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_idx: np.ndarray
    positive_idx: np.ndarray
    negative_idx: np.ndarray


@dataclass
class TupletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # (B, C-1, input_dim), one per non-anchor class in class order
    anchor_idx: np.ndarray
    positive_idx: np.ndarray
    negative_idx: np.ndarray  # (B, C-1)


def _draw_anchors(ds, batch_size, rng, anchors):
    if anchors is not None:
        return np.asarray(anchors, dtype=np.int64)
    if batch_size <= 0:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    return rng.integers(len(ds), size=batch_size)


def _draw_positives(ds, anchor_idx, rng):
    """Same-class partner for each anchor, never the anchor itself when the class allows."""
    labels = ds.labels[anchor_idx]
    out = np.empty_like(anchor_idx)
    for c in np.unique(labels):
        sel = np.flatnonzero(labels == c)
        members = ds.class_index[c]
        n = len(members)
        if n == 1:
            out[sel] = members[0]
            continue
        r = rng.integers(n - 1, size=len(sel))
        r += r >= ds.position_in_class[anchor_idx[sel]]
        out[sel] = members[r]
    return out


def _draw_from_classes(ds, classes, rng):
    sizes = np.array([len(idx) for idx in ds.class_index])
    pick = np.floor(rng.random(classes.shape) * sizes[classes]).astype(np.int64)
    out = np.empty_like(classes)
    for c in np.unique(classes):
        mask = classes == c
        out[mask] = ds.class_index[c][pick[mask]]
    return out


def sample_triplets(ds: LabeledDataset, batch_size: int, rng_seed, anchors=None) -> TripletBatch:
    """Random anchor/positive/negative triplets.

    Anchors are uniform over the dataset unless ``anchors`` is given.  The
    negative's class is uniform over the other classes and its member uniform
    within that class.
    """
    rng = _seed(rng_seed)
    a = _draw_anchors(ds, batch_size, rng, anchors)
    p = _draw_positives(ds, a, rng)
    la = ds.labels[a]
    neg_class = rng.integers(ds.num_classes - 1, size=len(a))
    neg_class += neg_class >= la
    n = _draw_from_classes(ds, neg_class, rng)
    return TripletBatch(ds.images[a], ds.images[p], ds.images[n], a, p, n)


def sample_tuplets(ds: LabeledDataset, batch_size: int, rng_seed, anchors=None) -> TupletBatch:
    """Anchor, positive and one random negative from every other class."""
    if ds.num_classes < 2:
        raise ValueError("tuplets need at least two classes")
    rng = _seed(rng_seed)
    a = _draw_anchors(ds, batch_size, rng, anchors)
    p = _draw_positives(ds, a, rng)
    C = ds.num_classes
    la = ds.labels[a]
    # other classes in ascending order for each anchor
    others = np.arange(C - 1)[None, :].repeat(len(a), axis=0)
    others += others >= la[:, None]
    n = _draw_from_classes(ds, others, rng)
    return TupletBatch(ds.images[a], ds.images[p], ds.images[n], a, p, n)


@dataclass
class RepresentativeSet:
    """One image per class; row ``c`` represents class ``c``."""

    images: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.images)


def select_representatives(ds: LabeledDataset, strategy: str = "first",
                           rng_seed=0) -> RepresentativeSet:
    ds.check_nonempty_classes()
    if strategy == "first":
        idx = np.array([members[0] for members in ds.class_index])
    elif strategy == "random":
        rng = _seed(rng_seed)
        idx = np.array([members[rng.integers(len(members))] for members in ds.class_index])
    else:
        raise ValueError(f"unknown representative strategy {strategy!r}")
    return RepresentativeSet(ds.images[idx].copy(), idx)


def embed_label_ff(x: np.ndarray, label, num_classes: int, mode: str = "pos",
                   rng_seed=None) -> np.ndarray:
    """Overwrite the first ``num_classes`` inputs with a one-hot label.

    Works on a single vector or a batch of rows (with one label per row).  In
    ``neg`` mode the encoded label is a uniformly drawn incorrect class.
    Returns a new array.
    """
    x = np.array(x, copy=True)
    if x.shape[-1] < num_classes:
        raise ValueError(f"input width {x.shape[-1]} < {num_classes} classes")
    label = np.asarray(label, dtype=np.int64)
    if np.any(label < 0) or np.any(label >= num_classes):
        raise ValueError(f"label {label} outside [0, {num_classes})")
    if mode == "neg":
        rng = _seed(rng_seed)
        shift = rng.integers(1, num_classes, size=label.shape)
        label = (label + shift) % num_classes
    elif mode != "pos":
        raise ValueError(f"mode must be 'pos' or 'neg', got {mode!r}")
    rows = x.reshape(-1, x.shape[-1])
    rows[:, :num_classes] = 0
    rows[np.arange(len(rows)), label.reshape(-1)] = 1
    return x


def batches(n: int, batch_size: int, rng_seed):
    """Seeded shuffled index batches covering ``range(n)`` once."""
    order = _seed(rng_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def gaussian_blobs(n: int = 400, dim: int = 20, num_classes: int = 2, separation: float = 4.0,
                   rng_seed=0) -> LabeledDataset:
    """Isotropic Gaussian clusters squashed into [0, 1] by a fixed affine map.

    Cluster centres sit ``separation`` standard deviations apart along random
    directions, so the classes are linearly separable with high probability.
    """
    rng = _seed(rng_seed)
    centres = rng.normal(size=(num_classes, dim))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True) / np.sqrt(2)
    labels = np.arange(n) % num_classes
    x = centres[labels] + rng.normal(scale=0.5, size=(n, dim))
    x = np.clip(0.5 + x / (2 * (separation + 2)), 0.0, 1.0)
    return LabeledDataset(x.astype(DEFAULT_DTYPE), labels, num_classes)
