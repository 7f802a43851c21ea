"""Datasets, class-based retain/forget partitioning, and raw-format loaders.

All images are float32 arrays shaped (N, H, W, C) normalized to the range
declared by the dataset, labels are integer class ids. Sample reads go
through an auditable counter so the unlearning methods can prove they never
touched real data.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import pickle
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ZeroShotViolation(RuntimeError):
    """A dataset sample was read inside a no-read (unlearning) phase."""


class ReadCounter:
    """Counts sample-array reads, bucketed by a named phase.

    A partition view shares its parent dataset's counter, so reads through
    any view are attributed to the underlying data.
    """

    def __init__(self):
        self.total = 0
        self.by_phase: dict[str, int] = {}
        self._phase = "default"
        self._forbidden = False

    def record(self, n: int = 1) -> None:
        if self._forbidden:
            raise ZeroShotViolation(
                f"sample read during no-read phase {self._phase!r}"
            )
        self.total += n
        self.by_phase[self._phase] = self.by_phase.get(self._phase, 0) + n

    @contextmanager
    def phase(self, name: str):
        prev = self._phase
        self._phase = name
        try:
            yield self
        finally:
            self._phase = prev

    @contextmanager
    def forbid_reads(self, name: str):
        """Raise ZeroShotViolation on any read until the context exits."""
        prev_phase, prev_forbidden = self._phase, self._forbidden
        self._phase, self._forbidden = name, True
        try:
            yield self
        finally:
            self._phase, self._forbidden = prev_phase, prev_forbidden

    def reads_in(self, name: str) -> int:
        return self.by_phase.get(name, 0)


class LabeledDataset:
    """Image classification dataset with labels in {0..num_classes-1}.

    `images` is a counted accessor; use `.peek_images()` only in code that is
    explicitly exempt from the read audit (e.g. integrity checks in tests).
    """

    def __init__(self, images, labels, num_classes, split_tag="train",
                 value_range=(0.0, 1.0), name="dataset", counter=None,
                 source_indices=None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images vs {len(labels)} labels")
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError("label outside {0..num_classes-1}")
        if split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be train or test, got {split_tag!r}")
        self._images = images
        self.labels = labels
        self.num_classes = int(num_classes)
        self.split_tag = split_tag
        self.value_range = (float(value_range[0]), float(value_range[1]))
        self.name = name
        self.counter = counter if counter is not None else ReadCounter()
        # Rows of this dataset expressed as indices into the dataset it was
        # sliced from; identity for a base dataset.
        self.source_indices = (np.arange(len(labels)) if source_indices is None
                               else np.asarray(source_indices))

    def __len__(self):
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        self.counter.record(len(self._images))
        return self._images

    def peek_images(self) -> np.ndarray:
        """Uncounted access; for audits and integrity checks only."""
        return self._images

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self._images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, name=None) -> "LabeledDataset":
        """Index-stable view sharing the parent's read counter."""
        indices = np.asarray(indices)
        return LabeledDataset(
            self._images[indices], self.labels[indices], self.num_classes,
            split_tag=self.split_tag, value_range=self.value_range,
            name=name or f"{self.name}[subset]", counter=self.counter,
            source_indices=self.source_indices[indices])

    def batches(self, batch_size, shuffle=False, rng=None):
        """Yield (images, labels) batches; counts one read per sample."""
        order = np.arange(len(self))
        if shuffle:
            (rng or np.random.default_rng()).shuffle(order)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            self.counter.record(len(idx))
            yield self._images[idx], self.labels[idx]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self._images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


@dataclass
class ClassPartition:
    """A dataset split by class membership into retain and forget views."""

    base: LabeledDataset
    forget_classes: frozenset
    retain_classes: frozenset = field(init=False)
    forget_view: LabeledDataset = field(init=False)
    retain_view: LabeledDataset = field(init=False)

    def __post_init__(self):
        all_classes = frozenset(range(self.base.num_classes))
        self.forget_classes = frozenset(int(c) for c in self.forget_classes)
        if not self.forget_classes:
            raise ValueError("forget_classes must be nonempty")
        if not self.forget_classes <= all_classes:
            raise ValueError(f"unknown class ids: {sorted(self.forget_classes - all_classes)}")
        if self.forget_classes == all_classes:
            raise ValueError("cannot forget every class; nothing to retain")
        self.retain_classes = all_classes - self.forget_classes
        mask = np.isin(self.base.labels, sorted(self.forget_classes))
        self.forget_view = self.base.subset(np.flatnonzero(mask),
                                            name=f"{self.base.name}[forget]")
        self.retain_view = self.base.subset(np.flatnonzero(~mask),
                                            name=f"{self.base.name}[retain]")

    @property
    def num_classes(self) -> int:
        return self.base.num_classes


def partition(dataset: LabeledDataset, forget_classes) -> ClassPartition:
    """Split a dataset into retain/forget views by class id."""
    return ClassPartition(dataset, frozenset(forget_classes))


def synthetic_dataset(num_classes, per_class, image_shape=(8, 8, 1),
                      seed=0, split_tag="train", noise_scale=0.06) -> LabeledDataset:
    """Deterministic well-separated class-blob images for fast tests.

    Each class gets a fixed smooth prototype image; samples are the prototype
    plus small pixel noise, so a small CNN separates the classes in a few
    epochs. Same seed, same bytes.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    h, w, c = image_shape
    rng = np.random.default_rng(seed)
    # Prototypes are low-frequency so they survive light blurring/downsampling.
    coarse = rng.uniform(0.15, 0.85, size=(num_classes, max(2, h // 2), max(2, w // 2), c))
    protos = np.stack([
        np.kron(coarse[k], np.ones((2, 2, 1)))[:h, :w, :] for k in range(num_classes)
    ]).astype(np.float32)
    # Per-split sub-rng keeps train/test disjoint but both seeded.
    sample_rng = np.random.default_rng(rng.integers(2**63) + (1 if split_tag == "test" else 0))
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = sample_rng.normal(0.0, noise_scale, size=(len(labels), h, w, c))
    images = np.clip(protos[labels] + noise, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images, labels, num_classes, split_tag=split_tag,
                          value_range=(0.0, 1.0),
                          name=f"synthetic{num_classes}x{per_class}")


_DIGITS_TEST_FRACTION = 0.2


def digits_dataset(split_tag="train") -> LabeledDataset:
    """Real 8x8 handwritten-digit images bundled with scikit-learn.

    Deterministic stratified 80/20 train/test split; serves as the
    desk-scale stand-in when the full MNIST raw files are not on disk.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = (raw.images / 16.0).astype(np.float32)[..., None]
    labels = raw.target.astype(np.int64)
    rng = np.random.default_rng(2023)
    test_idx = []
    for k in range(10):
        k_idx = np.flatnonzero(labels == k)
        k_idx = k_idx[rng.permutation(len(k_idx))]
        test_idx.append(k_idx[: int(len(k_idx) * _DIGITS_TEST_FRACTION)])
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    keep = test_mask if split_tag == "test" else ~test_mask
    return LabeledDataset(images[keep], labels[keep], 10, split_tag=split_tag,
                          value_range=(0.0, 1.0), name="digits")


def _read_idx(path):
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        _zero, dtype_code, ndim = struct.unpack(">HBB", f.read(4))
        if dtype_code != 0x08:
            raise ValueError(f"unsupported idx dtype code {dtype_code:#x} in {path}")
        shape = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(shape)


def _find_idx(root, stem):
    for suffix in ("-ubyte", "-ubyte.gz", ".idx3-ubyte", ".idx1-ubyte"):
        for sep in ("-idx3", "-idx1", ""):
            path = os.path.join(root, stem + sep + suffix)
            if os.path.exists(path):
                return path
    raise FileNotFoundError(f"no idx file for {stem!r} under {root}")


def mnist_dataset(root, split_tag="train") -> LabeledDataset:
    """MNIST from raw idx files under `root` (gzipped or plain)."""
    stem = "train" if split_tag == "train" else "t10k"
    images = _read_idx(_find_idx(root, f"{stem}-images"))
    labels = _read_idx(_find_idx(root, f"{stem}-labels"))
    images = (images.astype(np.float32) / 255.0)[..., None]
    return LabeledDataset(images, labels.astype(np.int64), 10,
                          split_tag=split_tag, value_range=(0.0, 1.0),
                          name="mnist")


def cifar10_dataset(root, split_tag="train") -> LabeledDataset:
    """CIFAR-10 from the python-pickle batch files under `root`."""
    batch_dir = root
    nested = os.path.join(root, "cifar-10-batches-py")
    if os.path.isdir(nested):
        batch_dir = nested
    names = [f"data_batch_{i}" for i in range(1, 6)] if split_tag == "train" else ["test_batch"]
    imgs, labels = [], []
    for name in names:
        with open(os.path.join(batch_dir, name), "rb") as f:
            entry = pickle.load(f, encoding="bytes")
        imgs.append(entry[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(np.asarray(entry[b"labels"]))
    images = np.concatenate(imgs).astype(np.float32) / 255.0
    return LabeledDataset(images, np.concatenate(labels).astype(np.int64), 10,
                          split_tag=split_tag, value_range=(0.0, 1.0),
                          name="cifar10")


def svhn_dataset(root, split_tag="train") -> LabeledDataset:
    """SVHN from the cropped-digit .mat files under `root` (label 10 -> 0)."""
    from scipy.io import loadmat

    mat = loadmat(os.path.join(root, f"{'train' if split_tag == 'train' else 'test'}_32x32.mat"))
    images = mat["X"].transpose(3, 0, 1, 2).astype(np.float32) / 255.0
    labels = mat["y"].reshape(-1).astype(np.int64) % 10
    return LabeledDataset(images, labels, 10, split_tag=split_tag,
                          value_range=(0.0, 1.0), name="svhn")


DATA_ROOT_ENV = "ZSU_DATA_ROOT"


def data_root(override=None) -> str:
    return override or os.environ.get(DATA_ROOT_ENV, os.path.expanduser("~/.zsunlearn/data"))


def load_dataset(spec: str, split_tag="train", root=None) -> LabeledDataset:
    """Resolve a dataset spec string.

    Supported: "digits", "mnist", "cifar10", "svhn",
    "synthetic:<classes>x<per_class>[@<H>x<W>x<C>][#<seed>]".
    """
    if spec.startswith("synthetic"):
        body = spec.split(":", 1)[1] if ":" in spec else "3x40"
        seed = 0
        if "#" in body:
            body, seed_s = body.split("#")
            seed = int(seed_s)
        shape = (8, 8, 1)
        if "@" in body:
            body, shape_s = body.split("@")
            shape = tuple(int(v) for v in shape_s.split("x"))
        k, per = (int(v) for v in body.split("x"))
        return synthetic_dataset(k, per, image_shape=shape, seed=seed, split_tag=split_tag)
    if spec == "digits":
        return digits_dataset(split_tag)
    loaders = {"mnist": mnist_dataset, "cifar10": cifar10_dataset, "svhn": svhn_dataset}
    if spec in loaders:
        return loaders[spec](os.path.join(data_root(root), spec), split_tag)
    raise ValueError(f"unknown dataset spec {spec!r}")


DESCRIPTOR_VERSION = 1


def write_descriptor(dataset: LabeledDataset, path) -> str:
    """Persist the dataset descriptor (shape, classes, normalization, checksum)."""
    desc = {
        "descriptor_version": DESCRIPTOR_VERSION,
        "name": dataset.name,
        "split_tag": dataset.split_tag,
        "num_samples": len(dataset),
        "num_classes": dataset.num_classes,
        "image_shape": list(dataset.image_shape),
        "value_range": list(dataset.value_range),
        "class_counts": dataset.class_counts().tolist(),
        "source_checksum": dataset.checksum(),
    }
    with open(path, "w") as f:
        json.dump(desc, f, indent=2, sort_keys=True)
        f.write("\n")
    return str(path)


def read_descriptor(path) -> dict:
    with open(path) as f:
        desc = json.load(f)
    if desc.get("descriptor_version") != DESCRIPTOR_VERSION:
        raise ValueError(f"unsupported descriptor version in {path}")
    return desc
