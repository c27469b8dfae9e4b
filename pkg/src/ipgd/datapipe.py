"""
Dataset ingestion, feature construction and partitioning.

Loaders read the MNIST IDX files (gzip or raw) and the CIFAR-10 binary
batches. Images are reduced to average-intensity and average-symmetry
features, expanded to a small polynomial design, standardized column-wise
and given an intercept column. The result is split into contiguous row
blocks, one per agent.

Cached design matrix format (version 1): ``<name>.bin`` holds ``A`` as
little-endian float64 in row-major order followed by ``b`` as little-endian
float64; ``<name>.json`` holds the shape, column stats, seed and version.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestError
from .numkit import SeededRng

PIPELINE_VERSION = 1
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


def default_data_dir() -> Path:
    return Path(os.environ.get("IPGD_DATA_DIR", "data"))


@dataclass
class RawImageSet:
    """``images`` has shape (n, channels, rows, cols) and dtype uint8."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError("images must be (n, channels, rows, cols)")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError("image and label counts differ")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]


@dataclass
class DesignMatrix:
    """Standardized features ``A`` (last column all ones) and labels in {-1, +1}."""

    A: np.ndarray
    b: np.ndarray
    column_stats: list  # (mean, std) per non-intercept column

    @property
    def shape(self):
        return self.A.shape

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.A, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.b, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- loaders

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise IngestError(f"missing dataset file {path}")
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise IngestError(f"cannot decompress {path}: {exc}") from None


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    """Decode one IDX blob (big-endian header, unsigned-byte payload)."""
    if len(data) < 4:
        raise IngestError("truncated IDX header", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IngestError(f"bad IDX magic {magic:#010x}, expected {expected_magic:#010x}", 0)
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise IngestError("truncated IDX header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:hdr])
    size = int(np.prod(dims))
    if len(data) < hdr + size:
        raise IngestError(f"IDX payload needs {size} bytes, found {len(data) - hdr}", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=hdr).reshape(dims)


def load_mnist(path=None, split: str = "train") -> RawImageSet:
    """
    Load an MNIST split from a directory holding the IDX files.

    Files may be gzipped (``.gz`` suffix or not) or raw.
    """
    root = Path(path) if path is not None else default_data_dir() / "mnist"
    if split not in MNIST_FILES:
        raise ConfigError(f"unknown split {split!r}")
    img_name, lab_name = MNIST_FILES[split]
    images = parse_idx(_read_bytes(root / img_name), MNIST_IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(root / lab_name), MNIST_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return RawImageSet(images[:, None, :, :], labels.astype(np.int64))


def parse_cifar_batch(data: bytes) -> RawImageSet:
    """Decode one CIFAR-10 binary batch: records of 1 label byte + 3x32x32 pixels."""
    if len(data) % CIFAR_RECORD:
        n_full = len(data) // CIFAR_RECORD
        raise IngestError(f"trailing partial record ({len(data) % CIFAR_RECORD} bytes)", n_full * CIFAR_RECORD)
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if np.any(labels > 9):
        bad = int(np.flatnonzero(labels > 9)[0])
        raise IngestError(f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return RawImageSet(images, labels)


def load_cifar10(path=None, split: str = "train") -> RawImageSet:
    """Load a CIFAR-10 split from a directory (or a single batch file)."""
    path = Path(path) if path is not None else default_data_dir() / "cifar10"
    if path.is_file():
        return parse_cifar_batch(_read_bytes(path))
    if split not in CIFAR_FILES:
        raise ConfigError(f"unknown split {split!r}")
    parts = [parse_cifar_batch(_read_bytes(path / name)) for name in CIFAR_FILES[split]]
    return RawImageSet(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


# ---------------------------------------------------------------- selection

def select_binary(raw: RawImageSet, class_a: int, class_b: int, n_target: int, rng: SeededRng) -> RawImageSet:
    """
    Sample ``n_target`` images uniformly from the union of two classes.

    ``class_a`` is relabeled +1 and ``class_b`` -1. The output order is the
    sampler's order, so the same seed always gives the same rows.
    """
    pool = np.flatnonzero((raw.labels == class_a) | (raw.labels == class_b))
    if n_target > pool.size:
        raise ConfigError(f"only {pool.size} instances of classes {class_a}/{class_b}, need {n_target}")
    idx = rng.gen.choice(pool, size=n_target, replace=False)
    labels = np.where(raw.labels[idx] == class_a, 1, -1).astype(np.int64)
    return RawImageSet(raw.images[idx], labels)


# ---------------------------------------------------------------- features

def intensity_symmetry(img, both_axes: bool = False) -> tuple[float, float]:
    """
    Average intensity and symmetry of one single-channel image.

    Pixels are scaled to [0, 1]. Symmetry is minus the mean absolute
    difference between the image and its left-right mirror, so a perfectly
    symmetric image scores 0. ``both_axes`` averages the left-right and
    up-down versions.
    """
    x = np.asarray(img, dtype=np.float64) / 255.0
    if x.ndim != 2:
        raise ConfigError("expected a single-channel 2-D image")
    sym = -float(np.mean(np.abs(x - x[:, ::-1])))
    if both_axes:
        sym = 0.5 * (sym - float(np.mean(np.abs(x - x[::-1, :]))))
    return float(x.mean()), sym


def raw_features(sel: RawImageSet, both_axes: bool = False) -> np.ndarray:
    """(n, 2*channels) array: intensity then symmetry for each channel in turn."""
    x = sel.images.astype(np.float64) / 255.0
    inten = x.mean(axis=(2, 3))
    sym = -np.abs(x - x[..., ::-1]).mean(axis=(2, 3))
    if both_axes:
        sym = 0.5 * (sym - np.abs(x - x[..., ::-1, :]).mean(axis=(2, 3)))
    out = np.empty((sel.n, 2 * sel.channels))
    out[:, 0::2] = inten
    out[:, 1::2] = sym
    return out


def mnist_poly(F) -> np.ndarray:
    a1, a2 = F[:, 0], F[:, 1]
    return np.column_stack([a1, a2, a1 * a1, a1 * a2, a2 * a2])


def cifar_poly(F) -> np.ndarray:
    return np.hstack([F, F * F])


def standardize(X, stats=None):
    """
    Shift each column by its mean and divide by its (population) std, then
    append a column of ones. ``stats`` reuses given (mean, std) pairs.
    """
    X = np.asarray(X, dtype=np.float64)
    if stats is None:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        for j, s in enumerate(std):
            if not s > 1e-12 * max(1.0, abs(mean[j])):
                raise ConfigError(f"feature column {j} has zero variance")
        # second pass removes the rounding left by the first
        Z = (X - mean) / std
        mean2 = Z.mean(axis=0)
        Z -= mean2
        std2 = Z.std(axis=0)
        Z /= std2
        mean = mean + mean2 * std
        std = std * std2
        stats = [(float(m), float(s)) for m, s in zip(mean, std)]
    else:
        if len(stats) != X.shape[1]:
            raise ConfigError("column stats do not match the feature count")
        mean = np.array([m for m, _ in stats])
        std = np.array([s for _, s in stats])
        Z = (X - mean) / std
    return np.hstack([Z, np.ones((X.shape[0], 1))]), stats


def build_design_mnist(sel: RawImageSet, both_axes: bool = False, stats=None) -> DesignMatrix:
    """``[a1 a2 a1^2 a1*a2 a2^2]`` standardized plus intercept: width 6."""
    if sel.channels != 1:
        raise ConfigError("MNIST design expects single-channel images")
    A, stats = standardize(mnist_poly(raw_features(sel, both_axes)), stats)
    return DesignMatrix(A, sel.labels.astype(np.float64), stats)


def build_design_cifar(sel: RawImageSet, both_axes: bool = False, stats=None) -> DesignMatrix:
    """Six per-channel features and their squares, standardized plus intercept: width 13."""
    if sel.channels != 3:
        raise ConfigError("CIFAR design expects three-channel images")
    A, stats = standardize(cifar_poly(raw_features(sel, both_axes)), stats)
    return DesignMatrix(A, sel.labels.astype(np.float64), stats)


def apply_column_stats(sel: RawImageSet, train: DesignMatrix, both_axes: bool = False) -> DesignMatrix:
    """Featurize a held-out split with the training split's column stats."""
    build = build_design_mnist if sel.channels == 1 else build_design_cifar
    return build(sel, both_axes, stats=train.column_stats)


def partition(design, m: int, rng: SeededRng | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Contiguous row blocks, one per agent, in stored order.

    ``rng`` is accepted for interface symmetry and unused: the split is
    deterministic.
    """
    A, b = (design.A, design.b) if isinstance(design, DesignMatrix) else design
    n = A.shape[0]
    if m < 1 or n % m:
        raise ConfigError(f"m={m} does not divide n={n}")
    k = n // m
    return [(A[i * k:(i + 1) * k], b[i * k:(i + 1) * k]) for i in range(m)]


# ---------------------------------------------------------------- cache

def save_design(design: DesignMatrix, path, seed=None, extra=None) -> Path:
    """Write ``<path>.bin`` and ``<path>.json``; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(design.A, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(design.b, dtype="<f8").tobytes())
    meta = {
        "version": PIPELINE_VERSION,
        "shape": list(design.A.shape),
        "column_stats": design.column_stats,
        "seed": seed,
        "sha256": design.fingerprint(),
        **(extra or {}),
    }
    side = path.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=2))
    return side


def load_design(path) -> DesignMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != PIPELINE_VERSION:
        raise IngestError(f"cache version {meta.get('version')} != {PIPELINE_VERSION}")
    n, p = meta["shape"]
    raw = path.with_suffix(".bin").read_bytes()
    need = 8 * (n * p + n)
    if len(raw) != need:
        raise IngestError(f"cache holds {len(raw)} bytes, expected {need}", min(len(raw), need))
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    design = DesignMatrix(flat[: n * p].reshape(n, p), flat[n * p:], [tuple(s) for s in meta["column_stats"]])
    if design.fingerprint() != meta["sha256"]:
        raise IngestError("cache checksum mismatch")
    return design


def mnist_design(data_dir=None, seed: int = 0, n_target: int = 10_000, classes=(1, 5), split="train", train=None, both_axes=False):
    """
    The full MNIST pipeline: load, select two digits, featurize.

    For the test split pass the training :class:`DesignMatrix` as ``train``
    so its column stats are reused; the whole split is used (no sampling).
    """
    raw = load_mnist(data_dir, split)
    if train is None:
        sel = select_binary(raw, classes[0], classes[1], n_target, SeededRng(seed, 0))
        return build_design_mnist(sel, both_axes)
    pool = np.flatnonzero((raw.labels == classes[0]) | (raw.labels == classes[1]))
    sel = RawImageSet(raw.images[pool], np.where(raw.labels[pool] == classes[0], 1, -1))
    return apply_column_stats(sel, train, both_axes)


def cifar_design(data_dir=None, seed: int = 0, n_target: int = 10_000, classes=(0, 1), split="train", train=None, both_axes=False):
    """CIFAR-10 counterpart of :func:`mnist_design` (airplane vs automobile by default)."""
    raw = load_cifar10(data_dir, split)
    if train is None:
        sel = select_binary(raw, classes[0], classes[1], n_target, SeededRng(seed, 0))
        return build_design_cifar(sel, both_axes)
    pool = np.flatnonzero((raw.labels == classes[0]) | (raw.labels == classes[1]))
    sel = RawImageSet(raw.images[pool], np.where(raw.labels[pool] == classes[0], 1, -1))
    return apply_column_stats(sel, train, both_axes)
