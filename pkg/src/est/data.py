"""Datasets: synthetic Gaussian blobs, label-first CSV, and IDX (MNIST-style) files."""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from est.errors import ConfigError, InputError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# per-coordinate noise of the synthetic blobs
BLOB_SIGMA = 0.25


@dataclass
class Dataset:
    inputs: np.ndarray  # (S, N, d_model)
    labels: np.ndarray  # (S,)
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 3:
            raise InputError(f"inputs must be (S, N, d_model), got shape {self.inputs.shape}")
        if len(self.labels) < 1 or len(self.labels) != self.inputs.shape[0]:
            raise InputError(
                f"need >= 1 sample and one label per sample, got {self.inputs.shape[0]} "
                f"inputs and {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise InputError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_tokens(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_model(self) -> int:
        return self.inputs.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)


def gen_synthetic(n_per_class: int, n_classes: int, n_tokens: int, d_model: int,
                  seed: int) -> Dataset:
    """Gaussian class clusters broadcast over tokens.

    Class means are standard normal draws, rescaled if needed so that every
    pair of means is at least ``8 * BLOB_SIGMA`` apart. Each sample is its
    class mean plus one shared offset and an independent per-token jitter,
    both with std ``BLOB_SIGMA``. Samples are ordered class by class.
    """
    for name, val in (("n_per_class", n_per_class), ("n_classes", n_classes),
                      ("n_tokens", n_tokens), ("d_model", d_model)):
        if val < 1:
            raise ConfigError(f"{name} must be >= 1, got {val}")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, d_model))
    if n_classes > 1:
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        closest = dist[~np.eye(n_classes, dtype=bool)].min()
        means *= max(1.0, 8 * BLOB_SIGMA / closest)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    s = len(labels)
    offset = BLOB_SIGMA * rng.standard_normal((s, 1, d_model))
    jitter = BLOB_SIGMA * rng.standard_normal((s, n_tokens, d_model))
    inputs = means[labels][:, None, :] + offset + jitter
    return Dataset(inputs, labels, n_classes)


def split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes ``round(test_fraction * count)`` to test."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return data.subset(np.sort(train_idx)), data.subset(np.sort(test_idx))


# -- CSV -------------------------------------------------------------------

def dataset_csv(data: Dataset) -> str:
    """One row per sample: label, then the N*d_model values row-major."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for x, y in zip(data.inputs, data.labels):
        w.writerow([int(y), *(repr(float(v)) for v in x.ravel())])
    return buf.getvalue()


def write_csv(data: Dataset, path) -> None:
    Path(path).write_text(dataset_csv(data))


def load_csv(path, n_tokens: int, d_model: int, n_classes: int | None = None) -> Dataset:
    width = n_tokens * d_model
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width + 1:
                raise ParseError(
                    f"{path}:{lineno}: expected {width + 1} fields (label + {n_tokens}x{d_model}),"
                    f" got {len(row)}"
                )
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not labels:
        raise ParseError(f"{path}: no samples")
    inputs = np.array(rows, dtype=np.float64).reshape(len(rows), n_tokens, d_model)
    if not np.isfinite(inputs).all():
        raise ParseError(f"{path}: non-finite value")
    labels = np.array(labels)
    if labels.min() < 0:
        raise ParseError(f"{path}: negative label")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(inputs, labels, k)


# -- IDX -------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise ParseError(f"{path}: truncated header at offset 0")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise ParseError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header != count:
        raise ParseError(
            f"{path}: expected {count} payload bytes at offset {header}, got {len(buf) - header}"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(image_path, label_path, n_tokens: int, n_classes: int = 10) -> Dataset:
    """Images scaled to [0, 1] and cut into ``n_tokens`` horizontal bands of rows."""
    images = _read_idx(image_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(label_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{image_path} has {images.shape[0]} images, {label_path} has "
                         f"{labels.shape[0]} labels")
    s, rows, cols = images.shape
    if rows % n_tokens:
        raise ConfigError(f"{rows} image rows cannot be split into {n_tokens} tokens")
    inputs = images.astype(np.float64).reshape(s, n_tokens, (rows // n_tokens) * cols) / 255.0
    return Dataset(inputs, labels.astype(np.int64), max(n_classes, int(labels.max()) + 1))


def write_idx(images: np.ndarray, labels: np.ndarray, image_path, label_path) -> None:
    """Writer for uint8 images/labels; used to build fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())
