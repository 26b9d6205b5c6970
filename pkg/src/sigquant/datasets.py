"""Dataset ingestion: IDX, CSV, seeded Gaussian blobs and the bundled 8x8 digits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ParseError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
FORMATS = ("idx", "csv", "synthetic", "digits")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    input_shape: tuple
    n_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.input_shape, self.n_classes, self.mean, self.std)

    def split(self, val_fraction: float = 0.2, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded stratification-free shuffle split into (train, validation)."""
        if not 0 < val_fraction < 1:
            raise ConfigurationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(val_fraction * len(self))))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        n = min(n, len(self))
        return self.X[np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))]


def normalize(X: np.ndarray, mean=None, std=None):
    """Per-feature standardization; constant features keep unit scale."""
    flat = X.reshape(len(X), -1)
    if mean is None:
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return ((flat - mean) / std).reshape(X.shape), mean, std


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (images ``0x803`` or labels ``0x801``)."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise ParseError(f"{path}: truncated IDX header at byte {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x} at byte 0")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(data) < end:
        raise ParseError(f"{path}: truncated IDX dimensions at byte {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    count = int(np.prod(dims))
    if len(data) - end != count:
        raise ParseError(
            f"{path}: expected {count} data bytes after header, found {len(data) - end} (byte {end})"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=end).reshape(dims)


def _labels_path_for(path):
    base = os.path.basename(path)
    for a, b in (("images", "labels"), ("-idx3-", "-idx1-")):
        if a in base:
            base = base.replace(a, b)
    cand = os.path.join(os.path.dirname(path), base)
    if cand == path or not os.path.exists(cand):
        raise ConfigurationError(f"labels_path: cannot infer an IDX label file for {path}")
    return cand


def load_idx(path, labels_path=None):
    images = read_idx(path)
    labels = read_idx(labels_path or _labels_path_for(path))
    if images.ndim != 3:
        raise ParseError(f"{path}: IDX images must have 3 dimensions, found {images.ndim} (byte 3)")
    if labels.ndim != 1 or len(labels) != len(images):
        raise ParseError(f"label count {labels.shape} does not match image count {len(images)}")
    X = images.astype(np.float64)[:, None, :, :]
    return X, labels.astype(np.int64)


def load_csv(path, input_shape=None):
    """Rows of ``label,feature,...``; a non-numeric first row is treated as a header."""
    rows, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                label = int(parts[0])
                feats = [float(p) for p in parts[1:]]
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                bad = next((p for p in parts if not _is_number(p)), parts[0])
                raise ParseError(f"{path}:{lineno}: non-numeric value {bad!r}") from None
            if rows and len(feats) != len(rows[0]):
                raise ParseError(f"{path}:{lineno}: expected {len(rows[0])} features, found {len(feats)}")
            if not feats:
                raise ParseError(f"{path}:{lineno}: row has no features")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=np.float64)
    if input_shape is not None:
        X = X.reshape((len(X),) + tuple(input_shape))
    return X, np.asarray(labels, dtype=np.int64)


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def make_synthetic(seed=0, classes=4, n=2000, features=64, spread=3.0):
    """Seeded Gaussian blobs; square feature counts are shaped as 1-channel images."""
    from sklearn.datasets import make_blobs

    X, y = make_blobs(n_samples=n, n_features=features, centers=classes,
                      cluster_std=spread, random_state=seed)
    side = int(round(np.sqrt(features)))
    if side * side == features:
        X = X.reshape(n, 1, side, side)
    return X.astype(np.float64), y.astype(np.int64)


def load_digits_images():
    from sklearn.datasets import load_digits

    d = load_digits()
    return d.images.astype(np.float64)[:, None, :, :], d.target.astype(np.int64)


def load_dataset(path=None, format="synthetic", *, labels_path=None, input_shape=None,
                 seed=0, classes=4, n=2000, features=64, normalize_features=True) -> Dataset:
    """Load and standardize a labelled dataset.

    ``format`` is one of ``idx``, ``csv``, ``synthetic`` or ``digits``.
    """
    if format in ("idx", "csv") and not path:
        raise ConfigurationError(f"dataset_path: required for the {format} format")
    if format == "idx":
        X, y = load_idx(path, labels_path)
    elif format == "csv":
        X, y = load_csv(path, input_shape)
    elif format == "synthetic":
        X, y = make_synthetic(seed, classes, n, features)
    elif format == "digits":
        X, y = load_digits_images()
    else:
        raise ConfigurationError(f"dataset_format: unknown format {format!r}; expected one of {FORMATS}")
    if y.min() < 0:
        raise ParseError("labels must be non-negative integers")
    mean = std = None
    if normalize_features:
        X, mean, std = normalize(X)
    return Dataset(X, y, tuple(X.shape[1:]), int(y.max()) + 1, mean, std)
