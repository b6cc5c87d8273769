"""Dataset ingestion: MNIST IDX files and synthetic Gaussian clusters."""
import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataFormatError
from .nn import Dataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ROOT_ENV = "LCA_DATA_ROOT"
MNIST_TRAIN_IMAGES = "train-images-idx3-ubyte.gz"
MNIST_TRAIN_LABELS = "train-labels-idx1-ubyte.gz"


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except (OSError, EOFError) as exc:
        raise DataFormatError(f"{path}: unreadable ({exc})") from None


def _parse_idx(raw, magic, ndim, path):
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise DataFormatError(f"{path}: payload has {len(body)} bytes, header implies {np.prod(dims)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def stratified_subset(labels, size, seed, n_classes=None):
    """Deterministic subset with ``size / C`` examples per class, returned sorted."""
    labels = np.asarray(labels)
    n_classes = n_classes or int(labels.max()) + 1
    if size % n_classes:
        raise ConfigError(f"subset size {size} is not divisible by {n_classes} classes")
    per = size // n_classes
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < per:
            raise ConfigError(f"class {c} has {idx.size} examples, need {per}")
        picked.append(rng.choice(idx, size=per, replace=False))
    return np.sort(np.concatenate(picked))


def load_mnist_idx(image_path, label_path, subset_size=None, subset_seed=0, n_classes=10):
    """Read IDX image/label files (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(image_path), IMAGE_MAGIC, 3, image_path)
    labels = _parse_idx(_read_bytes(label_path), LABEL_MAGIC, 1, label_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= n_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {n_classes})")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    name = f"mnist:{Path(image_path).name}"
    if subset_size is not None:
        idx = stratified_subset(y, subset_size, subset_seed, n_classes)
        X, y = X[idx], y[idx]
        name += f":stratified{subset_size}@{subset_seed}"
    return Dataset(X, y, n_classes, name)


def mnist_paths(root=None):
    root = Path(root or os.environ.get(DATA_ROOT_ENV) or Path.cwd() / "data" / "mnist")
    return root / MNIST_TRAIN_IMAGES, root / MNIST_TRAIN_LABELS


def gen_synthetic(n_samples, n_features, n_classes, separation=3.0, seed=0):
    """Gaussian class clusters with unit covariance; centers are ``separation`` apart on average."""
    if n_classes < 1 or n_features < 1:
        raise ConfigError("need at least one class and one feature")
    if n_samples < n_classes:
        raise ConfigError(f"n_samples={n_samples} is smaller than n_classes={n_classes}")
    if separation < 0:
        raise ConfigError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, n_features))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True) + 1e-12
    centers *= separation / np.sqrt(2.0)
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    X = centers[y] + rng.normal(size=(n_samples, n_features))
    return Dataset(X, y, n_classes, f"synthetic:{n_samples}x{n_features}x{n_classes}@{seed}")
