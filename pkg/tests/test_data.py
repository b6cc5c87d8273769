import gzip
import struct

import numpy as np
import pytest

from losschange.data import (IMAGE_MAGIC, LABEL_MAGIC, gen_synthetic, load_mnist_idx, mnist_paths,
                             stratified_subset)
from losschange.exceptions import ConfigError, DataFormatError


def write_idx(path, arr, magic, gz=True):
    arr = np.asarray(arr, dtype=np.uint8)
    raw = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.tobytes()
    if gz:
        with gzip.open(path, "wb") as f:
            f.write(raw)
    else:
        path.write_bytes(raw)
    return path


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(40, 3, 3))
    labels = np.arange(40) % 4
    return (write_idx(tmp_path / "img.gz", images, IMAGE_MAGIC),
            write_idx(tmp_path / "lab.gz", labels, LABEL_MAGIC), images, labels)


@pytest.mark.parametrize("gz", [True, False])
def test_idx_reads_plain_and_gzip(tmp_path, gz):
    images = np.arange(2 * 4 * 4).reshape(2, 4, 4) % 256
    ip = write_idx(tmp_path / "i", images, IMAGE_MAGIC, gz)
    lp = write_idx(tmp_path / "l", [1, 0], LABEL_MAGIC, gz)
    ds = load_mnist_idx(ip, lp, n_classes=2)
    assert ds.features.shape == (2, 16) and ds.features.dtype == np.float64
    assert np.allclose(ds.features * 255, images.reshape(2, -1))
    assert ds.labels.tolist() == [1, 0]


def test_idx_rejects_bad_magic(tmp_path, idx_pair):
    ip, lp, images, labels = idx_pair
    bad = write_idx(tmp_path / "bad", labels, IMAGE_MAGIC)
    with pytest.raises(DataFormatError, match="magic"):
        load_mnist_idx(ip, bad)


def test_idx_rejects_truncation(tmp_path, idx_pair):
    ip, lp, images, labels = idx_pair
    raw = gzip.decompress(ip.read_bytes())
    short = tmp_path / "short"
    short.write_bytes(raw[:-5])
    with pytest.raises(DataFormatError, match="payload"):
        load_mnist_idx(short, lp)
    (tmp_path / "hdr").write_bytes(raw[:6])
    with pytest.raises(DataFormatError, match="header"):
        load_mnist_idx(tmp_path / "hdr", lp)
    (tmp_path / "gzcut").write_bytes(ip.read_bytes()[:30])
    with pytest.raises(DataFormatError):
        load_mnist_idx(tmp_path / "gzcut", lp)


def test_idx_count_mismatch_and_label_range(tmp_path, idx_pair):
    ip, lp, images, labels = idx_pair
    few = write_idx(tmp_path / "few", labels[:10], LABEL_MAGIC)
    with pytest.raises(DataFormatError, match="labels"):
        load_mnist_idx(ip, few)
    with pytest.raises(DataFormatError, match="outside"):
        load_mnist_idx(ip, lp, n_classes=3)


def test_stratified_subset_balanced_and_deterministic(idx_pair):
    ip, lp, images, labels = idx_pair
    ds = load_mnist_idx(ip, lp, subset_size=20, subset_seed=3, n_classes=4)
    assert np.bincount(ds.labels).tolist() == [5, 5, 5, 5]
    again = load_mnist_idx(ip, lp, subset_size=20, subset_seed=3, n_classes=4)
    assert np.array_equal(ds.features, again.features)
    other = stratified_subset(labels, 20, 4)
    assert not np.array_equal(other, stratified_subset(labels, 20, 3))
    with pytest.raises(ConfigError):
        stratified_subset(labels, 21, 0)
    with pytest.raises(ConfigError):
        stratified_subset(labels, 80, 0)


def test_stratified_subset_on_full_digit_scale():
    labels = np.random.default_rng(0).integers(0, 10, size=10_000)
    idx = stratified_subset(labels, 5000, 0)
    assert idx.size == 5000 and np.unique(idx).size == 5000
    assert np.all(np.bincount(labels[idx]) == 500)


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("LCA_DATA_ROOT", str(tmp_path))
    img, lab = mnist_paths()
    assert img.parent == tmp_path and lab.parent == tmp_path
    assert mnist_paths("/x")[0].parent.as_posix() == "/x"


def test_synthetic_deterministic_and_separated():
    a = gen_synthetic(300, 5, 3, separation=6.0, seed=2)
    b = gen_synthetic(300, 5, 3, separation=6.0, seed=2)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [100, 100, 100]
    means = np.array([a.features[a.labels == c].mean(0) for c in range(3)])
    nearest = np.argmin(((a.features[:, None] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(nearest == a.labels) > 0.9
    c = gen_synthetic(300, 5, 3, separation=6.0, seed=3)
    assert not np.array_equal(a.features, c.features)
    with pytest.raises(ConfigError):
        gen_synthetic(2, 5, 3)
