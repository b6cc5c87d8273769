"""Append-only recording and random-access replay of parameter trajectories.

File layout ("LCAT", little-endian)::

    magic  b"LCAT"      4 bytes
    version             u16
    K                   u64   parameters per snapshot
    T                   u64   number of steps (T + 1 snapshots); 2**64-1 while unfinalized
    precision           u8    0 = float32, 1 = float64
    snapshots           (T + 1) * K values
    metadata            UTF-8 JSON
    crc                 u64   CRC-64/XZ of every preceding byte
"""
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from ._crc import CRC64, crc64_file
from .exceptions import IntegrityError, NumericError
from .optim import MinibatchSampler, OptimState, step

log = logging.getLogger(__name__)

MAGIC = b"LCAT"
VERSION = 1
_HEADER = struct.Struct("<4sHQQB")
UNFINALIZED = 2 ** 64 - 1
_PRECISION = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_PRECISION_FLAG = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def _flag(dtype):
    try:
        return _PRECISION_FLAG[np.dtype(dtype).newbyteorder("<")]
    except KeyError:
        raise ValueError(f"unsupported snapshot dtype {dtype}") from None


class TrajectoryWriter:
    """Streams snapshots to disk; ``finalize`` seals the file with count and checksum.

    Used as a context manager, an exception inside the block leaves a
    ``<path>.partial`` marker and an unfinalized header instead of a sealed file.
    """

    def __init__(self, path, n_params, dtype=np.float32):
        self.path = Path(path)
        self.n_params = int(n_params)
        self.dtype = np.dtype(dtype).newbyteorder("<")
        self.count = 0
        self._f = open(self.path, "wb")
        self._f.write(_HEADER.pack(MAGIC, VERSION, self.n_params, UNFINALIZED, _flag(self.dtype)))
        self._closed = False

    def append(self, theta):
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise ValueError(f"snapshot has shape {theta.shape}, expected ({self.n_params},)")
        if not np.all(np.isfinite(theta)):
            raise NumericError("non-finite parameters in snapshot", iteration=self.count)
        self._f.write(theta.astype(self.dtype, copy=False).tobytes())
        self.count += 1

    def finalize(self, meta=None):
        if self.count < 1:
            raise ValueError("cannot finalize a trajectory without snapshots")
        n_steps = self.count - 1
        self._f.write(json.dumps(meta or {}, sort_keys=True).encode("utf-8"))
        self._f.seek(0)
        self._f.write(_HEADER.pack(MAGIC, VERSION, self.n_params, n_steps, _flag(self.dtype)))
        self._f.flush()
        os.fsync(self._f.fileno())
        self._f.close()
        crc = crc64_file(self.path)
        with open(self.path, "ab") as f:
            f.write(struct.pack("<Q", crc))
        self._closed = True
        marker = self.path.with_name(self.path.name + ".partial")
        if marker.exists():
            marker.unlink()
        return self.path

    def abort(self, reason):
        if not self._closed:
            self._f.close()
            self._closed = True
        self.path.with_name(self.path.name + ".partial").write_text(str(reason) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and not self._closed:
            self.abort(f"{exc_type.__name__}: {exc}")
        return False


class Trajectory:
    """Snapshots theta_0..theta_T with run metadata.

    Backed either by a memory-mapped LCAT file (see :func:`load`) or by an
    in-memory array (:meth:`from_array`).
    """

    def __init__(self, snapshots, meta=None, path=None):
        self._snapshots = snapshots
        self.meta = dict(meta or {})
        self.path = path
        if snapshots.ndim != 2 or snapshots.shape[0] < 1:
            raise ValueError("snapshots must be a (T + 1, K) array")

    @classmethod
    def from_array(cls, snapshots, meta=None):
        return cls(np.asarray(snapshots), meta)

    @property
    def n_steps(self):
        return self._snapshots.shape[0] - 1

    T = n_steps

    @property
    def n_params(self):
        return self._snapshots.shape[1]

    @property
    def dtype(self):
        return self._snapshots.dtype

    def __len__(self):
        return self._snapshots.shape[0]

    def snapshot(self, t):
        if not 0 <= t <= self.n_steps:
            raise IndexError(f"snapshot {t} outside [0, {self.n_steps}]")
        return np.array(self._snapshots[t])

    def delta(self, t):
        """theta_{t+1} - theta_t in float64."""
        if not 0 <= t < self.n_steps:
            raise IndexError(f"step {t} outside [0, {self.n_steps})")
        return (self._snapshots[t + 1].astype(np.float64)
                - self._snapshots[t].astype(np.float64))

    def as_array(self):
        return np.asarray(self._snapshots)

    @property
    def layout(self):
        from .nn import LayerLayout
        if "arch" not in self.meta:
            return None
        return LayerLayout.from_arch(self.meta["arch"])


def delta(traj, t):
    return traj.delta(t)


def read_header(path):
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, k, t, prec = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported version {version}")
    if prec not in _PRECISION:
        raise IntegrityError(f"{path}: unknown precision flag {prec}")
    return {"K": k, "T": t, "dtype": _PRECISION[prec]}


def load(path, verify=True):
    """Open a finalized LCAT file; snapshots are memory-mapped for O(1) access."""
    path = Path(path)
    head = read_header(path)
    if head["T"] == UNFINALIZED:
        raise IntegrityError(f"{path}: trajectory was never finalized")
    k, t, dtype = head["K"], head["T"], head["dtype"]
    size = path.stat().st_size
    data_end = _HEADER.size + (t + 1) * k * dtype.itemsize
    if size < data_end + 8:
        raise IntegrityError(f"{path}: truncated ({size} bytes, need at least {data_end + 8})")
    with open(path, "rb") as f:
        f.seek(size - 8)
        stored = struct.unpack("<Q", f.read(8))[0]
        f.seek(data_end)
        meta_raw = f.read(size - 8 - data_end)
    if verify and crc64_file(path, end=size - 8) != stored:
        raise IntegrityError(f"{path}: checksum mismatch")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable metadata ({exc})") from None
    snaps = np.memmap(path, dtype=dtype, mode="r", offset=_HEADER.size, shape=(t + 1, k))
    return Trajectory(snaps, meta, path=path)


def record(path, objective, theta0, cfg, layout, n_iter, seed, meta=None,
           loss_every=20, dtype=None):
    """Train with ``cfg`` for ``n_iter`` steps, streaming every iterate to ``path``.

    ``objective`` provides ``n_samples``, ``minibatch_gradient(theta, idx)`` and
    ``loss(theta)``. Minibatch indices and losses are stored in the metadata so a
    run can be replayed and its deltas checked. A numeric failure finalizes the
    partial trajectory with ``status = "failed"`` and re-raises.
    """
    theta = np.asarray(theta0).copy()
    if dtype is not None:
        theta = theta.astype(dtype)
    sampler = MinibatchSampler(objective.n_samples, cfg.batch_size, seed)
    state = OptimState.zeros(layout.size)
    info = dict(meta or {})
    info.update({
        "seed": int(seed),
        "arch": layout.arch,
        "optim": cfg.to_dict(),
        "n_iter": int(n_iter),
        "sampling": "without-replacement epochs, reshuffled, batches straddle epochs",
    })
    batches, mb_losses, full_losses = [], [], {}
    with TrajectoryWriter(path, layout.size, theta.dtype) as writer:
        writer.append(theta)
        try:
            for t in range(n_iter):
                idx = sampler.next()
                loss, grad = objective.minibatch_gradient(theta, idx)
                theta, state = step(theta, state, grad, cfg, layout, iteration=t)
                writer.append(theta)
                batches.append(idx.tolist())
                mb_losses.append(float(loss))
                if loss_every and (t + 1) % loss_every == 0:
                    full_losses[t + 1] = objective.loss(theta)
                    log.info("iter %d  minibatch loss %.4f  train loss %.4f",
                             t + 1, loss, full_losses[t + 1])
        except NumericError as exc:
            info.update(status="failed", error=str(exc), minibatches=batches,
                        minibatch_loss=mb_losses, train_loss=full_losses)
            writer.finalize(info)
            raise
        info.update(status="ok", minibatches=batches, minibatch_loss=mb_losses,
                    train_loss={str(k): v for k, v in full_losses.items()})
        writer.finalize(info)
    return load(path)
