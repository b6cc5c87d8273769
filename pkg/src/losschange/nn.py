"""Dense ReLU networks over a flat parameter vector.

All parameters live in one flat array ``theta`` of length K. A
:class:`LayerLayout` maps flat indices to kernel/bias blocks. Kernels are
stored ``(fan_out, fan_in)`` row-major, so row ``r`` of a kernel holds the
incoming weights of output neuron ``r``.

Losses and gradients are always accumulated in float64, whatever the dtype
of ``theta``. Data are processed in fixed-size shards whose partial sums are
combined in a fixed pairwise tree, so results do not depend on how shards
are scheduled.
"""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DataFormatError, NumericError

DEFAULT_SHARD_SIZE = 1024


@dataclass(frozen=True)
class LayerEntry:
    name: str
    kind: str  # "dense-kernel" or "dense-bias"
    shape: tuple
    offset: int
    fan_in: int
    fan_out: int
    group: str

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.size)


class LayerLayout:
    """Index map from the flat parameter vector to named layer blocks."""

    def __init__(self, entries):
        self.entries = list(entries)
        offset = 0
        for e in self.entries:
            if e.offset != offset:
                raise ConfigError(f"layout entry {e.name} is not contiguous at offset {offset}")
            offset += e.size
        self.size = offset
        self.groups = list(dict.fromkeys(e.group for e in self.entries))

    @classmethod
    def from_arch(cls, arch):
        arch = [int(w) for w in arch]
        if len(arch) < 2:
            raise ConfigError(f"architecture needs at least input and output widths, got {arch}")
        if min(arch) < 1:
            raise ConfigError(f"layer widths must be >= 1, got {arch}")
        entries, offset = [], 0
        for li, (n_in, n_out) in enumerate(zip(arch[:-1], arch[1:])):
            group = f"dense_{li}"
            entries.append(LayerEntry(f"{group}/kernel", "dense-kernel", (n_out, n_in),
                                      offset, n_in, n_out, group))
            offset += n_in * n_out
            entries.append(LayerEntry(f"{group}/bias", "dense-bias", (n_out,),
                                      offset, n_in, n_out, group))
            offset += n_out
        return cls(entries)

    @classmethod
    def flat(cls, n_params, name="theta"):
        """Single unstructured block, for objectives that are not networks."""
        return cls([LayerEntry(name, "vector", (int(n_params),), 0, 0, 0, name)])

    @property
    def arch(self):
        kernels = self.kernels
        if not kernels:
            return None
        return [kernels[0].fan_in] + [k.fan_out for k in kernels]

    @property
    def kernels(self):
        return [e for e in self.entries if e.kind == "dense-kernel"]

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def group_slices(self, group):
        return [e.slice for e in self.entries if e.group == group]

    def group_index(self):
        """Length-K array giving each parameter's layer-group number."""
        out = np.empty(self.size, dtype=np.int32)
        for e in self.entries:
            out[e.slice] = self.groups.index(e.group)
        return out

    def neuron_index(self):
        """Length-K array giving each parameter's output neuron (global numbering).

        Kernel row ``r`` and bias element ``r`` of a layer belong to the same neuron.
        """
        out = np.zeros(self.size, dtype=np.int64)
        base = 0
        for k in self.kernels:
            rows = np.repeat(np.arange(k.fan_out), k.fan_in)
            out[k.slice] = base + rows
            bias = self.entry(k.group + "/bias")
            out[bias.slice] = base + np.arange(k.fan_out)
            base += k.fan_out
        return out

    def neuron_groups(self):
        """(group name, neuron count) pairs in neuron-index order."""
        return [(k.group, k.fan_out) for k in self.kernels]

    def locate(self, i):
        """Map a flat index to ``(entry name, row, col)``; col is None for biases."""
        if not 0 <= i < self.size:
            raise IndexError(f"index {i} outside [0, {self.size})")
        for e in self.entries:
            if e.offset <= i < e.offset + e.size:
                local = i - e.offset
                if e.kind == "dense-kernel":
                    return e.name, local // e.shape[1], local % e.shape[1]
                return e.name, local, None
        raise AssertionError("unreachable")

    def unpack(self, theta):
        """Views ``[(W, b), ...]`` into ``theta``."""
        out = []
        for k in self.kernels:
            b = self.entry(k.group + "/bias")
            out.append((theta[k.slice].reshape(k.shape), theta[b.slice]))
        return out

    def to_dict(self):
        return {"entries": [
            {"name": e.name, "kind": e.kind, "shape": list(e.shape), "offset": e.offset,
             "fan_in": e.fan_in, "fan_out": e.fan_out, "group": e.group}
            for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls(LayerEntry(x["name"], x["kind"], tuple(x["shape"]), x["offset"],
                              x["fan_in"], x["fan_out"], x["group"]) for x in d["entries"])

    def __eq__(self, other):
        return isinstance(other, LayerLayout) and self.entries == other.entries

    def __repr__(self):
        return f"LayerLayout(arch={self.arch}, K={self.size})"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = None
    name: str = "dataset"
    class_index: list = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataFormatError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataFormatError("labels must have one entry per feature row")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")
        self.class_index = [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes,
                       name or f"{self.name}[subset]")


def init_params(arch, seed, dtype=np.float32):
    """He-normal kernels (std = sqrt(2 / fan_in)) and zero biases."""
    if arch is None or len(arch) == 0:
        raise ConfigError("empty architecture")
    layout = LayerLayout.from_arch(arch)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size, dtype=np.float64)
    for k in layout.kernels:
        theta[k.slice] = rng.normal(0.0, np.sqrt(2.0 / k.fan_in), size=k.size)
    return theta.astype(dtype)


def _tree_sum(parts):
    """Pairwise reduction in a fixed order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _shards(idx, shard_size):
    return [idx[s:s + shard_size] for s in range(0, len(idx), shard_size)]


def _forward(params, X):
    """Returns hidden activations and logits."""
    acts = [X]
    h = X
    for li, (W, b) in enumerate(params):
        z = h @ W.T + b
        if li < len(params) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return acts, z


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")


def _shard_loss_grad(params, X, y, need_grad):
    acts, z = _forward(params, X)
    _check_finite(z, "logits")
    logp = _log_softmax(z)
    loss_sum = -logp[np.arange(len(y)), y].sum()
    if not need_grad:
        return loss_sum, None
    delta = np.exp(logp)
    delta[np.arange(len(y)), y] -= 1.0
    grads = []
    for li in range(len(params) - 1, -1, -1):
        W, _ = params[li]
        h = acts[li]
        grads.append(np.ravel(delta.T @ h))
        grads.append(delta.sum(axis=0))
        if li > 0:
            delta = (delta @ W) * (h > 0)
    # grads were collected last layer first as (kernel, bias) pairs
    ordered = []
    for li in range(len(params)):
        j = 2 * (len(params) - 1 - li)
        ordered += [grads[j], grads[j + 1]]
    return loss_sum, np.concatenate(ordered)


def _loss_grad_over(theta, layout, data, idx, need_grad, shard_size):
    params = [(W.astype(np.float64), b.astype(np.float64)) for W, b in layout.unpack(theta)]
    if data.n_features != layout.arch[0]:
        raise ConfigError(f"data width {data.n_features} does not match input width {layout.arch[0]}")
    losses, grads = [], []
    for shard in _shards(idx, shard_size):
        loss, grad = _shard_loss_grad(params, data.features[shard], data.labels[shard], need_grad)
        losses.append(loss)
        grads.append(grad)
    return losses, grads


def _resolve(data, subset):
    if subset is None:
        return np.arange(data.n_samples)
    idx = np.asarray(subset, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= data.n_samples):
        raise IndexError("subset index out of range")
    return idx


def loss_and_gradient(theta, layout, data, subset=None, shard_size=DEFAULT_SHARD_SIZE):
    """Mean cross-entropy over ``subset`` (default all rows) and its exact gradient."""
    idx = _resolve(data, subset)
    if idx.size == 0:
        raise ValueError("empty subset")
    losses, grads = _loss_grad_over(theta, layout, data, idx, True, shard_size)
    n = float(idx.size)
    grad = _tree_sum(grads) / n
    _check_finite(grad, "gradient")
    return float(_tree_sum(losses) / n), grad


def forward_loss(theta, layout, data, subset=None, shard_size=DEFAULT_SHARD_SIZE):
    idx = _resolve(data, subset)
    if idx.size == 0:
        raise ValueError("empty subset")
    losses, _ = _loss_grad_over(theta, layout, data, idx, False, shard_size)
    return float(_tree_sum(losses) / idx.size)


def full_gradient(theta, layout, data, subset=None, shard_size=DEFAULT_SHARD_SIZE):
    return loss_and_gradient(theta, layout, data, subset, shard_size)[1]


def per_class_gradients(theta, layout, data, shard_size=DEFAULT_SHARD_SIZE):
    """(C, K) array; row c is (1/N) * sum of per-example gradients over class c.

    Normalizing by the total N (not N_c) makes the rows sum to the full gradient.
    Empty classes get a zero row.
    """
    out = np.zeros((data.n_classes, layout.size), dtype=np.float64)
    n = float(data.n_samples)
    for c, idx in enumerate(data.class_index):
        if idx.size == 0:
            continue
        _, grads = _loss_grad_over(theta, layout, data, idx, True, shard_size)
        out[c] = _tree_sum(grads) / n
    _check_finite(out, "class gradient")
    return out


def predict_proba(theta, layout, X):
    params = [(W.astype(np.float64), b.astype(np.float64)) for W, b in layout.unpack(theta)]
    _, z = _forward(params, np.asarray(X, dtype=np.float64))
    return np.exp(_log_softmax(z))


class MLPObjective:
    """Full-training-set cross-entropy of a dense network, as seen by the LCA engine."""

    def __init__(self, layout, data, shard_size=DEFAULT_SHARD_SIZE):
        if data.n_features != layout.arch[0]:
            raise ConfigError(
                f"dataset width {data.n_features} does not match input width {layout.arch[0]}")
        self.layout = layout
        self.data = data
        self.shard_size = shard_size

    @property
    def n_params(self):
        return self.layout.size

    @property
    def n_classes(self):
        return self.data.n_classes

    @property
    def n_samples(self):
        return self.data.n_samples

    def loss(self, theta):
        return forward_loss(theta, self.layout, self.data, shard_size=self.shard_size)

    def gradient(self, theta):
        return full_gradient(theta, self.layout, self.data, shard_size=self.shard_size)

    def loss_and_gradient(self, theta):
        return loss_and_gradient(theta, self.layout, self.data, shard_size=self.shard_size)

    def class_gradients(self, theta):
        return per_class_gradients(theta, self.layout, self.data, shard_size=self.shard_size)

    def minibatch_gradient(self, theta, idx):
        return loss_and_gradient(theta, self.layout, self.data, subset=idx,
                                 shard_size=self.shard_size)
