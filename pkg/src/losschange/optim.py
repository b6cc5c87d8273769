"""Mini-batch optimizers with per-layer learning-rate scaling, freezing and momentum."""
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .exceptions import ConfigError, NumericError


@dataclass(frozen=True)
class LayerOverride:
    lr_scale: float = 1.0
    frozen: bool = False
    momentum_override: float = None
    # freeze from this iteration onward (two-phase "freeze at argmin" runs)
    freeze_from: int = None

    def __post_init__(self):
        if self.lr_scale < 0:
            raise ConfigError(f"lr_scale must be >= 0, got {self.lr_scale}")
        if self.momentum_override is not None and not 0 <= self.momentum_override < 1:
            raise ConfigError(f"momentum_override must lie in [0, 1), got {self.momentum_override}")
        if self.freeze_from is not None and self.freeze_from < 0:
            raise ConfigError("freeze_from must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    per_layer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam constants")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        per_layer = {}
        for name, ov in dict(self.per_layer).items():
            per_layer[name] = ov if isinstance(ov, LayerOverride) else LayerOverride(**ov)
        object.__setattr__(self, "per_layer", per_layer)

    def to_dict(self):
        d = asdict(self)
        d["per_layer"] = {k: asdict(v) for k, v in self.per_layer.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_override(self, layer, **kw):
        per_layer = dict(self.per_layer)
        per_layer[layer] = replace(per_layer.get(layer, LayerOverride()), **kw)
        return replace(self, per_layer=per_layer)


@dataclass
class OptimState:
    buf1: np.ndarray  # SGD velocity or Adam first moment
    buf2: np.ndarray  # Adam second moment (unused for SGD)
    step_count: int = 0

    @classmethod
    def zeros(cls, n_params):
        return cls(np.zeros(n_params), np.zeros(n_params), 0)

    def copy(self):
        return OptimState(self.buf1.copy(), self.buf2.copy(), self.step_count)


def momentum_from_delay(delay):
    """Momentum whose exponential averaging lags by ``delay`` steps: d / (d + 1)."""
    if delay < 0:
        raise ConfigError(f"delay must be non-negative, got {delay}")
    return delay / (delay + 1.0)


def _check_layers(cfg, layout):
    unknown = set(cfg.per_layer) - set(layout.groups)
    if unknown:
        raise ConfigError(f"per-layer overrides for unknown layers: {sorted(unknown)}")


def _per_param(cfg, layout, iteration):
    """Per-parameter (lr scale, momentum, frozen mask) vectors for this iteration."""
    _check_layers(cfg, layout)
    base_mom = cfg.momentum if cfg.kind == "sgd" else cfg.adam_beta1
    scale = np.ones(layout.size)
    mom = np.full(layout.size, base_mom)
    frozen = np.zeros(layout.size, dtype=bool)
    for name, ov in cfg.per_layer.items():
        for sl in layout.group_slices(name):
            scale[sl] = ov.lr_scale
            if ov.momentum_override is not None:
                mom[sl] = ov.momentum_override
            if ov.frozen or (ov.freeze_from is not None and iteration >= ov.freeze_from):
                frozen[sl] = True
    return scale, mom, frozen


def step(theta, state, grad, cfg, layout, iteration=None):
    """One optimizer update. Returns ``(new_theta, new_state)``; inputs are not modified.

    Arithmetic is float64; the result is cast back to ``theta.dtype``.
    Frozen parameters keep their exact bits and zero optimizer buffers.
    """
    it = state.step_count if iteration is None else iteration
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != (layout.size,):
        raise ValueError(f"gradient length {g.shape} does not match K={layout.size}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite minibatch gradient", iteration=it)
    scale, mom, frozen = _per_param(cfg, layout, it)
    new = state.copy()
    new.step_count += 1
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.kind == "sgd":
            new.buf1 = mom * state.buf1 + g
            update = cfg.lr * scale * new.buf1
        else:
            b1, b2 = mom, cfg.adam_beta2
            new.buf1 = b1 * state.buf1 + (1.0 - b1) * g
            new.buf2 = b2 * state.buf2 + (1.0 - b2) * g * g
            m_hat = new.buf1 / (1.0 - b1 ** new.step_count)
            v_hat = new.buf2 / (1.0 - b2 ** new.step_count)
            update = cfg.lr * scale * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    new.buf1[frozen] = 0.0
    new.buf2[frozen] = 0.0
    update[frozen] = 0.0
    if not np.all(np.isfinite(update)):
        bad = int(np.flatnonzero(~np.isfinite(update))[0])
        layer = layout.locate(bad)[0]
        raise NumericError("non-finite parameter update", iteration=it, layer=layer)
    with np.errstate(over="ignore"):
        out = (theta.astype(np.float64) - update).astype(theta.dtype)
    out[frozen] = theta[frozen]
    if not np.all(np.isfinite(out)):
        layer = layout.locate(int(np.flatnonzero(~np.isfinite(out))[0]))[0]
        raise NumericError("parameters overflowed", iteration=it, layer=layer)
    return out, new


class MinibatchSampler:
    """Without-replacement epochs, reshuffled each epoch, cut into fixed-size batches.

    Batches may straddle an epoch boundary, so every batch has exactly ``batch_size``
    indices and each index appears once per epoch's worth of draws.
    """

    def __init__(self, n_samples, batch_size, seed):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        if batch_size > n_samples:
            raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n_samples}")
        self.n_samples = n_samples
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._pool = np.empty(0, dtype=np.int64)

    def next(self):
        while self._pool.size < self.batch_size:
            self._pool = np.concatenate([self._pool, self._rng.permutation(self.n_samples)])
        batch, self._pool = self._pool[:self.batch_size], self._pool[self.batch_size:]
        return batch

    __next__ = next

    def __iter__(self):
        return self


def sample_minibatch(data, batch_size, sampler=None, seed=0):
    """Next batch of row indices for ``data``; creates a sampler if none is given."""
    if sampler is None:
        sampler = MinibatchSampler(data.n_samples, batch_size, seed)
    return sampler.next()
