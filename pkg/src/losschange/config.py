"""Run configuration: schema-validated YAML/JSON with unknown keys rejected."""
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import ConfigError
from .optim import LayerOverride, OptimConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(_Strict):
    n_samples: int = 600
    n_features: int = 4
    n_classes: int = 3
    separation: float = 3.0
    seed: int = 0


class QuadraticSpec(_Strict):
    dim: int = 50
    n_samples: int = 100
    noise: float = 0.1
    seed: int = 0


class DatasetConfig(_Strict):
    kind: Literal["mnist", "synthetic", "quadratic"] = "mnist"
    root: Optional[str] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    subset_size: Optional[int] = Field(5000, ge=1)
    subset_seed: int = 0
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    quadratic: QuadraticSpec = Field(default_factory=QuadraticSpec)


class LayerOverrideConfig(_Strict):
    lr_scale: float = Field(1.0, ge=0)
    frozen: bool = False
    momentum_override: Optional[float] = Field(None, ge=0, lt=1)
    freeze_from: Optional[int] = Field(None, ge=0)


class OptimizerConfig(_Strict):
    kind: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(256, ge=1)
    per_layer: Dict[str, LayerOverrideConfig] = Field(default_factory=dict)


class LcaConfig(_Strict):
    tol: float = Field(1e-3, gt=0)
    max_depth: int = 6
    per_class: bool = False
    first_order: bool = False
    n_jobs: int = Field(1, ge=1)

    @field_validator("max_depth")
    @classmethod
    def _depth(cls, v):
        if not 0 <= v <= 12:
            raise ValueError("max_depth must lie in [0, 12]")
        return v


class AnalysisConfig(_Strict):
    help: bool = True
    layers: bool = True
    oscillations: bool = True
    tails: bool = True
    sync: bool = True
    specialization: bool = True
    correlations: bool = False
    peaks_k: int = 20
    sync_trials: int = 10000
    sync_threshold: float = 1.0
    sync_shift: int = 2
    tail_sigma: float = 2.0
    tail_windows: Optional[List[List[int]]] = None
    mc_seed: int = 0


class RunConfig(_Strict):
    run_id: str = "run"
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    arch: List[int] = Field(default_factory=lambda: [784, 100, 50, 10], min_length=2)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    iterations: int = Field(880, ge=0)
    loss_every: int = Field(20, ge=0)
    lca: LcaConfig = Field(default_factory=LcaConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    output_dir: str = "runs"

    @field_validator("arch")
    @classmethod
    def _widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be positive")
        return v

    def optim_config(self):
        o = self.optimizer
        try:
            return OptimConfig(
                kind=o.kind, lr=o.lr, momentum=o.momentum, adam_beta1=o.adam_beta1,
                adam_beta2=o.adam_beta2, adam_eps=o.adam_eps, batch_size=o.batch_size,
                per_layer={k: LayerOverride(**v.model_dump()) for k, v in o.per_layer.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self):
        """Hash of everything that affects results.

        Left out: run id, output location and thread count (threaded LCA is bitwise identical).
        """
        return config_hash(self.model_dump(mode="json", exclude={"run_id": True, "output_dir": True,
                                                                 "lca": {"n_jobs"}}))

    def run_dir(self):
        return Path(self.output_dir) / self.run_id


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def parse_config(data):
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides=None):
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    return parse_config(data)


def set_dotted(d, key, value):
    """``set_dotted(d, "optimizer.lr", 0.1)`` sets ``d["optimizer"]["lr"]``."""
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a mapping")
    cur[parts[-1]] = value
    return d


def parse_override(text):
    """``"optimizer.lr=0.1"`` -> ``("optimizer.lr", 0.1)`` with YAML scalar typing."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)
