"""Multi-seed studies: named presets of configuration arms, run and compared.

Runs are stored under ``<study dir>/runs/<config hash>`` and shared by every preset,
so arms that resolve to the same configuration (e.g. the baseline inside several
presets) are computed once. Comparison tables go to ``<study dir>/<preset>/``.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .exceptions import ConfigError
from .optim import momentum_from_delay
from .pipeline import provenance, run_pipeline, write_csv, write_json

log = logging.getLogger(__name__)

PRESETS = ("baseline", "freeze-first", "freeze-last", "freeze-at-argmin", "lr10x-last",
           "delay-sweep", "hyperparam-sweep")

HYPERPARAM_GRID = {
    "lr": [0.02, 0.05, 0.1],
    "momentum": [0.0, 0.5, 0.9],
    "batch_size": [64, 256, 1024],
}


def _layer_names(cfg):
    return [f"dense_{i}" for i in range(len(cfg.arch) - 1)]


def with_layer_override(cfg, layer, **kw):
    """Copy of ``cfg`` with a per-layer optimizer override.

    Overrides that change nothing (a momentum override equal to the global
    momentum, unit lr scale) are dropped so the config hash matches the plain run.
    """
    data = cfg.model_dump(mode="json")
    per = data["optimizer"]["per_layer"]
    ov = dict(per.get(layer, {}))
    ov.update(kw)
    base_mom = cfg.optimizer.momentum if cfg.optimizer.kind == "sgd" else cfg.optimizer.adam_beta1
    if ov.get("momentum_override") is not None and ov["momentum_override"] == base_mom:
        ov.pop("momentum_override")
    if ov.get("lr_scale") == 1.0:
        ov.pop("lr_scale")
    ov = {k: v for k, v in ov.items() if not (k == "frozen" and v is False) and v is not None}
    if ov:
        per[layer] = ov
    else:
        per.pop(layer, None)
    return parse_config(data)


def _with(cfg, **optimizer_fields):
    data = cfg.model_dump(mode="json")
    data["optimizer"].update(optimizer_fields)
    return parse_config(data)


def preset_arms(preset, base):
    """Ordered ``{arm name: RunConfig}`` for a single-phase preset."""
    layers = _layer_names(base)
    first, last = layers[0], layers[-1]
    if preset == "baseline":
        return {"baseline": base}
    if preset == "freeze-first":
        return {"baseline": base, "freeze-first": with_layer_override(base, first, frozen=True)}
    if preset == "freeze-last":
        return {"baseline": base, "freeze-last": with_layer_override(base, last, frozen=True)}
    if preset == "lr10x-last":
        return {"baseline": base, "lr10x-last": with_layer_override(base, last, lr_scale=0.1)}
    if preset == "delay-sweep":
        return {f"delay-{d}": with_layer_override(base, last, momentum_override=momentum_from_delay(d))
                for d in range(10)}
    if preset == "hyperparam-sweep":
        arms = {}
        for field, values in HYPERPARAM_GRID.items():
            for v in values:
                arms[f"{field}={v}"] = _with(base, **{field: v})
        return arms
    if preset == "freeze-at-argmin":
        raise ConfigError("freeze-at-argmin needs a first pass; use run_study")
    raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


def _seeded(cfg, seed, store, arm):
    data = cfg.model_dump(mode="json")
    data["seed"] = seed
    data["run_id"] = f"{arm}-s{seed}"
    data["output_dir"] = str(Path(store) / "runs")
    out = parse_config(data)
    data["run_id"] = out.config_hash()
    return parse_config(data)


def _job(args):
    cfg_data, keep, reuse = args
    return run_pipeline(parse_config(cfg_data), keep_artifacts=keep, reuse=reuse)


def _run_all(configs, n_jobs, keep, reuse):
    jobs = [(c.model_dump(mode="json"), keep, reuse) for c in configs]
    if n_jobs <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(n_jobs) as pool:
        return list(pool.map(_job, jobs))


def run_study(preset, base=None, seeds=(0, 1, 2, 3, 4), study_dir="studies", n_jobs=1,
              keep_artifacts=False, reuse=True):
    """Run every arm of ``preset`` for each seed and write a comparison table.

    Returns a dict with per-arm run summaries and aggregate statistics. Runs that
    fail the LCA gate (or diverge) are listed but left out of the aggregates.
    """
    base = base or RunConfig()
    store = Path(study_dir)
    study_dir = store / preset
    study_dir.mkdir(parents=True, exist_ok=True)
    if preset == "freeze-at-argmin":
        arms = {"baseline": base}
    else:
        arms = preset_arms(preset, base)
    plan = [(arm, s, _seeded(cfg, s, store, arm)) for arm, cfg in arms.items() for s in seeds]
    results = _run_all([c for _, _, c in plan], n_jobs, keep_artifacts, reuse)
    runs = {}
    for (arm, s, _), r in zip(plan, results):
        runs.setdefault(arm, {})[s] = r
    if preset == "freeze-at-argmin":
        first = _layer_names(base)[0]
        second = []
        for s, r in runs["baseline"].items():
            layers = (r.get("analysis") or {}).get("layers")
            if r["status"] != "ok" or not layers:
                continue
            t_star = int(layers["cumulative_argmin"][first])
            cfg = with_layer_override(base, first, freeze_from=t_star)
            second.append((s, _seeded(cfg, s, store, "freeze-at-argmin")))
        res2 = _run_all([c for _, c in second], n_jobs, keep_artifacts, reuse)
        runs["freeze-at-argmin"] = {s: r for (s, _), r in zip(second, res2)}
    table = compare_arms(runs)
    _write_table(study_dir, preset, base, table)
    out = {"preset": preset, "seeds": list(seeds), "arms": table, "runs": runs}
    write_json(study_dir / "study.json", out)
    return out


def _stat(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            "n": len(vals)}


def compare_arms(runs):
    """Aggregate passing runs per arm: layer totals, final loss and percent helped."""
    table = {}
    for arm, by_seed in runs.items():
        ok = {s: r for s, r in by_seed.items() if r["status"] == "ok"}
        failed = {s: r["status"] for s, r in by_seed.items() if r["status"] != "ok"}
        layer_vals = {}
        for r in ok.values():
            for name, v in r["analysis"]["layers"]["totals"].items():
                layer_vals.setdefault(name, []).append(v)
        table[arm] = {
            "n_ok": len(ok),
            "failed": failed,
            "layer_totals": {n: _stat(v) for n, v in layer_vals.items()},
            "final_train_loss": _stat([r.get("final_train_loss") for r in ok.values()]),
            "pct_helped": _stat([r["analysis"].get("help", {}).get("overall_pct_helped")
                                 for r in ok.values()]),
        }
    return table


def _write_table(study_dir, preset, base, table):
    prov = provenance(base)
    prov["run_id"] = f"study:{preset}"
    layer_names = sorted({n for row in table.values() for n in row["layer_totals"]})
    cols = ["arm", "n_ok", "failed"]
    for n in layer_names:
        cols += [f"{n}_mean", f"{n}_std"]
    cols += ["final_loss_mean", "final_loss_std", "pct_helped_mean", "pct_helped_std"]
    rows = []
    for arm, row in table.items():
        r = [arm, row["n_ok"], " ".join(f"s{s}:{st}" for s, st in row["failed"].items())]
        for n in layer_names:
            st = row["layer_totals"].get(n, {})
            r += [st.get("mean"), st.get("std")]
        r += [row["final_train_loss"]["mean"], row["final_train_loss"]["std"],
              row["pct_helped"]["mean"], row["pct_helped"]["std"]]
        rows.append(r)
    write_csv(study_dir / "comparison.csv", cols, rows, prov)
