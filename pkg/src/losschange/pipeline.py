"""Single-run pipeline: train, integrate, analyze, with CSV/JSON reports per run directory."""
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import analysis as an
from .config import RunConfig
from .data import DATA_ROOT_ENV, gen_synthetic, load_mnist_idx, mnist_paths
from .exceptions import ConfigError, ContractError, LcaGateError, NumericError
from .lca import (MAX_CUMULATIVE_ERROR_PCT, compute_lca, compute_lca_per_class,
                  load_class_tensor, read_lca, save_class_tensor, write_lca)
from .nn import LayerLayout, MLPObjective, init_params
from .objectives import QuadraticObjective
from .trajectory import load as load_trajectory, record

log = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.lcat"
LCA_FILE = "lca.lcam"
SUMMARY_FILE = "summary.json"
ANALYSIS_FILE = "analysis.json"
CLASS_FILES = {"layer": "class_lca_layer.npz", "neuron": "class_lca_neuron.npz"}


# front ends that cannot change what a run computes
_NOT_FINGERPRINTED = {"__init__.py", "__main__.py", "cli.py", "estimators.py"}


def code_fingerprint():
    """Hash of the sources a run depends on, used to invalidate cached run summaries."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        if p.name in _NOT_FINGERPRINTED:
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


# --- problem construction ---------------------------------------------------

@dataclass
class Problem:
    objective: object
    layout: LayerLayout
    theta0: np.ndarray
    dataset: object = None


def load_dataset(ds):
    if ds.kind == "synthetic":
        s = ds.synthetic
        return gen_synthetic(s.n_samples, s.n_features, s.n_classes, s.separation, s.seed)
    if ds.kind != "mnist":
        raise ConfigError(f"dataset kind {ds.kind!r} has no example data")
    if (ds.images is None) != (ds.labels is None):
        raise ConfigError("dataset.images and dataset.labels must be given together")
    if ds.images is not None:
        images, labels = Path(ds.images), Path(ds.labels)
    else:
        images, labels = mnist_paths(ds.root)
    for p in (images, labels):
        if not p.exists():
            raise ConfigError(f"{p} not found; set dataset.root or ${DATA_ROOT_ENV}")
    return load_mnist_idx(images, labels, ds.subset_size, ds.subset_seed)


def build_problem(cfg):
    if cfg.dataset.kind == "quadratic":
        q = cfg.dataset.quadratic
        obj = QuadraticObjective.random(q.dim, q.seed, q.n_samples, q.noise)
        theta0 = np.random.default_rng(cfg.seed).normal(size=q.dim).astype(np.float32)
        return Problem(obj, LayerLayout.flat(q.dim), theta0)
    data = load_dataset(cfg.dataset)
    arch = list(cfg.arch)
    if len(arch) < 2:
        raise ConfigError("arch needs at least an input and an output width")
    if arch[0] != data.n_features or arch[-1] != data.n_classes:
        raise ConfigError(f"arch {arch} does not match data with {data.n_features} features "
                          f"and {data.n_classes} classes")
    layout = LayerLayout.from_arch(arch)
    return Problem(MLPObjective(layout, data), layout, init_params(arch, cfg.seed), data)


# --- CSV with provenance ----------------------------------------------------

def provenance(cfg):
    return {"run_id": cfg.run_id, "config_hash": cfg.config_hash(),
            "tol": cfg.lca.tol, "max_depth": cfg.lca.max_depth}


def write_csv(path, columns, rows, prov):
    """CSV whose first line is ``# key=value,...`` provenance, then the column header."""
    with open(path, "w", newline="") as f:
        f.write("# " + ",".join(f"{k}={v}" for k, v in prov.items()) + "\n")
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)
    return Path(path)


def read_csv(path):
    """Returns ``(provenance, columns, rows)``; rows are lists of strings."""
    with open(path, newline="") as f:
        first = f.readline()
        prov = {}
        if first.startswith("#"):
            for item in first[1:].strip().split(","):
                k, _, v = item.partition("=")
                prov[k.strip()] = v
        else:
            f.seek(0)
        reader = csv.reader(f)
        columns = next(reader)
        return prov, columns, [r for r in reader]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=1))


# --- train ------------------------------------------------------------------

def cmd_train(cfg, problem=None):
    """Train and record; writes the trajectory, a training log CSV and the resolved config."""
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(
        yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))
    problem = problem or build_problem(cfg)
    path = run_dir / TRAJECTORY_FILE
    meta = {"run_id": cfg.run_id, "config_hash": cfg.config_hash(),
            "dataset": getattr(problem.dataset, "name", cfg.dataset.kind),
            "layout": problem.layout.to_dict()}
    try:
        traj = record(path, problem.objective, problem.theta0, cfg.optim_config(),
                      problem.layout, cfg.iterations, cfg.seed, meta, cfg.loss_every)
    finally:
        if path.exists():
            _write_train_log(cfg, path)
    return traj


def _write_train_log(cfg, path):
    try:
        meta = load_trajectory(path, verify=False).meta
    except (IOError, ValueError):
        return
    full = {int(k): v for k, v in meta.get("train_loss", {}).items()}
    rows = [(t + 1, mb, full.get(t + 1, "")) for t, mb in enumerate(meta.get("minibatch_loss", []))]
    write_csv(cfg.run_dir() / "train_log.csv", ["iteration", "minibatch_loss", "train_loss"],
              rows, provenance(cfg))


def _layout_for(traj, lca_layout=None):
    if lca_layout is not None:
        return lca_layout
    if traj is not None and traj.meta.get("layout"):
        return LayerLayout.from_dict(traj.meta["layout"])
    if traj is not None and traj.layout is not None:
        return traj.layout
    return None


# --- integrate --------------------------------------------------------------

def cmd_lca(traj_path, cfg, problem=None, out_dir=None):
    """LCA for a finalized trajectory; writes the LCAM file, residual CSV and optional extras.

    Files are written before the cumulative-error gate is checked, so a failing
    run can still be inspected. Raises :class:`LcaGateError` on gate failure.
    """
    traj = load_trajectory(traj_path)
    problem = problem or build_problem(cfg)
    if problem.objective.n_params != traj.n_params:
        raise ContractError(f"trajectory has K={traj.n_params}, config builds "
                            f"K={problem.objective.n_params}")
    layout = _layout_for(traj) or problem.layout
    run_dir = Path(out_dir) if out_dir is not None else cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)
    t0 = time.time()
    lca = compute_lca(traj, problem.objective, cfg.lca.tol, cfg.lca.max_depth, gate=False,
                      dtype=np.float32, n_jobs=cfg.lca.n_jobs)
    lca.meta = dict(prov, trajectory=str(traj_path), seconds=time.time() - t0)
    passed = abs(lca.cumulative_error_pct) < MAX_CUMULATIVE_ERROR_PCT
    extra = {"gate_passed": passed}
    if cfg.lca.first_order:
        fo = compute_lca(traj, problem.objective, method="first_order", gate=False,
                         dtype=np.float32, track_signs=False)
        fo_sum = {k: v for k, v in fo.summary().items() if k != "flagged_iterations"}
        extra["first_order"] = fo_sum
        write_json(run_dir / "first_order.json", fo_sum)
        del fo
    lca_path = write_lca(run_dir / LCA_FILE, lca, layout, extra=extra)
    flagged = lca.flagged
    rows = [(t, lca.loss[t], lca.loss[t + 1], lca.loss[t + 1] - lca.loss[t], lca.row_sum[t],
             lca.iter_error[t], int(lca.depth[t]), int(flagged[t])) for t in range(lca.n_steps)]
    write_csv(run_dir / "lca_errors.csv",
              ["iteration", "loss_before", "loss_after", "loss_change", "allocated",
               "residual", "depth", "flagged"], rows, prov)
    if cfg.lca.per_class:
        aggs = ["layer"] + (["neuron"] if layout.kernels else [])
        tensors = compute_lca_per_class(traj, problem.objective, lca, layout, aggs)
        for name, tensor in tensors.items():
            save_class_tensor(run_dir / CLASS_FILES[name], tensor)
    log.info("lca %s: cumulative error %.4f%%, %d flagged, depths %s", lca_path,
             lca.cumulative_error_pct, int(flagged.sum()), lca.summary()["depth_histogram"])
    if not passed:
        worst = lca.worst_iterations()
        raise LcaGateError(f"cumulative LCA error {lca.cumulative_error_pct:.3f}% exceeds "
                           f"{MAX_CUMULATIVE_ERROR_PCT}%; worst iterations {worst}",
                           lca=lca, worst_iterations=worst)
    return lca


# --- analyze ----------------------------------------------------------------

def cmd_analyze(lca_path, traj_path=None, cfg=None, out_dir=None, class_dir=None):
    """Run the analyses enabled in ``cfg.analysis`` and write CSVs plus ``analysis.json``.

    Analyses whose inputs are missing are skipped with a notice in the report.
    """
    cfg = cfg or RunConfig()
    toggles = cfg.analysis
    lca, lca_layout, side = read_lca(lca_path)
    traj = load_trajectory(traj_path) if traj_path is not None else None
    if traj is not None and (traj.n_steps != lca.n_steps or traj.n_params != lca.n_params):
        raise ContractError(f"trajectory (T={traj.n_steps}, K={traj.n_params}) does not match "
                            f"LCA (T={lca.n_steps}, K={lca.n_params})")
    layout = _layout_for(traj, lca_layout) or LayerLayout.flat(lca.n_params)
    out = Path(out_dir or Path(lca_path).parent)
    out.mkdir(parents=True, exist_ok=True)
    class_dir = Path(class_dir or Path(lca_path).parent)
    prov = dict(lca.meta) if lca.meta.get("run_id") else provenance(cfg)
    prov = {k: prov.get(k) for k in ("run_id", "config_hash", "tol", "max_depth")}
    prov["tol"], prov["max_depth"] = lca.tol, lca.max_depth
    report = {"provenance": prov, "lca": {k: v for k, v in lca.summary().items()
                                          if k != "flagged_iterations"},
              "skipped": []}
    if side.get("first_order"):
        report["first_order"] = side["first_order"]

    def skip(name, why):
        report["skipped"].append({"analysis": name, "reason": why})
        log.info("skipping %s: %s", name, why)

    if toggles.help:
        hs = an.helping_stats(lca, layout)
        hist = an.help_fraction_histogram(hs)
        write_csv(out / "help_per_iteration.csv",
                  ["iteration", "pct_helped", "pct_hurt", "pct_zero"],
                  [(t, *row) for t, row in enumerate(hs.per_iteration)], prov)
        write_csv(out / "help_layers.csv", ["layer", "pct_helped"],
                  list(hs.per_layer_pct_helped.items()), prov)
        e = hist["edges"]
        write_csv(out / "help_histogram.csv", ["bin_lo", "bin_hi", "count"],
                  [(e[i], e[i + 1], int(c)) for i, c in enumerate(hist["counts"])], prov)
        report["help"] = {"overall_pct_helped": hs.overall_pct_helped,
                          "overall_pct_zero": hs.overall_pct_zero,
                          "per_layer_pct_helped": hs.per_layer_pct_helped,
                          "histogram_mode": hist["mode"],
                          "histogram_counts": hist["counts"],
                          "n_weights_never_nonzero": hist["n_excluded"]}

    totals = None
    if toggles.layers or toggles.sync:
        totals = an.layer_totals(lca, layout)
    if toggles.layers:
        write_csv(out / "layer_totals.csv", ["layer", "total_lca"],
                  [(n, v) for n, v in zip(totals.names, totals.totals)]
                  + [("all", totals.grand_total)], prov)
        write_csv(out / "layer_series.csv", ["iteration"] + totals.names,
                  [(t, *row) for t, row in enumerate(totals.series)], prov)
        cum = np.cumsum(totals.series, axis=0)
        report["layers"] = {"totals": totals.as_dict(), "grand_total": totals.grand_total,
                            "signs": totals.signs,
                            "cumulative_argmin": {n: int(np.argmin(cum[:, i])) + 1 if len(cum) else 0
                                                  for i, n in enumerate(totals.names)}}

    if toggles.oscillations:
        if traj is None:
            skip("oscillations", "no trajectory given")
        else:
            osc = an.oscillation_counts(traj, layout, lca.grad_sign_changes, lca.grad_ever_nonzero)
            cols = sorted({k for row in osc.values() for k in row})
            write_csv(out / "oscillations.csv", ["layer"] + cols,
                      [(g, *(row.get(c, "") for c in cols)) for g, row in osc.items()], prov)
            report["oscillations"] = osc

    if toggles.tails:
        windows = [tuple(w) for w in toggles.tail_windows] if toggles.tail_windows else None
        tails = an.tail_stats(lca, windows, toggles.tail_sigma)
        cols = ["window_start", "window_end", "n", "excess_kurtosis", "kurtosis_test_p",
                "tail_mass_ratio", "tail_fraction"]
        write_csv(out / "tails.csv", cols,
                  [(r["window"][0], r["window"][1], r["n"], r.get("excess_kurtosis"),
                    r.get("kurtosis_test_p"), r.get("tail_mass_ratio"), r.get("tail_fraction"))
                   for r in tails], prov)
        report["tails"] = tails

    class_layer = class_dir / CLASS_FILES["layer"]
    class_neuron = class_dir / CLASS_FILES["neuron"]
    if toggles.sync:
        sync = {}
        if len(layout.groups) >= 2 and lca.n_steps >= 3:
            peaks = [an.detect_peaks(totals.series[:, i], toggles.peaks_k)
                     for i in range(totals.series.shape[1])]
            sync["total"] = _sync_dict(an.alignment_test(
                [peaks], (-toggles.sync_shift, toggles.sync_shift), toggles.sync_trials,
                toggles.sync_threshold, toggles.mc_seed))
        else:
            skip("sync", "needs at least two layers and three iterations")
        if class_layer.exists() and len(layout.groups) >= 2:
            ct = load_class_tensor(class_layer)
            sync["per_class"] = _sync_dict(an.alignment_test(
                an.class_peaks(ct, toggles.peaks_k), (-toggles.sync_shift, toggles.sync_shift),
                toggles.sync_trials, toggles.sync_threshold, toggles.mc_seed))
        elif len(layout.groups) >= 2:
            skip("sync.per_class", f"per-class tensor {class_layer.name} not found")
        if sync:
            write_csv(out / "sync.csv",
                      ["scope", "observed", "observed_mean", "baseline_mean", "p_value",
                       "p_value_conservative", "aligned"],
                      [(k, v["observed"], v["observed_mean"], v["baseline_mean"], v["p_value"],
                        v["p_value_conservative"],
                        " ".join(str(x) for g in v["aligned"] for x in g)) for k, v in sync.items()],
                      prov)
            report["sync"] = sync

    if toggles.specialization:
        if class_neuron.exists():
            spec = an.neuron_specialization(load_class_tensor(class_neuron), layout)
            cols = sorted({k for row in spec.values() for k in row})
            write_csv(out / "specialization.csv", ["layer"] + cols,
                      [(g, *(row[c] for c in cols)) for g, row in spec.items()], prov)
            report["specialization"] = spec
        else:
            skip("specialization", f"per-class tensor {class_neuron.name} not found")

    if toggles.correlations:
        if layout.kernels:
            corr = an.fanio_correlation(lca, layout, seed=toggles.mc_seed)
            write_csv(out / "correlations.csv", ["layer", "same_output", "same_input",
                                                 "fake_baseline"],
                      [(g, r["same_output"], r["same_input"], r["fake_baseline"])
                       for g, r in corr.items()], prov)
            report["correlations"] = corr
        else:
            skip("correlations", "layout has no dense kernels")

    write_json(out / ANALYSIS_FILE, report)
    return _jsonable(report)


def analyze_runs(root, out_dir=None, prov=None):
    """Layer significance across every run directory under ``root`` holding ``layer_totals.csv``."""
    root = Path(root)
    names, samples, run_ids = None, [], []
    for p in sorted(root.rglob("layer_totals.csv")):
        pv, _, rows = read_csv(p)
        rows = [r for r in rows if r[0] != "all"]
        these = [r[0] for r in rows]
        if names is None:
            names = these
        elif these != names:
            raise ContractError(f"{p} has layers {these}, expected {names}")
        samples.append([float(r[1]) for r in rows])
        run_ids.append(pv.get("run_id", p.parent.name))
    if not samples:
        raise ContractError(f"no layer_totals.csv found under {root}")
    sig = an.layer_significance(np.array(samples), names)
    out = Path(out_dir or root)
    prov = prov or {"run_id": f"runs:{root.name}", "config_hash": "mixed", "tol": "", "max_depth": ""}
    write_csv(out / "layer_significance.csv",
              ["layer", "mean", "std", "t", "p_value", "sign_test_p", "n_positive", "n_negative"],
              [(n, r["mean"], r["std"], r["t"], r["p_value"], r["sign_test_p"], r["n_positive"],
                r["n_negative"]) for n, r in sig.items()], prov)
    return {"runs": run_ids, "layers": sig}


def _sync_dict(rep):
    return {"observed": rep.observed, "observed_per_group": rep.observed_per_group,
            "observed_mean": rep.observed_mean, "baseline_mean": rep.baseline_mean,
            "p_value": rep.p_value, "p_value_conservative": rep.p_value_conservative,
            "threshold": rep.threshold, "aligned": rep.aligned}


# --- whole run --------------------------------------------------------------

def _cached_summary(cfg, need_artifacts):
    path = cfg.run_dir() / SUMMARY_FILE
    if not path.exists():
        return None
    try:
        s = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    if s.get("config_hash") != cfg.config_hash() or s.get("code") != code_fingerprint():
        return None
    if need_artifacts and not s.get("artifacts_kept"):
        return None
    return s


def run_pipeline(cfg, keep_artifacts=True, reuse=False):
    """Train, integrate and analyze one configuration; returns the run summary.

    Failures are recorded in the summary's ``status`` (``ok``, ``gate_failed``,
    ``numeric_failed``) instead of being raised. With ``reuse`` a summary left by
    an identical configuration and code version is returned without recomputing.
    """
    if reuse:
        cached = _cached_summary(cfg, keep_artifacts)
        if cached is not None:
            return cached
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = {"run_id": cfg.run_id, "config_hash": cfg.config_hash(), "code": code_fingerprint(),
               "seed": cfg.seed, "config": cfg.model_dump(mode="json"), "status": "ok"}
    t0 = time.time()
    problem = build_problem(cfg)
    traj_path, lca_path = run_dir / TRAJECTORY_FILE, run_dir / LCA_FILE
    try:
        traj = cmd_train(cfg, problem)
        summary["train_seconds"] = time.time() - t0
        summary["final_train_loss"] = float(problem.objective.loss(
            traj.snapshot(traj.n_steps).astype(np.float64)))
        del traj
        try:
            cmd_lca(traj_path, cfg, problem)
        except LcaGateError as exc:
            summary["status"] = "gate_failed"
            summary["error"] = str(exc)
        summary["lca_seconds"] = time.time() - t0 - summary["train_seconds"]
        summary["analysis"] = cmd_analyze(lca_path, traj_path, cfg)
    except NumericError as exc:
        summary["status"] = "numeric_failed"
        summary["error"] = str(exc)
    summary["seconds"] = time.time() - t0
    if not keep_artifacts:
        for p in (traj_path, lca_path):
            p.unlink(missing_ok=True)
    summary["artifacts_kept"] = bool(keep_artifacts) and lca_path.exists()
    write_json(run_dir / SUMMARY_FILE, summary)
    log.info("run %s finished: %s in %.1fs", cfg.run_id, summary["status"], summary["seconds"])
    return json.loads((run_dir / SUMMARY_FILE).read_text())
