"""Command line: ``losschange {train,lca,analyze,experiment,export}``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config, parse_override
from .exceptions import ConfigError, ContractError, DataFormatError, IntegrityError, LcaGateError, NumericError

EXIT_OK, EXIT_ERROR, EXIT_GATE, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3, 4

# flag -> dotted RunConfig field
_FLAGS = {
    "run_id": "run_id",
    "seed": "seed",
    "iterations": "iterations",
    "output_dir": "output_dir",
    "data_root": "dataset.root",
    "subset_size": "dataset.subset_size",
    "optimizer": "optimizer.kind",
    "lr": "optimizer.lr",
    "momentum": "optimizer.momentum",
    "batch_size": "optimizer.batch_size",
    "tol": "lca.tol",
    "max_depth": "lca.max_depth",
    "n_jobs": "lca.n_jobs",
}


def _add_config_args(p, training=True):
    p.add_argument("-c", "--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. optimizer.lr=0.1 (repeatable)")
    if training:
        p.add_argument("--run-id")
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--output-dir")
        p.add_argument("--data-root")
        p.add_argument("--subset-size", type=int)
        p.add_argument("--optimizer", choices=["sgd", "adam"])
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--arch", help="comma-separated layer widths, e.g. 784,100,50,10")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--n-jobs", type=int)


def _config_from_args(args, default_path=None):
    overrides = {}
    for text in args.overrides:
        k, v = parse_override(text)
        overrides[k] = v
    for flag, key in _FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "arch", None):
        try:
            overrides["arch"] = [int(x) for x in args.arch.split(",")]
        except ValueError:
            raise ConfigError(f"bad --arch {args.arch!r}") from None
    if getattr(args, "first_order", False):
        overrides["lca.first_order"] = True
    if getattr(args, "per_class", False):
        overrides["lca.per_class"] = True
    path = args.config
    if path is None and default_path is not None and Path(default_path).exists():
        path = default_path
    return load_config(path, overrides)


def _print_lca(lca):
    s = lca.summary()
    print(f"cumulative error: {s['cumulative_error_pct']:+.4f}%  "
          f"(allocated {s['total_allocated']:.6f}, true {s['total_change']:.6f})")
    print(f"mean |residual|: {s['mean_abs_iter_error']:.3e}  max: {s['max_abs_iter_error']:.3e}")
    print(f"flagged iterations ({s['n_flagged']}): {s['flagged_iterations'][:50]}")
    print("depth histogram: " + " ".join(f"{d}:{n}" for d, n in enumerate(s["depth_histogram"])))


def cmd_train(args):
    from . import pipeline
    cfg = _config_from_args(args)
    traj = pipeline.cmd_train(cfg)
    print(f"trajectory: {traj.path}  T={traj.n_steps} K={traj.n_params}")
    losses = traj.meta.get("train_loss", {})
    if losses:
        last = max(losses, key=int)
        print(f"train loss at iteration {last}: {losses[last]:.5f}")
    return EXIT_OK


def cmd_lca(args):
    from . import pipeline
    traj_path = Path(args.trajectory)
    cfg = _config_from_args(args, default_path=traj_path.parent / "config.yaml")
    out_dir = Path(args.out) if args.out else traj_path.parent
    try:
        lca = pipeline.cmd_lca(traj_path, cfg, out_dir=out_dir)
    except LcaGateError as exc:
        _print_lca(exc.lca)
        raise
    _print_lca(lca)
    fo = out_dir / "first_order.json"
    if cfg.lca.first_order and fo.exists():
        print(f"first-order cumulative error: {json.loads(fo.read_text())['cumulative_error_pct']:+.2f}%")
    print(f"wrote {out_dir / pipeline.LCA_FILE}")
    return EXIT_OK


def cmd_analyze(args):
    from . import pipeline
    if args.runs:
        res = pipeline.analyze_runs(args.runs, args.out)
        for name, r in res["layers"].items():
            print(f"{name}: mean {r['mean']:+.5f}  t={r['t']:.3f}  p={r['p_value']:.3g}  "
                  f"sign-test p={r['sign_test_p']:.3g}")
        return EXIT_OK
    if not args.lca:
        raise ConfigError("analyze needs an LCA file or --runs DIR")
    lca_path = Path(args.lca)
    cfg = _config_from_args(args, default_path=lca_path.parent / "config.yaml")
    traj = args.trajectory
    if traj is None and (lca_path.parent / pipeline.TRAJECTORY_FILE).exists():
        traj = lca_path.parent / pipeline.TRAJECTORY_FILE
    report = pipeline.cmd_analyze(lca_path, traj, cfg, out_dir=args.out)
    if "help" in report:
        h = report["help"]
        print(f"percent helped (zeros excluded): {h['overall_pct_helped']:.2f}%  "
              f"zero: {h['overall_pct_zero']:.2f}%  help-fraction mode: {h['histogram_mode']:.3f}")
    if "layers" in report:
        print("layer totals: " + "  ".join(f"{k}={v:+.5f}" for k, v in report["layers"]["totals"].items()))
    for note in report["skipped"]:
        print(f"skipped {note['analysis']}: {note['reason']}")
    return EXIT_OK


def cmd_experiment(args):
    from .experiments import run_study
    cfg = _config_from_args(args)
    seeds = args.seeds if args.seeds else [0, 1, 2, 3, 4]
    study = run_study(args.preset, cfg, seeds=seeds, study_dir=args.study_dir, n_jobs=args.jobs,
                      keep_artifacts=args.keep_artifacts, reuse=not args.no_reuse)
    for arm, row in study["arms"].items():
        totals = "  ".join(f"{n}={st['mean']:+.4f}±{st['std']:.4f}" if st["mean"] is not None else f"{n}=NA"
                           for n, st in row["layer_totals"].items())
        failed = f"  failed: {row['failed']}" if row["failed"] else ""
        print(f"{arm:<20} ok={row['n_ok']}  {totals}{failed}")
    print(f"wrote {Path(args.study_dir) / args.preset / 'comparison.csv'}")
    return EXIT_GATE if any(row["failed"] for row in study["arms"].values()) and not any(
        row["n_ok"] for row in study["arms"].values()) else EXIT_OK


def _parse_iterations(text, n_steps):
    out = []
    for part in text.split(","):
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(range(int(lo or 0), int(hi or n_steps)))
        elif part:
            out.append(int(part))
    bad = [t for t in out if not 0 <= t < n_steps]
    if bad:
        raise ConfigError(f"iterations {bad[:5]} outside [0, {n_steps})")
    return out


def cmd_export(args):
    from . import analysis as an
    from . import pipeline
    from .lca import load_class_tensor, read_lca
    lca, layout, _ = read_lca(args.lca)
    if layout is None:
        from .nn import LayerLayout
        layout = LayerLayout.flat(lca.n_params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prov = {k: lca.meta.get(k) for k in ("run_id", "config_hash")}
    prov.update(tol=lca.tol, max_depth=lca.max_depth)
    if args.what == "series":
        series = an.layer_series(lca, layout)
        cum = np.cumsum(series, axis=0)
        names = list(layout.groups)
        pipeline.write_csv(out, ["iteration"] + names + [f"{n}_cumulative" for n in names],
                           [(t, *series[t], *cum[t]) for t in range(lca.n_steps)], prov)
    elif args.what == "frames":
        if not args.layer:
            raise ConfigError("--layer is required for frames")
        its = _parse_iterations(args.iterations or "0:", lca.n_steps)
        entry, frames = an.frame_table(lca, layout, args.layer, its)
        if out.suffix == ".csv":
            rows = [(t, *np.unravel_index(j, vals.shape), v)
                    for t, vals in frames for j, v in enumerate(vals.ravel())]
            cols = ["iteration", "row", "col"] if len(entry.shape) == 2 else ["iteration", "index"]
            pipeline.write_csv(out, cols + ["lca"], rows, prov)
        else:
            np.savez_compressed(out, iterations=np.array(its),
                                frames=np.stack([f for _, f in frames]), layer=entry.name,
                                **{k: str(v) for k, v in prov.items()})
    elif args.what == "matrix":
        its = _parse_iterations(args.iterations or "0:", lca.n_steps)
        np.savez_compressed(out, iterations=np.array(its), A=np.asarray(lca.A[its]),
                            iter_error=lca.iter_error[its], depth=lca.depth[its],
                            **{k: str(v) for k, v in prov.items()})
    elif args.what == "per-class":
        path = Path(args.lca).parent / pipeline.CLASS_FILES["layer"]
        if not path.exists():
            raise ConfigError(f"per-class tensor {path} not found; rerun lca with --per-class")
        ct = load_class_tensor(path)
        rows = [(c, t, *ct.values[c, t]) for c in range(ct.n_classes) for t in range(ct.values.shape[1])]
        pipeline.write_csv(out, ["class", "iteration"] + ct.group_names, rows, prov)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="losschange",
                                     description="Per-parameter loss change allocation for small classifiers.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and record a trajectory")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lca", help="compute the LCA matrix of a trajectory")
    p.add_argument("trajectory")
    p.add_argument("--out", help="output directory (default: next to the trajectory)")
    p.add_argument("--first-order", action="store_true", help="also report first-order allocation error")
    p.add_argument("--per-class", action="store_true", help="also compute per-class tensors")
    _add_config_args(p, training=False)
    p.set_defaults(func=cmd_lca)

    p = sub.add_parser("analyze", help="helping ratios, layer totals, oscillations, tails, sync")
    p.add_argument("lca", nargs="?")
    p.add_argument("--trajectory")
    p.add_argument("--runs", help="directory of runs: layer significance across them")
    p.add_argument("--out")
    _add_config_args(p, training=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("experiment", help="run a multi-seed preset study")
    from .experiments import PRESETS
    p.add_argument("preset", choices=PRESETS)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--study-dir", default="studies")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.add_argument("--keep-artifacts", action="store_true",
                   help="keep trajectory and LCA files of every run")
    p.add_argument("--no-reuse", action="store_true", help="recompute runs with cached summaries")
    _add_config_args(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("export", help="export LCA slices for plotting")
    p.add_argument("lca")
    p.add_argument("--what", choices=["series", "frames", "matrix", "per-class"], default="series")
    p.add_argument("--layer", help="parameter block for frames, e.g. dense_0/kernel")
    p.add_argument("--iterations", help="e.g. 0,20,220 or 100:200")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except LcaGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DataFormatError, IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
