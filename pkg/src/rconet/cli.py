"""Command-line harness: ``rconet <subcommand> [flags]``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime errors.
Artifacts are files; stdout only carries progress lines and the tables a
subcommand exists to print.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import RCoNetError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers

def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _log(msg):
    print(msg, flush=True)


def write_manifest(out_dir, command, config, seed, inputs, artifacts, timings):
    """One manifest.json per run; digests cover input and artifact bytes."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in sorted(artifacts)},
        "timings": timings,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _threads():
    raw = os.environ.get("RCONET_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RCONET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("RCONET_THREADS must be at least 1")
    return n


# --------------------------------------------------------------- commands

def cmd_gen(args):
    from .data import SyntheticSpec, dataset_save, generate_synthetic

    spec = SyntheticSpec(counts=args.counts, size=args.size, delta=args.delta,
                         noise_std=args.noise_std, seed=args.seed)
    d = generate_synthetic(spec)
    dataset_save(d, args.out)
    _log(f"wrote {len(d.labels)} samples to {args.out}")


def cmd_noise(args):
    from .data import NoiseSpec, dataset_load, dataset_save, inject_label_noise, noise_table

    d = dataset_load(args.input)
    noisy = inject_label_noise(d, NoiseSpec(args.ratio, args.seed))
    dataset_save(noisy, args.out)
    print(f"{'class':<12}{'clean':>8}{'noise':>8}{'total':>8}")
    for name, clean, noise, total in noise_table(d, noisy):
        print(f"{name:<12}{clean:>8}{noise:>8}{total:>8}")


TRAIN_FLAGS = ("alpha", "k", "s", "estimator", "epochs", "seed", "folds", "lr", "weight_decay",
               "batch_size", "negatives", "hidden")


def _train_config(args):
    from .model import TrainConfig

    values = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        values = {k.replace("-", "_"): v for k, v in values.items()}
    for name in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    if args.lam is not None:
        values["lam"] = args.lam
    try:
        return TrainConfig.from_dict(values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _run_fold(job):
    """Train one fold and write its artifacts; returns (paths, seconds)."""
    from .checkpoint import checkpoint_save
    from .data import dataset_load
    from .metrics import emit_report
    from .model import RCoNet
    from .plotting import plot_epoch_log
    from .train import BATCH_LOG_HEADER, evaluate, fit, prediction_header, write_epoch_log, write_rows

    cfg, data_path, train_idx, val_idx, seed_seq, out = job
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    data = dataset_load(data_path)
    train = data.subset(train_idx)
    val = data.subset(val_idx) if val_idx is not None else None
    rng = np.random.default_rng(seed_seq)
    model = RCoNet(cfg, rng)
    batch_log = []
    logs, opt = fit(model, train, cfg, val=val, rng=rng, batch_log=batch_log)
    paths = [out / "checkpoint.rcon", out / "epoch_log.csv", out / "epoch_log.png",
             out / "batch_log.csv"]
    checkpoint_save(paths[0], model, opt)
    write_epoch_log(paths[1], logs)
    plot_epoch_log(logs, paths[2], title=out.name)
    write_rows(paths[3], BATCH_LOG_HEADER, batch_log)
    if val is not None:
        report, rows = evaluate(model, val)
        paths += [out / "metrics.csv", out / "metrics.json", out / "predictions.csv"]
        emit_report(report, "csv", paths[4])
        emit_report(report, "json", paths[5])
        write_rows(paths[6], prediction_header(cfg.n_classes), rows)
    return [str(p) for p in paths], time.perf_counter() - start


def cmd_train(args):
    from .data import dataset_load
    from .train import kfold_split

    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = dataset_load(args.data)
    # one seed per run; folds get independent children of it
    children = np.random.SeedSequence(cfg.seed).spawn(max(cfg.folds, 1))
    if cfg.folds >= 2:
        splits = kfold_split(data.labels, cfg.folds, cfg.seed)
        jobs = [(cfg, args.data, tr, va, children[f], out / f"fold{f}")
                for f, (tr, va) in enumerate(splits)]
    else:
        jobs = [(cfg, args.data, np.arange(len(data.labels)), None, children[0], out / "full")]
    workers = min(_threads(), len(jobs))
    _log(f"training {len(jobs)} run(s) with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_fold(job))
            _log(f"finished {Path(job[-1]).name}")
    artifacts = [p for paths, _ in results for p in paths]
    timings = {Path(job[-1]).name: round(sec, 3) for job, (_, sec) in zip(jobs, results)}
    if cfg.folds >= 2:
        artifacts += _summarize(out, [p for p in artifacts if p.endswith("metrics.csv")])
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, [args.data], artifacts, timings)


def cmd_eval(args):
    from .checkpoint import checkpoint_load
    from .data import dataset_load
    from .metrics import emit_report
    from .train import evaluate, prediction_header, write_rows

    start = time.perf_counter()
    model, _ = checkpoint_load(args.checkpoint)
    data = dataset_load(args.data)
    report, rows = evaluate(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "metrics.json", out / "predictions.csv"]
    emit_report(report, "csv", paths[0])
    emit_report(report, "json", paths[1])
    write_rows(paths[2], prediction_header(model.cfg.n_classes), rows)
    _log(f"accuracy {report.multiclass_accuracy:.4f} on {report.n_samples} samples")
    write_manifest(out, "eval", model.cfg.to_dict(), model.cfg.seed, [args.checkpoint, args.data],
                   paths, {"eval": round(time.perf_counter() - start, 3)})


def cmd_mi_bench(args):
    from .mi import ESTIMATORS, train_gaussian_estimator
    from .plotting import plot_mi_bench

    names = ESTIMATORS if args.estimator == "all" else (args.estimator,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, timings = [], {}
    for name in names:
        for rho in args.rho:
            start = time.perf_counter()
            r, _ = train_gaussian_estimator(name, rho, samples=args.samples, epochs=args.epochs,
                                            seed=args.seed)
            rows += [row + (rho,) for row in r]
            timings[f"{name}@{rho:g}"] = round(time.perf_counter() - start, 3)
            _log(f"{name} rho={rho:g}: {r[-1][2]:.4f} nats (analytic {r[-1][3]:.4f})")
    paths = [out / "mi_bench.csv", out / "mi_bench.png"]
    with paths[0].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "estimator", "estimate_nats", "analytic_mi", "rho"])
        w.writerows([e, n, f"{v:.9f}", f"{a:.9f}", f"{rho:g}"] for e, n, v, a, rho in rows)
    plot_mi_bench(rows, paths[1])
    config = {"estimators": list(names), "rho": list(args.rho), "samples": args.samples,
              "epochs": args.epochs}
    write_manifest(out, "mi-bench", config, args.seed, [], paths, timings)


def cmd_moment_demo(args):
    from .mhmf import mixture_demo, order_summary
    from .plotting import plot_moment_clouds

    rows, clouds = mixture_demo(args.seed, args.max_order, args.samples)
    summary = order_summary(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "moments.csv", out / "moment_norms.csv", out / "moments.png"]
    with paths[0].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "order", "moment_value", "term"])
        w.writerows([c, o, f"{v:.9f}", t] for c, o, v, t in rows)
    with paths[1].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "order", "norm"])
        w.writerows([c, o, f"{v:.9f}"] for (c, o), v in summary.items())
    plot_moment_clouds(clouds, [(c, o, v) for (c, o), v in summary.items()], paths[2])
    write_manifest(out, "moment-demo", {"max_order": args.max_order, "samples": args.samples},
                   args.seed, [], paths, {})


def _summarize(out, csv_paths):
    """Write the mean +/- variance table and its figure; returns their paths."""
    from .metrics import METRICS, aggregate_reports
    from .plotting import plot_report

    summary = aggregate_reports(csv_paths)
    table = Path(out) / "summary.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(METRICS) + ["f1_standard"]
        w.writerow(["class"] + [f"{m}_{s}" for m in cols for s in ("mean", "var")]
                   + [f"{m}" for m in cols])
        for row, vals in summary.items():
            w.writerow([row] + [f"{vals[m][i]:.9f}" for m in cols for i in (0, 1)]
                       + [f"{vals[m][0]:.4f} ± {vals[m][1]:.4f}" for m in cols])
    figure = plot_report(summary, Path(out) / "summary.png")
    return [str(table), str(figure)]


def cmd_report(args):
    paths = sorted(glob.glob(args.glob, recursive=True))
    if not paths:
        raise UsageError(f"no report files match {args.glob!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = _summarize(out, paths)
    _log(f"aggregated {len(paths)} report(s)")
    write_manifest(out, "report", {"glob": args.glob}, None, paths, artifacts, {})


def cmd_sweep(args):
    from . import experiments as ex
    from .model import TrainConfig
    from .plotting import plot_alpha_sweep, plot_noise_sweep

    base = TrainConfig(**{**ex.SWEEP_TRAINING, **({"epochs": args.epochs} if args.epochs else {})})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    def progress(r):
        _log(f"seed={r.seed} noise={r.noise_ratio:g} alpha={r.alpha:g} acc={r.test_acc:.4f} "
             f"sigma={r.mean_sigma:.6f}")

    if args.kind == "noise":
        results = ex.noise_sweep(seeds=tuple(args.seeds), base=base, progress=progress)
        trend = ex.noise_trend(results)
        figure = plot_noise_sweep(trend.ratios, trend.mean_sigma, trend.mean_acc,
                                  out / "noise_sweep.png")
    else:
        results = ex.alpha_sweep(seeds=tuple(args.seeds), base=base, progress=progress)
        means, _ = ex.alpha_spread(results)
        figure = plot_alpha_sweep(list(means), list(means.values()), out / "alpha_sweep.png")
    table = out / f"{args.kind}_sweep.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "noise_ratio", "alpha", "test_acc", "macro_bac", "mean_sigma"])
        w.writerows([r.seed, f"{r.noise_ratio:g}", f"{r.alpha:g}", f"{r.test_acc:.9f}",
                     f"{r.macro_bac:.9f}", f"{r.mean_sigma:.9f}"] for r in results)
    write_manifest(out, "sweep", {"kind": args.kind, "base": asdict(base)}, list(args.seeds), [],
                   [table, figure], {"sweep": round(time.perf_counter() - start, 3)})


# ----------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="rconet", description="RCoNet at desk scale.")
    p.add_argument("--version", action="version", version=f"rconet {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    p.subcommands = sub.choices

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output RCDS file")
    g.add_argument("--counts", type=_ints, default=(800, 550, 80),
                   help="per-class sample counts, comma separated (default 800,550,80)")
    g.add_argument("--size", type=int, default=28, help="image side (default 28)")
    g.add_argument("--delta", type=float, default=0.6,
                   help="class-1/class-2 similarity in [0, 1] (default 0.6)")
    g.add_argument("--noise-std", type=float, default=0.05, help="pixel noise (default 0.05)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    n = sub.add_parser("noise", help="inject label noise and print the clean/noise table")
    n.add_argument("--in", dest="input", required=True, help="input RCDS file")
    n.add_argument("--out", required=True, help="output RCDS file")
    n.add_argument("--ratio", type=float, default=0.1, help="noise ratio (default 0.1)")
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=cmd_noise)

    t = sub.add_parser("train", help="train with k-fold cross-validation")
    t.add_argument("--data", required=True, help="RCDS training file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="JSON file of config keys; flags override it")
    t.add_argument("--alpha", type=float, help="MI weight (default 0.2)")
    t.add_argument("--k", type=int, help="moment orders (default 4)")
    t.add_argument("--s", type=int, help="experts (default 4)")
    t.add_argument("--estimator", choices=("dv", "jsd", "nce"), help="MI estimator (default jsd)")
    t.add_argument("--epochs", type=int, help="epochs (default 30)")
    t.add_argument("--seed", type=int, help="run seed (default 0)")
    t.add_argument("--folds", type=int, help="cross-validation folds, 1 = no split (default 5)")
    t.add_argument("--lr", type=float, help="learning rate (default 2e-4)")
    t.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 1e-4)")
    t.add_argument("--batch-size", type=int, help="batch size (default 8)")
    t.add_argument("--negatives", type=int, help="negatives per anchor (default 4)")
    t.add_argument("--hidden", type=int, help="head hidden width (default 64)")
    t.add_argument("--lam", type=_floats, help="class weights (default 1,1,20)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mi-bench", help="MI estimators on bivariate Gaussians")
    m.add_argument("--estimator", choices=("dv", "jsd", "nce", "all"), default="all")
    m.add_argument("--rho", type=_floats, default=(0.0, 0.5, 0.8),
                   help="correlations, comma separated (default 0,0.5,0.8)")
    m.add_argument("--samples", type=int, default=10_000)
    m.add_argument("--epochs", type=int, default=30)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_mi_bench)

    d = sub.add_parser("moment-demo", help="moment orders on 2-D mixtures")
    d.add_argument("--max-order", type=int, default=4)
    d.add_argument("--samples", type=int, default=350)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_moment_demo)

    r = sub.add_parser("report", help="merge run CSVs into a mean ± variance table")
    r.add_argument("--glob", required=True, help="pattern for metrics CSVs (** allowed)")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="noise-ratio or alpha sweep on the synthetic task")
    s.add_argument("--kind", choices=("noise", "alpha"), default="noise")
    s.add_argument("--seeds", type=_ints, default=(0, 1, 2, 3, 4))
    s.add_argument("--epochs", type=int, help="override the sweep epoch count")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if extra:
            # report against the subcommand so its valid flags are listed
            sub = parser.subcommands[args.command]
            sub.error(f"unrecognized arguments: {' '.join(extra)}\n{sub.format_help()}")
        args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (RCoNetError, ValueError, ArithmeticError, OSError) as exc:
        print(f"rconet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
