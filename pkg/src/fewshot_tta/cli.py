"""Command-line front end.

Subcommands: gen-data, train-source, finetune, adapt, sweep, report,
run-all. Every artifact gets a JSON sidecar embedding the producing config
and content hashes. Exit codes: 1 configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import (RunConfig, config_hash, file_sha256, load_config, seed_plan,
                     serialize)
from .data import SupportSet, read_dataset, write_dataset, write_manifest
from .errors import ConfigError, DataError, NumericError
from .finetune import eval_accuracy, finetune, write_loss_trace
from .model import load_model, save_model, train_source
from .prototypes import init_bank
from .stream import AdaptConfig, make_stream, resolve_method, run_baseline


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if getattr(args, "trial_seed", None) is not None:
        cfg = replace(cfg, trial_seed=args.trial_seed)
    if getattr(args, "k", None) is not None:
        cfg = replace(cfg, k=args.k)
    if getattr(args, "method", None) is not None:
        cfg = replace(cfg, method=resolve_method(args.method))
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, alpha=args.alpha))
    if getattr(args, "batch_size", None) is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, batch_size=args.batch_size))
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, finetune=replace(cfg.finetune, epochs=args.epochs))
    if getattr(args, "lr", None) is not None:
        cfg = replace(cfg, finetune=replace(cfg.finetune, lr=args.lr))
    if getattr(args, "iters", None) is not None:
        cfg = replace(cfg, source=replace(cfg.source, iters=args.iters))
    return cfg


def _sidecar(cfg: RunConfig, extra: dict) -> dict:
    doc = {"config": json.loads(serialize(cfg)), "config_hash": config_hash(cfg)}
    doc.update(extra)
    return doc


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = harness.prepare_benchmark(cfg)
    trial = harness.make_trial(cfg, bench)

    files = {}
    for i, domain in enumerate(bench.source_data):
        files[f"source{i}"] = str(out / f"source{i}.ttad")
        write_dataset(files[f"source{i}"], domain, bench.class_count)
    files["target"] = str(out / "target.ttad")
    write_dataset(files["target"], bench.target_data, bench.class_count)
    files["support"] = str(out / "support.ttad")
    write_dataset(files["support"], trial.support.samples, bench.class_count)
    files["stream"] = str(out / "stream.ttad")
    write_dataset(files["stream"], trial.remainder, bench.class_count)

    data_cfg = replace(cfg.data, master_seed=cfg.master_seed)
    write_manifest(out / "manifest.json", data_cfg, files)
    _write_json(out / "gen-data.sidecar.json", _sidecar(cfg, {
        "seeds": trial.seeds, "k": cfg.k,
        "hashes": {name: file_sha256(path) for name, path in files.items()},
    }))
    print(f"wrote {len(files)} dataset files to {out}")
    return 0


def _read_sources(data_dir) -> list:
    paths = sorted(Path(data_dir).glob("source*.ttad"))
    if not paths:
        raise DataError(f"no source*.ttad files under {data_dir}")
    return [read_dataset(p) for p in paths], paths


def cmd_train_source(args) -> int:
    cfg = _config_from(args)
    datasets, paths = _read_sources(args.data)
    classes = {ds.num_classes for ds in datasets}
    if len(classes) > 1:
        raise DataError(f"source files disagree on class count: {sorted(classes)}")
    src_cfg = replace(cfg.source, seed=cfg.master_seed)
    t0 = time.perf_counter()
    model, curve = train_source([ds.records for ds in datasets], src_cfg,
                                widths=cfg.widths, num_classes=classes.pop())
    seconds = time.perf_counter() - t0
    save_model(args.out, model)
    _write_json(str(args.out) + ".sidecar.json", _sidecar(cfg, {
        "data_hash": "+".join(file_sha256(p) for p in paths),
        "final_loss": curve[-1][1] if curve else None,
        "params_hash": model.params_hash().hex(),
        "seconds": seconds,
    }))
    print(f"trained source model ({seconds:.1f}s), wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from(args)
    model = load_model(args.model)
    ds = read_dataset(args.support)
    counts = {}
    for rec in ds.records:
        counts[rec.label] = counts.get(rec.label, 0) + 1
    k = min(counts.values()) if counts else 0
    support = SupportSet(samples=ds.records, k=k, class_count=ds.num_classes)
    ft_cfg = replace(cfg.finetune, seed=seed_plan(cfg)["fda"])
    t0 = time.perf_counter()
    tuned, trace = finetune(model, support, ft_cfg)
    seconds = time.perf_counter() - t0
    save_model(args.out, tuned)
    trace_path = args.trace or str(args.out) + ".trace.csv"
    write_loss_trace(trace_path, trace)
    _write_json(str(args.out) + ".sidecar.json", _sidecar(cfg, {
        "data_hash": file_sha256(args.support),
        "support_size": len(support.samples), "k": k,
        "params_hash": tuned.params_hash().hex(),
        "final_support_acc": trace[-1]["support_acc"] if trace else None,
        "seconds": seconds,
    }))
    print(f"fine-tuned for {ft_cfg.epochs} epochs ({seconds:.1f}s), wrote {args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config_from(args)
    kind = resolve_method(cfg.method)
    model = load_model(args.model)
    ds = read_dataset(args.stream)

    bank = None
    if kind == "fs_tta":
        if not args.support:
            raise ConfigError("fs_tta needs --support to build the prototype bank")
        sup = read_dataset(args.support)
        emb, labels = harness.embed_records(model, sup.records)
        bank = init_bank(emb, labels, class_count=sup.num_classes, ema_beta=cfg.ema_beta)

    stream = make_stream(ds.records, cfg.adapt.batch_size,
                         seed_plan(cfg)["stream"], cfg.stream_order)
    t0 = time.perf_counter()
    metrics = run_baseline(kind, model, stream, cfg.adapt, bank=bank)
    seconds = time.perf_counter() - t0

    doc = _sidecar(cfg, {
        "schema": harness.METRICS_SCHEMA,
        "method": kind,
        "comparison_hash": harness.comparison_hash(cfg),
        "data_hash": file_sha256(args.stream),
        "num_classes": ds.num_classes,
        "final_accuracy": metrics.final_accuracy,
        "correct": metrics.correct,
        "total": metrics.total,
        "curve": metrics.accuracy_curve,
        "rows": metrics.rows,
        "selected_total": metrics.selected_total,
        "mask_total": metrics.mask_total,
        "loss_skipped": metrics.loss_skipped,
        "adam_skipped": metrics.adam_skipped,
        "seconds": seconds,
    })
    _write_json(args.out, doc)
    if args.batch_csv:
        with open(args.batch_csv, "w", newline="") as fh:
            names = ["batch", "batch_correct", "batch_size", "cumulative_accuracy",
                     "selected", "mask_rate", "loss"]
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            for i, row in enumerate(metrics.rows):
                writer.writerow({"batch": i, **{k: row[k] for k in names[1:]}})
    print(f"{kind}: online accuracy {metrics.final_accuracy:.4f} "
          f"over {metrics.total} samples ({seconds:.1f}s)")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from(args)
    values = None
    if args.values:
        cast = float if args.axis == "alpha" else int
        values = [cast(v) for v in args.values.split(",")]
    trial_seeds = tuple(range(args.trials))
    doc = harness.sweep(cfg, args.axis, values=values, trial_seeds=trial_seeds)
    _write_json(args.out, doc)
    print(harness.format_sweep(doc))
    return 0


def cmd_report(args) -> int:
    docs = []
    for path in args.metrics:
        try:
            with open(path) as fh:
                docs.append(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
    report = harness.build_report(docs, paths=args.metrics, force=args.force)
    print(harness.format_report(report))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            rows = harness.report_csv_rows(report)
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


def cmd_run_all(args) -> int:
    cfg = _config_from(args)
    methods = args.methods.split(",") if args.methods else None
    report = harness.run_all(cfg, methods=methods)
    out = Path(args.out)
    _write_json(out / "report.json", report)
    print(f"source accuracy:  {report['source_accuracy']:.4f}")
    if report["stage1_accuracy"] is not None:
        print(f"stage 1 accuracy: {report['stage1_accuracy']:.4f}")
    for name, m in report["methods"].items():
        print(f"{name}: online accuracy {m['final_accuracy']:.4f} ({m['seconds']:.1f}s)")
    print(f"wrote {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-tta",
                                     description="Streaming few-shot test-time adaptation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON run config; flags override file values")
        p.add_argument("--seed", type=int, help="master seed (data + source init)")
        p.add_argument("--trial-seed", type=int, dest="trial_seed",
                       help="trial seed (support split, mixing, stream order)")
        return p

    p = add("gen-data", cmd_gen_data, help="generate benchmark dataset files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, help="support samples per class")

    p = add("train-source", cmd_train_source, help="train the pooled-source model")
    p.add_argument("--data", required=True, help="directory with source*.ttad")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--iters", type=int, help="training iterations")

    p = add("finetune", cmd_finetune, help="fine-tune on the labeled support set")
    p.add_argument("--model", required=True, help="input model file")
    p.add_argument("--support", required=True, help="support dataset file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--trace", help="loss trace CSV path (default <out>.trace.csv)")
    p.add_argument("--epochs", type=int, help="fine-tuning epochs")
    p.add_argument("--lr", type=float, help="fine-tuning learning rate")

    p = add("adapt", cmd_adapt, help="run one adaptation method over a stream")
    p.add_argument("--model", required=True, help="model file to adapt")
    p.add_argument("--stream", required=True, help="stream dataset file")
    p.add_argument("--method", help="method or alias: erm, bn, tent, ft, ft_tent, fs_tta")
    p.add_argument("--support", help="support file (builds the fs_tta prototype bank)")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--batch-csv", dest="batch_csv", help="per-batch CSV path")
    p.add_argument("--alpha", type=float, help="entropy filter fraction")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="stream batch size")

    p = add("sweep", cmd_sweep, help="sweep alpha, k-shot, or batch size")
    p.add_argument("--axis", required=True, choices=("alpha", "kshot", "batch"))
    p.add_argument("--values", help="comma-separated values (defaults per axis)")
    p.add_argument("--trials", type=int, default=5, help="number of trial seeds")
    p.add_argument("--out", required=True, help="sweep JSON path")

    p = sub.add_parser("report", help="compare metrics files side by side")
    p.set_defaults(fn=cmd_report)
    p.add_argument("metrics", nargs="+", help="metrics JSON files from adapt")
    p.add_argument("--force", action="store_true", help="allow mixed config/data hashes")
    p.add_argument("--csv", help="also write the table as CSV")

    p = add("run-all", cmd_run_all, help="full pipeline: data, source, stage 1, stage 2")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--methods", help="comma-separated methods (default: config's method)")
    p.add_argument("--k", type=int, help="support samples per class")
    p.add_argument("--iters", type=int, help="source training iterations")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are configuration errors here
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
