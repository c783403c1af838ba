"""End-to-end orchestration: benchmark prep, staged runs, sweeps, reports.

The expensive artifact is the source model, so every entry point accepts a
pre-built one and trains only when none is given. A trial (support split,
mixing draws, stream order) re-rolls with trial_seed while data and source
stay fixed, which is how the multi-seed evaluations and sweeps are run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, config_hash, seed_plan, serialize
from .data import SupportSet, generate_benchmark, records_as_arrays, split_support
from .errors import ConfigError, DataError
from .finetune import eval_accuracy, finetune
from .model import Backbone, train_source
from .prototypes import init_bank
from .stream import make_stream, resolve_method, run_baseline
from .tensor import no_grad

RUN_SCHEMA = "fewshot-tta-run/1"
METRICS_SCHEMA = "fewshot-tta-metrics/1"
SWEEP_SCHEMA = "fewshot-tta-sweep/1"

STAGE1_METHODS = ("ft_only", "ft_plus_entropy_min", "fs_tta")


@dataclass
class Bench:
    """Generated benchmark data for one config."""

    source_data: list
    target_data: list
    class_count: int


@dataclass
class TrialSetup:
    """One trial's support split and seed plan."""

    support: SupportSet
    remainder: list
    seeds: dict


@dataclass
class Stage1Result:
    """Fine-tuned model plus the support-built prototype bank."""

    tuned: Backbone
    trace: list
    bank: object


def prepare_benchmark(cfg: RunConfig) -> Bench:
    """Generate the benchmark; the run's master seed overrides the data seed."""
    data_cfg = replace(cfg.data, master_seed=cfg.master_seed)
    source_data, target_data = generate_benchmark(data_cfg)
    return Bench(source_data=source_data, target_data=target_data,
                 class_count=data_cfg.class_count)


def build_source_model(cfg: RunConfig, bench: Bench):
    """Train the pooled-source model under the master seed."""
    src_cfg = replace(cfg.source, seed=cfg.master_seed)
    return train_source(bench.source_data, src_cfg, widths=cfg.widths,
                        num_classes=bench.class_count)


def make_trial(cfg: RunConfig, bench: Bench) -> TrialSetup:
    seeds = seed_plan(cfg)
    support, remainder = split_support(bench.target_data, cfg.k, seeds["support"])
    return TrialSetup(support=support, remainder=remainder, seeds=seeds)


def embed_records(model: Backbone, records) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings and labels, no graphs."""
    x, y = records_as_arrays(records)
    with no_grad():
        emb, _ = model.forward(x, mode="eval")
    return emb.data, y


def run_stage1(cfg: RunConfig, trial: TrialSetup, source_model: Backbone) -> Stage1Result:
    """Fine-tune on the support set and seed the bank from its embeddings."""
    ft_cfg = replace(cfg.finetune, seed=trial.seeds["fda"])
    tuned, trace = finetune(source_model, trial.support, ft_cfg)
    emb, labels = embed_records(tuned, trial.support.samples)
    bank = init_bank(emb, labels, class_count=trial.support.class_count,
                     ema_beta=cfg.ema_beta)
    return Stage1Result(tuned=tuned, trace=trace, bank=bank)


def run_method(cfg: RunConfig, trial: TrialSetup, source_model: Backbone,
               method: str, stage1: Stage1Result | None = None) -> dict:
    """Adapt one method over the trial's stream and score it online.

    The adapted model is always a private copy; callers can reuse
    source_model and stage1 across methods.
    """
    kind = resolve_method(method)
    if kind in STAGE1_METHODS:
        if stage1 is None:
            raise ConfigError(f"{kind} needs the fine-tuned model; run stage 1 first")
        base = stage1.tuned
    else:
        base = source_model
    model = base.copy()
    bank = stage1.bank.copy() if kind == "fs_tta" else None
    stream = make_stream(trial.remainder, cfg.adapt.batch_size,
                         trial.seeds["stream"], cfg.stream_order)
    t0 = time.perf_counter()
    metrics = run_baseline(kind, model, stream, cfg.adapt, bank=bank)
    seconds = time.perf_counter() - t0
    return {
        "method": kind,
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
    }


def run_all(cfg: RunConfig, methods=None, source_model: Backbone = None) -> dict:
    """Full pipeline for one trial; returns the run report document."""
    methods = [resolve_method(m) for m in (methods or [cfg.method])]
    timings = {}

    t0 = time.perf_counter()
    bench = prepare_benchmark(cfg)
    timings["gen_data"] = time.perf_counter() - t0

    curve = None
    t0 = time.perf_counter()
    if source_model is None:
        source_model, curve = build_source_model(cfg, bench)
    timings["train_source"] = time.perf_counter() - t0

    trial = make_trial(cfg, bench)
    source_acc = eval_accuracy(source_model, trial.remainder)

    stage1 = None
    stage1_acc = None
    t0 = time.perf_counter()
    if any(m in STAGE1_METHODS for m in methods):
        stage1 = run_stage1(cfg, trial, source_model)
        stage1_acc = eval_accuracy(stage1.tuned, trial.remainder)
    timings["finetune"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    per_method = {m: run_method(cfg, trial, source_model, m, stage1) for m in methods}
    timings["adapt"] = time.perf_counter() - t0

    return {
        "schema": RUN_SCHEMA,
        "config": json.loads(serialize(cfg)),
        "config_hash": config_hash(cfg),
        "seeds": trial.seeds,
        "num_classes": bench.class_count,
        "stream_batches": len(per_method[methods[0]]["curve"]),
        "source_accuracy": source_acc,
        "stage1_accuracy": stage1_acc,
        "source_curve": curve,
        "stage1_trace": stage1.trace if stage1 else None,
        "methods": per_method,
        "seconds": timings,
    }


# -- sweeps --------------------------------------------------------------

SWEEP_DEFAULTS = {
    "alpha": (0.0, 0.3, 0.6, 1.0),
    "kshot": (1, 3, 5, 10),
    "batch": (8, 16, 32, 64, 128),
}


def sweep(cfg: RunConfig, axis: str, values=None, trial_seeds=(0, 1, 2, 3, 4),
          source_model: Backbone = None, bench: Bench = None) -> dict:
    """One fs_tta run per (value, trial seed); aggregates mean and std.

    Stage 1 is shared across values that do not change it (alpha, batch);
    the kshot axis re-splits and re-tunes per value. The alpha=0 rows are
    checked against the post-fine-tuning accuracy, which they must equal.
    """
    if axis not in SWEEP_DEFAULTS:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_DEFAULTS)}")
    values = list(values) if values is not None else list(SWEEP_DEFAULTS[axis])
    if not values:
        raise ConfigError("sweep needs at least one value")

    bench = bench or prepare_benchmark(cfg)
    if source_model is None:
        source_model, _ = build_source_model(cfg, bench)

    # per-trial stage 1 cache, keyed by the knobs that feed it
    cache: dict = {}

    def trial_and_stage1(trial_cfg):
        key = (trial_cfg.effective_trial_seed, trial_cfg.k)
        if key not in cache:
            trial = make_trial(trial_cfg, bench)
            cache[key] = (trial, run_stage1(trial_cfg, trial, source_model))
        return cache[key]

    rows = []
    alpha0_checks = []
    for value in values:
        accs = []
        secs = []
        samples = 0
        for seed in trial_seeds:
            run_cfg = replace(cfg, trial_seed=seed)
            if axis == "alpha":
                run_cfg = replace(run_cfg, adapt=replace(cfg.adapt, alpha=value))
            elif axis == "kshot":
                run_cfg = replace(run_cfg, k=value)
            else:
                run_cfg = replace(run_cfg, adapt=replace(cfg.adapt, batch_size=value))
            trial, stage1 = trial_and_stage1(run_cfg)
            result = run_method(run_cfg, trial, source_model, "fs_tta", stage1)
            accs.append(result["final_accuracy"])
            secs.append(result["seconds"])
            samples = result["total"]
            if axis == "alpha" and value == 0.0:
                stage1_acc = eval_accuracy(stage1.tuned, trial.remainder)
                alpha0_checks.append(result["final_accuracy"] == stage1_acc)
        rows.append({
            "value": value,
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
            "per_trial": accs,
            "seconds_mean": float(np.mean(secs)),
            "per_sample_seconds": float(np.mean(secs) / samples) if samples else None,
        })

    doc = {
        "schema": SWEEP_SCHEMA,
        "axis": axis,
        "values": values,
        "trial_seeds": list(trial_seeds),
        "config": json.loads(serialize(cfg)),
        "config_hash": config_hash(cfg),
        "rows": rows,
    }
    if axis == "alpha" and alpha0_checks:
        doc["alpha0_matches_stage1"] = all(alpha0_checks)
    return doc


def format_sweep(doc: dict) -> str:
    """Terminal table for one sweep document."""
    lines = [f"sweep over {doc['axis']} (trials: {doc['trial_seeds']})",
             f"{'value':>8}  {'mean_acc':>9}  {'std':>7}  {'sec/value':>9}"]
    for row in doc["rows"]:
        lines.append(f"{row['value']:>8}  {row['mean_accuracy']:>9.4f}  "
                     f"{row['std_accuracy']:>7.4f}  {row['seconds_mean']:>9.2f}")
    if "alpha0_matches_stage1" in doc:
        lines.append(f"alpha=0 equals post-fine-tuning accuracy: {doc['alpha0_matches_stage1']}")
    return "\n".join(lines)


# -- method comparison reports ------------------------------------------


def comparison_hash(cfg: RunConfig) -> str:
    """Hash of everything that must match for runs to be comparable.

    The method name and trial seed are the two knobs a comparison is
    allowed to vary, so they are blanked before hashing.
    """
    return config_hash(replace(cfg, method="fs_tta", trial_seed=None))


def check_comparable(docs: list, paths=None, force: bool = False) -> None:
    """Refuse metrics that were not produced on the same footing."""
    paths = paths or [f"input {i}" for i in range(len(docs))]
    for doc, path in zip(docs, paths):
        if doc.get("schema") != METRICS_SCHEMA:
            raise DataError(f"{path}: schema {doc.get('schema')!r}, expected {METRICS_SCHEMA!r}")
        for key in ("method", "final_accuracy", "num_classes", "total"):
            if key not in doc:
                raise DataError(f"{path}: metrics file missing {key!r}")
    classes = {doc["num_classes"] for doc in docs}
    if len(classes) > 1:
        offender = paths[[doc["num_classes"] for doc in docs].index(sorted(classes)[1])]
        raise DataError(f"{offender}: class count differs across inputs ({sorted(classes)})")
    if force:
        return
    for key in ("data_hash", "comparison_hash"):
        seen = {}
        for doc, path in zip(docs, paths):
            seen.setdefault(doc.get(key), []).append(path)
        if len(seen) > 1:
            raise DataError(f"mixed {key} across inputs ({len(seen)} distinct); "
                            "pass --force to compare anyway")


def build_report(docs: list, paths=None, force: bool = False) -> dict:
    """Side-by-side method table with deltas over the weakest baseline."""
    if not docs:
        raise DataError("report needs at least one metrics file")
    check_comparable(docs, paths, force)
    baseline = None
    for doc in docs:
        if doc["method"] == "source_only":
            baseline = doc["final_accuracy"]
            break
    if baseline is None:
        baseline = docs[0]["final_accuracy"]
    rows = []
    for doc in docs:
        rows.append({
            "method": doc["method"],
            "final_accuracy": doc["final_accuracy"],
            "delta_vs_baseline": doc["final_accuracy"] - baseline,
            "total": doc["total"],
            "batches": len(doc.get("curve", [])),
        })
    rows.sort(key=lambda r: -r["final_accuracy"])
    return {"baseline_accuracy": baseline, "rows": rows}


def format_report(report: dict) -> str:
    lines = [f"{'method':<20}  {'final_acc':>9}  {'delta':>8}  {'samples':>8}"]
    for row in report["rows"]:
        lines.append(f"{row['method']:<20}  {row['final_accuracy']:>9.4f}  "
                     f"{row['delta_vs_baseline']:>+8.4f}  {row['total']:>8}")
    return "\n".join(lines)


def report_csv_rows(report: dict) -> list:
    return [{k: row[k] for k in ("method", "final_accuracy", "delta_vs_baseline", "total", "batches")}
            for row in report["rows"]]
