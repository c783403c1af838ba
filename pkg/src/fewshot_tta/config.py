"""Run configuration: one serializable object that reaches every stage.

A run is seeded by master_seed (benchmark data and source-model init) and
trial_seed (support split, mixing draws, stream order). trial_seed defaults
to master_seed, so a single seed reproduces the whole run; sweeps vary
trial_seed to re-roll the adaptation while sharing data and source model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import BenchmarkConfig
from .errors import ConfigError
from .fda import FdaConfig
from .finetune import FinetuneConfig
from .model import SourceConfig
from .seeding import sub_seed
from .stream import AdaptConfig, resolve_method


@dataclass
class RunConfig:
    """Everything tunable, nested per stage."""

    master_seed: int = 0
    trial_seed: int | None = None
    method: str = "fs_tta"
    k: int = 5
    widths: tuple = (3, 16, 32, 32)
    stream_order: str = "shuffled"
    ema_beta: float = 0.9
    data: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        resolve_method(self.method)
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ConfigError(f"ema_beta must be in [0, 1], got {self.ema_beta}")
        if self.stream_order not in ("shuffled", "sorted"):
            raise ConfigError(f"stream_order must be shuffled or sorted, got {self.stream_order!r}")

    @property
    def effective_trial_seed(self) -> int:
        return self.master_seed if self.trial_seed is None else self.trial_seed


def seed_plan(cfg: RunConfig) -> dict[str, int]:
    """Named sub-seeds: data/init ride the master, the rest ride the trial."""
    trial = cfg.effective_trial_seed
    return {
        "data": cfg.master_seed,
        "init": cfg.master_seed,
        "support": sub_seed(trial, "support"),
        "fda": sub_seed(trial, "fda"),
        "stream": sub_seed(trial, "stream"),
    }


def serialize(cfg: RunConfig) -> str:
    """Canonical JSON; stable key order so equal configs hash equally."""
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, indent=2)


def _pick(d: dict, cls, **coerced):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: v for k, v in d.items()}
    kwargs.update({k: v for k, v in coerced.items() if k in d})
    return cls(**kwargs)


def from_dict(doc: dict) -> RunConfig:
    """Rebuild a RunConfig from parsed JSON, restoring tuple-typed fields."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    doc = dict(doc)
    sub = {}
    if "data" in doc:
        d = doc.pop("data")
        sub["data"] = _pick(d, BenchmarkConfig,
                            source_gains=tuple(tuple(g) for g in d.get("source_gains", ())),
                            source_biases=tuple(tuple(b) for b in d.get("source_biases", ())),
                            target_gain=tuple(d.get("target_gain", ())),
                            target_bias=tuple(d.get("target_bias", ())))
    if "source" in doc:
        sub["source"] = _pick(doc.pop("source"), SourceConfig)
    if "finetune" in doc:
        d = dict(doc.pop("finetune"))
        if "fda" in d:
            d["fda"] = _pick(d["fda"], FdaConfig, sites=tuple(d["fda"].get("sites", ())))
        if "groups" in d:
            d["groups"] = tuple(d["groups"])
        sub["finetune"] = _pick(d, FinetuneConfig)
    if "adapt" in doc:
        d = dict(doc.pop("adapt"))
        if "groups" in d:
            d["groups"] = tuple(d["groups"])
        sub["adapt"] = _pick(d, AdaptConfig)
    if "widths" in doc:
        doc["widths"] = tuple(doc["widths"])
    return _pick({**doc, **sub}, RunConfig)


def parse(text: str) -> RunConfig:
    """Inverse of serialize; parse(serialize(c)) == c for every valid c."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(doc)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())


def config_hash(cfg: RunConfig) -> str:
    """Hex digest identifying the exact configuration."""
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
