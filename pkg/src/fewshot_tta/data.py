"""Synthetic multi-domain image data and the TTAD on-disk format.

Each class owns a fixed spatial template (a Gaussian blob plus a sinusoidal
pattern per channel, shared by every domain). A domain restyles templates with
a per-channel affine map and additive noise, so per-channel statistics carry
the domain identity while spatial structure carries the class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    TruncatedFileError,
    VersionMismatchError,
)
from .seeding import sub_seed

DATASET_MAGIC = b"TTAD"
DATASET_VERSION = 1


@dataclass
class DomainSpec:
    """Per-channel affine style and noise level of one domain."""

    domain_id: int
    gain: np.ndarray
    bias: np.ndarray
    noise_std: float
    seed: int

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.gain.shape != self.bias.shape:
            raise ConfigError(f"gain shape {self.gain.shape} != bias shape {self.bias.shape}")
        if np.any(self.gain <= 0):
            raise ConfigError(f"domain {self.domain_id}: gain values must be > 0, got {self.gain}")
        if self.noise_std < 0:
            raise ConfigError(f"domain {self.domain_id}: noise_std must be >= 0, got {self.noise_std}")


@dataclass
class SampleRecord:
    """One labeled image: class index, C x H x W float64 pixels, origin domain."""

    label: int
    pixels: np.ndarray
    domain_id: int


@dataclass
class Dataset:
    """In-memory view of one TTAD file."""

    records: list[SampleRecord]
    num_classes: int
    domain_id: int


@dataclass
class SupportSet:
    """The k labeled target samples per class used for fine-tuning."""

    samples: list[SampleRecord]
    k: int
    class_count: int

    def __post_init__(self):
        counts = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        missing = [c for c in range(self.class_count) if counts.get(c, 0) == 0]
        if missing:
            raise DataError(f"support set missing class {missing[0]}")
        bad = {c: n for c, n in counts.items() if n != self.k}
        if bad:
            raise DataError(f"support set must hold exactly {self.k} samples per class, got {bad}")


def class_templates(class_count: int, image_size: int, channels: int = 3,
                    template_seed: int = 0) -> np.ndarray:
    """Canonical spatial pattern per class, shape (class_count, channels, H, W).

    Deterministic in (class_count, image_size, channels, template_seed) and
    independent of any domain, so every domain restyles the same shapes.
    """
    if class_count < 2:
        raise ConfigError(f"need at least 2 classes, got {class_count}")
    if image_size < 4:
        raise ConfigError(f"image_size must be >= 4, got {image_size}")
    rng = np.random.default_rng(template_seed)
    grid = np.linspace(0.0, 1.0, image_size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((class_count, channels, image_size, image_size), dtype=np.float64)
    for c in range(class_count):
        for ch in range(channels):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            width = rng.uniform(0.12, 0.3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width * width))
            fy, fx = rng.integers(1, 4, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = 0.5 * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
            out[c, ch] = blob + wave
    return out


def gen_domain(class_count: int, per_class_count: int, spec: DomainSpec,
               image_size: int, template_seed: int = 0) -> list[SampleRecord]:
    """Draw per_class_count samples per class in one domain's style.

    sample = gain * template(class) + bias + N(0, noise_std^2), per channel.
    Pure function of (arguments, seeds); samples come out class-major.
    """
    if per_class_count < 1:
        raise ConfigError(f"per_class_count must be >= 1, got {per_class_count}")
    channels = spec.gain.shape[0]
    templates = class_templates(class_count, image_size, channels, template_seed)
    rng = np.random.default_rng(spec.seed)
    gain = spec.gain[:, None, None]
    bias = spec.bias[:, None, None]
    records = []
    for c in range(class_count):
        styled = gain * templates[c] + bias
        for _ in range(per_class_count):
            noise = rng.normal(0.0, spec.noise_std, size=styled.shape)
            records.append(SampleRecord(label=c, pixels=styled + noise, domain_id=spec.domain_id))
    return records


def split_support(target_data: list[SampleRecord], k: int, seed: int) -> tuple[SupportSet, list[SampleRecord]]:
    """Carve k seeded samples per class out of the target data.

    Returns the support set and the disjoint remainder (original order), which
    becomes the unlabeled stream.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(target_data):
        by_class.setdefault(rec.label, []).append(i)
    class_count = len(by_class)
    for c in sorted(by_class):
        if len(by_class[c]) < k:
            raise DataError(f"class {c} has only {len(by_class[c])} samples, need k={k}")
    rng = np.random.default_rng(seed)
    chosen: set[int] = set()
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        rng.shuffle(idx)
        chosen.update(idx[:k].tolist())
    support = [target_data[i] for i in sorted(chosen)]
    remainder = [rec for i, rec in enumerate(target_data) if i not in chosen]
    return SupportSet(support, k, class_count), remainder


# -- TTAD binary format --------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, n, C, H, W, num_classes, domain_id


def write_dataset(path, records: list[SampleRecord], num_classes: int,
                  domain_id: int | None = None) -> None:
    """Write records as one little-endian TTAD file (u16 labels, f32 pixels)."""
    if records:
        shapes = {rec.pixels.shape for rec in records}
        if len(shapes) > 1:
            raise DataError(f"records disagree on pixel shape: {sorted(shapes)}")
        domains = {rec.domain_id for rec in records}
        if len(domains) > 1:
            raise DataError(f"one file holds one domain, got ids {sorted(domains)}")
        if domain_id is None:
            domain_id = records[0].domain_id
        c, h, w = records[0].pixels.shape
    else:
        if domain_id is None:
            raise DataError("empty dataset needs an explicit domain_id")
        c = h = w = 0
    for rec in records:
        if not 0 <= rec.label < num_classes:
            raise DataError(f"label {rec.label} out of range for {num_classes} classes")
        if not np.all(np.isfinite(rec.pixels)):
            raise DataError("non-finite pixel values")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(records), c, h, w,
                             num_classes, domain_id))
        for rec in records:
            f.write(struct.pack("<H", rec.label))
            f.write(rec.pixels.astype("<f4").tobytes())


def read_dataset(path) -> Dataset:
    """Read a TTAD file back; pixels come out float64 (f32-exact values)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the header")
    magic, version, n, c, h, w, num_classes, domain_id = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, this reader handles {DATASET_VERSION}")
    rec_bytes = 2 + 4 * c * h * w
    expected = _HEADER.size + n * rec_bytes
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes for {n} records, got {len(raw)}")
    records = []
    off = _HEADER.size
    for _ in range(n):
        (label,) = struct.unpack_from("<H", raw, off)
        off += 2
        pixels = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).astype(np.float64)
        off += 4 * c * h * w
        records.append(SampleRecord(label=int(label), pixels=pixels.reshape(c, h, w),
                                    domain_id=domain_id))
    return Dataset(records=records, num_classes=num_classes, domain_id=domain_id)


# -- default desk-scale benchmark ---------------------------------------

@dataclass
class BenchmarkConfig:
    """The default desk-scale generation recipe: 3 source styles, 1 far target."""

    class_count: int = 6
    per_class_count: int = 200
    image_size: int = 16
    channels: int = 3
    source_gains: tuple = ((1.0, 1.0, 1.0), (1.3, 0.8, 1.1), (0.7, 1.2, 0.9))
    source_biases: tuple = ((0.0, 0.0, 0.0), (0.2, -0.1, 0.05), (-0.2, 0.1, 0.15))
    source_noise_std: float = 0.05
    target_gain: tuple = (0.1, 1.0, 1.0)
    target_bias: tuple = (0.3, -0.2, 0.1)
    target_noise_std: float = 0.02
    master_seed: int = 0


def benchmark_domains(cfg: BenchmarkConfig) -> tuple[list[DomainSpec], DomainSpec]:
    """Instantiate the source DomainSpecs and the shifted target DomainSpec."""
    data_seed = sub_seed(cfg.master_seed, "data")
    sources = []
    for i, (gain, bias) in enumerate(zip(cfg.source_gains, cfg.source_biases)):
        sources.append(DomainSpec(domain_id=i, gain=np.array(gain), bias=np.array(bias),
                                  noise_std=cfg.source_noise_std,
                                  seed=sub_seed(data_seed, f"domain{i}")))
    target_id = len(sources)
    target = DomainSpec(domain_id=target_id, gain=np.array(cfg.target_gain),
                        bias=np.array(cfg.target_bias), noise_std=cfg.target_noise_std,
                        seed=sub_seed(data_seed, f"domain{target_id}"))
    return sources, target


def generate_benchmark(cfg: BenchmarkConfig) -> tuple[list[list[SampleRecord]], list[SampleRecord]]:
    """Generate all source domains and the target domain of the benchmark."""
    sources, target = benchmark_domains(cfg)
    template_seed = sub_seed(sub_seed(cfg.master_seed, "data"), "templates")
    source_data = [gen_domain(cfg.class_count, cfg.per_class_count, spec, cfg.image_size,
                              template_seed) for spec in sources]
    target_data = gen_domain(cfg.class_count, cfg.per_class_count, target, cfg.image_size,
                             template_seed)
    return source_data, target_data


def write_manifest(path, cfg: BenchmarkConfig, files: dict[str, str]) -> None:
    """JSON sidecar for gen-data: domains, counts, seeds, output files."""
    sources, target = benchmark_domains(cfg)
    doc = {
        "class_count": cfg.class_count,
        "per_class_count": cfg.per_class_count,
        "image_size": cfg.image_size,
        "channels": cfg.channels,
        "master_seed": cfg.master_seed,
        "domains": [
            {"domain_id": s.domain_id, "role": "source", "gain": s.gain.tolist(),
             "bias": s.bias.tolist(), "noise_std": s.noise_std, "seed": s.seed}
            for s in sources
        ] + [
            {"domain_id": target.domain_id, "role": "target", "gain": target.gain.tolist(),
             "bias": target.bias.tolist(), "noise_std": target.noise_std, "seed": target.seed}
        ],
        "files": files,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def records_as_arrays(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into (pixels N x C x H x W, labels N)."""
    if not records:
        raise DataError("empty record list")
    x = np.stack([rec.pixels for rec in records])
    y = np.array([rec.label for rec in records], dtype=np.int64)
    return x, y
