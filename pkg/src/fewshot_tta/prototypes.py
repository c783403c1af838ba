"""Per-class prototype memory: support-set initialization, sliding updates
from filtered pseudo-labeled features, and cosine-softmax classification.

Prototypes are plain numpy state; nothing here participates in gradient
computation; the bank guides the online loop rather than being trained.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateSimilarityWarning


@dataclass
class PrototypeBank:
    """One centroid per class plus EMA bookkeeping."""

    prototypes: np.ndarray
    ema_beta: float = 0.9
    update_counts: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2:
            raise ConfigError(f"prototypes must be C x D, got shape {self.prototypes.shape}")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ConfigError(f"ema_beta must be in [0, 1], got {self.ema_beta}")
        if not np.all(np.isfinite(self.prototypes)):
            raise DataError("non-finite prototype values")
        if self.update_counts is None:
            self.update_counts = np.zeros(self.prototypes.shape[0], dtype=np.int64)

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.ema_beta,
                             self.update_counts.copy(), self.t)

    def to_snapshot(self) -> dict:
        """JSON-ready view of the bank for debugging and reports."""
        return {
            "prototypes": self.prototypes.tolist(),
            "ema_beta": self.ema_beta,
            "update_counts": self.update_counts.tolist(),
            "t": self.t,
        }

    @classmethod
    def from_snapshot(cls, doc: dict) -> "PrototypeBank":
        return cls(np.array(doc["prototypes"], dtype=np.float64), doc["ema_beta"],
                   np.array(doc["update_counts"], dtype=np.int64), doc["t"])

    def save_snapshot(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_snapshot(), f)
            f.write("\n")


def init_bank(embeddings, labels, class_count: int, ema_beta: float = 0.9) -> PrototypeBank:
    """Build the bank as per-class means of the support embeddings.

    Every class must appear at least once; the offender is named otherwise.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if emb.ndim != 2 or emb.shape[0] != y.shape[0]:
        raise DataError(f"embeddings {emb.shape} do not align with labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise DataError(f"label out of range for {class_count} classes")
    protos = np.empty((class_count, emb.shape[1]), dtype=np.float64)
    for c in range(class_count):
        members = emb[y == c]
        if members.shape[0] == 0:
            raise DataError(f"class {c} has no support samples")
        protos[c] = members.mean(axis=0)
    return PrototypeBank(protos, ema_beta=ema_beta)


def ema_update(bank: PrototypeBank, embeddings, pseudo_labels) -> PrototypeBank:
    """Slide each observed class's prototype toward its batch mean.

    m_c <- beta * m_c + (1 - beta) * mean(features pseudo-labeled c); classes
    absent from the batch keep their prototype bitwise. The time step
    increments once per call, even on an empty batch.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(pseudo_labels, dtype=np.int64)
    if emb.ndim == 1:
        emb = emb[None, :]
    if y.ndim == 0:
        y = y[None]
    if emb.shape[0] != y.shape[0]:
        raise DataError(f"embeddings {emb.shape} do not align with labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= bank.class_count):
        raise DataError(f"pseudo-label out of range for {bank.class_count} classes")
    beta = bank.ema_beta
    for c in np.unique(y):
        members = emb[y == c]
        bank.prototypes[c] = beta * bank.prototypes[c] + (1.0 - beta) * members.mean(axis=0)
        bank.update_counts[c] += members.shape[0]
    bank.t += 1
    return bank


def proto_classify(bank: PrototypeBank, features, temperature: float = 1.0) -> np.ndarray:
    """Cosine-softmax class probabilities against the prototypes.

    features may be one D vector (returns C probabilities) or an N x D batch
    (returns N x C). Zero-norm features or prototypes contribute similarity 0
    and raise a degenerate-similarity warning, mirroring cosine_sim.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    if f.shape[1] != bank.prototypes.shape[1]:
        raise DataError(f"feature dim {f.shape[1]} != prototype dim {bank.prototypes.shape[1]}")

    f_norms = np.linalg.norm(f, axis=1)
    p_norms = np.linalg.norm(bank.prototypes, axis=1)
    if np.any(f_norms == 0.0) or np.any(p_norms == 0.0):
        warnings.warn("cosine similarity of a zero-norm vector, returning 0",
                      DegenerateSimilarityWarning)
    f_unit = np.divide(f, f_norms[:, None], out=np.zeros_like(f), where=f_norms[:, None] != 0)
    p_unit = np.divide(bank.prototypes, p_norms[:, None],
                       out=np.zeros_like(bank.prototypes), where=p_norms[:, None] != 0)
    sims = np.clip(f_unit @ p_unit.T, -1.0, 1.0)

    z = sims / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if single else probs
