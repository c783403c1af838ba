"""Support-set fine-tuning with feature-statistics mixing.

Takes the source model plus the k-per-class labeled target samples and
minimizes mean cross-entropy for a fixed epoch budget. Mixing plans are
drawn fresh every step, so each epoch sees different synthetic styles.
The whole support set rides in one batch whenever it fits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SupportSet, records_as_arrays
from .errors import ConfigError, DataError, NumericError
from .fda import FdaConfig, make_plans
from .model import Backbone, predict
from .optim import Adam
from .tensor import softmax_cross_entropy

__all__ = ["SupportSet", "FinetuneConfig", "finetune", "eval_accuracy", "write_loss_trace"]


@dataclass
class FinetuneConfig:
    """Stage I knobs; epochs=0 is a valid no-op budget."""

    epochs: int = 50
    lr: float = 5e-5
    batch_size: int = 64
    fda: FdaConfig = field(default_factory=FdaConfig)
    seed: int = 0
    groups: tuple = ("conv", "norm_affine", "head")

    def __post_init__(self):
        self.groups = tuple(self.groups)
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def finetune(model: Backbone, support: SupportSet, cfg: FinetuneConfig):
    """Fine-tune a copy of the model on the support set.

    Returns (tuned_model, trace) where trace rows carry epoch, mean training
    loss, and post-epoch support accuracy. The input model is not touched.
    A non-finite loss aborts immediately rather than training on garbage.
    """
    tuned = model.copy()
    x, y = records_as_arrays(support.samples)
    n = x.shape[0]
    trace = []
    if cfg.epochs == 0:
        return tuned, trace

    opt = Adam(tuned.trainable_params(cfg.groups), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    full_batch = n <= cfg.batch_size

    for epoch in range(1, cfg.epochs + 1):
        if full_batch:
            starts = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            starts = [perm[i: i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        losses = []
        for idx in starts:
            xb, yb = x[idx], y[idx]
            plans = make_plans(len(idx), rng, cfg.fda)
            _, logits = tuned.forward(xb, mode="train", fda_plans=plans,
                                      fda_eps=cfg.fda.eps, fda_detach=cfg.fda.detach_mixed)
            loss = softmax_cross_entropy(logits, yb)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"fine-tuning diverged at epoch {epoch}: loss={val}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(val)
        acc = float(np.mean(predict(tuned, x) == y))
        trace.append({"epoch": epoch, "loss": float(np.mean(losses)), "support_acc": acc})
    return tuned, trace


def eval_accuracy(model: Backbone, dataset) -> float:
    """Top-1 accuracy in eval mode; never changes the model."""
    if isinstance(dataset, Dataset):
        records = dataset.records
    else:
        records = list(dataset)
    if not records:
        raise DataError("cannot evaluate on an empty dataset")
    x, y = records_as_arrays(records)
    return float(np.mean(predict(model, x) == y))


def write_loss_trace(path, trace) -> None:
    """Dump finetune trace rows as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "support_acc"])
        writer.writeheader()
        for row in trace:
            writer.writerow(row)
