"""The online adaptation loop and its baseline adapters.

Per arriving batch: predict with the current model, keep the most confident
fraction, pseudo-label it, slide the prototype bank, mask samples whose head
and prototype predictions disagree, and take one masked self-training step.
Predictions are always recorded before any update, so reported accuracy is
honest online accuracy. Ground-truth labels ride along in StreamBatch purely
for evaluation; the adaptation functions never receive them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import Backbone
from .optim import Adam
from .prototypes import PrototypeBank, ema_update, proto_classify
from .tensor import Tensor, log, mul, neg, no_grad, softmax, softmax_entropy, take_rows, tsum

BASELINE_KINDS = ("source_only", "norm_stat", "entropy_min", "ft_only",
                  "ft_plus_entropy_min", "fs_tta")

METHOD_ALIASES = {
    "erm": "source_only",
    "bn": "norm_stat",
    "tent": "entropy_min",
    "ft": "ft_only",
    "ft_tent": "ft_plus_entropy_min",
    "fs_tta": "fs_tta",
}


def resolve_method(name: str) -> str:
    """Map a CLI alias or canonical name onto a BaselineKind."""
    kind = METHOD_ALIASES.get(name, name)
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(METHOD_ALIASES)}")
    return kind


@dataclass
class StreamBatch:
    """One arriving mini-batch. hidden_labels exist for scoring only."""

    inputs: np.ndarray
    hidden_labels: np.ndarray


@dataclass
class AdaptConfig:
    """Stage II knobs."""

    alpha: float = 0.6
    batch_size: int = 64
    lr: float = 5e-5
    groups: tuple = ("conv", "norm_affine", "head")
    predict_with: str = "head"
    tau: float = 1.0

    def __post_init__(self):
        self.groups = tuple(self.groups)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.predict_with not in ("head", "proto"):
            raise ConfigError(f"predict_with must be head or proto, got {self.predict_with!r}")


@dataclass
class AdaptState:
    """Everything the online loop owns while consuming a stream."""

    model: Backbone
    bank: PrototypeBank | None
    opt: Adam | None
    cfg: AdaptConfig
    online_correct: int = 0
    online_total: int = 0
    selected_total: int = 0
    mask_total: int = 0
    loss_skipped: int = 0
    rows: list = field(default_factory=list)

    @property
    def online_accuracy(self) -> float:
        return self.online_correct / self.online_total if self.online_total else 0.0


def init_adapt_state(model: Backbone, bank: PrototypeBank | None, cfg: AdaptConfig,
                     trainable: bool = True) -> AdaptState:
    opt = Adam(model.trainable_params(cfg.groups), lr=cfg.lr) if trainable else None
    return AdaptState(model=model, bank=bank, opt=opt, cfg=cfg)


# -- per-sample primitives ----------------------------------------------


def entropy(p) -> float:
    """Shannon entropy of one probability vector, with 0 * log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0.0, p, 1.0)
    return float(-np.sum(np.where(p > 0.0, p * np.log(safe), 0.0)))


def _row_entropies(probs: np.ndarray) -> np.ndarray:
    safe = np.where(probs > 0.0, probs, 1.0)
    return -np.sum(np.where(probs > 0.0, probs * np.log(safe), 0.0), axis=1)


def entropy_filter(batch_probs, alpha: float) -> np.ndarray:
    """Indices of the floor(alpha * B) lowest-entropy rows.

    Ties go to the lower batch index; the result is in ascending index order.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    probs = np.asarray(batch_probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError(f"batch_probs must be B x C, got shape {probs.shape}")
    b = probs.shape[0]
    # the tiny slack keeps an intended-integer product like 0.3 * 10 from
    # truncating one short under floating point
    take = int(np.floor(alpha * b + 1e-9))
    if take == 0:
        return np.empty(0, dtype=np.intp)
    ent = _row_entropies(probs)
    ranked = np.lexsort((np.arange(b), ent))
    return np.sort(ranked[:take])


def pseudo_label(logits) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DataError(f"logits must be B x C, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DataError("non-finite logits")
    return np.argmax(z, axis=1)


def consistency_mask(model_probs, proto_probs) -> np.ndarray:
    """1 where the head's argmax and the prototype argmax agree, else 0."""
    p = np.asarray(model_probs, dtype=np.float64)
    q = np.asarray(proto_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError(f"probability shapes differ: {p.shape} vs {q.shape}")
    if p.ndim == 1:
        p, q = p[None, :], q[None, :]
    return (np.argmax(p, axis=1) == np.argmax(q, axis=1)).astype(np.int64)


def online_loss(probs: Tensor, pseudo_labels, masks):
    """Masked mean self-training loss over the selected samples.

    probs is the graph-connected N x C softmax output; the loss is
    sum(-log probs[j, label_j] * mask_j) / sum(mask_j). Returns None when
    every mask is zero, which callers treat as "no update this batch".
    """
    y = np.asarray(pseudo_labels, dtype=np.int64)
    m = np.asarray(masks, dtype=np.float64)
    n, c = probs.shape
    if y.shape != (n,) or m.shape != (n,):
        raise DataError(f"labels {y.shape} / masks {m.shape} do not align with probs {probs.shape}")
    if n == 0 or m.sum() == 0:
        return None
    if y.min() < 0 or y.max() >= c:
        raise DataError(f"pseudo-label out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    picked = tsum(mul(probs, Tensor(onehot)), axis=1)
    weighted = mul(neg(log(picked)), Tensor(m))
    return tsum(weighted) / float(m.sum())


def entropy_min_loss(logits: Tensor) -> Tensor:
    """Mean prediction entropy of a batch; the entropy-minimization objective."""
    return softmax_entropy(logits).mean()


# -- the adaptation step -------------------------------------------------


def adapt_batch(state: AdaptState, inputs) -> np.ndarray:
    """Consume one unlabeled batch; returns the predictions made on arrival.

    One eval-mode forward serves prediction, filtering, and the training
    loss, so predictions always reflect the pre-update model. The bank
    update runs before prototype classification. A non-finite loss skips
    the step and the stream continues.
    """
    if state.bank is None:
        raise ConfigError("adapt_batch needs an initialized prototype bank")
    x = np.asarray(inputs, dtype=np.float64)
    emb, logits = state.model.forward(x, mode="eval")
    probs = softmax(logits)
    if state.cfg.predict_with == "proto":
        preds = np.argmax(proto_classify(state.bank, emb.data, state.cfg.tau), axis=1)
    else:
        preds = np.argmax(logits.data, axis=1)

    sel = entropy_filter(probs.data, state.cfg.alpha)
    pseudo = pseudo_label(logits.data[sel])
    ema_update(state.bank, emb.data[sel], pseudo)
    proto_probs = proto_classify(state.bank, emb.data[sel], state.cfg.tau)
    masks = consistency_mask(probs.data[sel], proto_probs)

    loss = online_loss(take_rows(probs, sel), pseudo, masks)
    loss_val = float("nan")
    if loss is not None:
        loss_val = loss.item()
        if np.isfinite(loss_val):
            state.opt.zero_grad()
            loss.backward()
            state.opt.step()
        else:
            state.loss_skipped += 1

    state.selected_total += int(sel.size)
    state.mask_total += int(masks.sum())
    state.rows.append({
        "selected": int(sel.size),
        "mask_rate": float(masks.mean()) if masks.size else 0.0,
        "loss": loss_val,
    })
    return preds


def tent_batch(state: AdaptState, inputs) -> np.ndarray:
    """One entropy-minimization step; predictions are pre-update."""
    x = np.asarray(inputs, dtype=np.float64)
    _, logits = state.model.forward(x, mode="eval")
    preds = np.argmax(logits.data, axis=1)
    loss = entropy_min_loss(logits)
    loss_val = loss.item()
    if np.isfinite(loss_val):
        state.opt.zero_grad()
        loss.backward()
        state.opt.step()
    else:
        state.loss_skipped += 1
    state.rows.append({"selected": x.shape[0], "mask_rate": 1.0, "loss": loss_val})
    return preds


# -- stream plumbing -----------------------------------------------------


def make_stream(records, batch_size: int, seed: int, order: str = "shuffled") -> list[StreamBatch]:
    """Partition records into arriving batches.

    order "shuffled" permutes once with the seed; "sorted" streams
    class-by-class, the non-i.i.d. stress layout.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if order not in ("shuffled", "sorted"):
        raise ConfigError(f"order must be shuffled or sorted, got {order!r}")
    if not records:
        raise DataError("empty stream")
    x = np.stack([rec.pixels for rec in records])
    y = np.array([rec.label for rec in records], dtype=np.int64)
    if order == "shuffled":
        perm = np.random.default_rng(seed).permutation(len(records))
    else:
        perm = np.argsort(y, kind="stable")
    x, y = x[perm], y[perm]
    return [StreamBatch(inputs=x[i: i + batch_size], hidden_labels=y[i: i + batch_size])
            for i in range(0, len(records), batch_size)]


@dataclass
class StreamMetrics:
    """What one method did on one stream."""

    method: str
    correct: int
    total: int
    rows: list
    accuracy_curve: list
    selected_total: int = 0
    mask_total: int = 0
    loss_skipped: int = 0
    adam_skipped: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def run_baseline(kind: str, model: Backbone, stream: list[StreamBatch], cfg: AdaptConfig,
                 bank: PrototypeBank | None = None) -> StreamMetrics:
    """Run one adapter over a stream and score its online predictions.

    The model passed in must already match the kind: fine-tuned for the ft_*
    kinds and for fs_tta (which also needs the support-initialized bank).
    Hidden labels are only touched here, after each batch's predictions.
    """
    kind = resolve_method(kind)
    if kind == "fs_tta" and bank is None:
        raise ConfigError("fs_tta needs a support-initialized prototype bank")

    if kind == "entropy_min" or kind == "ft_plus_entropy_min":
        state = init_adapt_state(model, None, AdaptConfig(
            alpha=cfg.alpha, batch_size=cfg.batch_size, lr=cfg.lr,
            groups=("norm_affine",), predict_with="head", tau=cfg.tau))
    elif kind == "fs_tta":
        state = init_adapt_state(model, bank, cfg)
    else:
        state = init_adapt_state(model, None, cfg, trainable=False)

    correct = 0
    total = 0
    curve = []
    for batch in stream:
        if kind == "fs_tta":
            preds = adapt_batch(state, batch.inputs)
        elif kind in ("entropy_min", "ft_plus_entropy_min"):
            preds = tent_batch(state, batch.inputs)
        elif kind == "norm_stat":
            with no_grad():
                _, logits = model.forward(batch.inputs, mode="eval", batch_stats=True)
            preds = np.argmax(logits.data, axis=1)
            state.rows.append({"selected": 0, "mask_rate": 0.0, "loss": float("nan")})
        else:
            with no_grad():
                _, logits = model.forward(batch.inputs, mode="eval")
            preds = np.argmax(logits.data, axis=1)
            state.rows.append({"selected": 0, "mask_rate": 0.0, "loss": float("nan")})

        batch_correct = int(np.sum(preds == batch.hidden_labels))
        correct += batch_correct
        total += len(batch.hidden_labels)
        state.online_correct = correct
        state.online_total = total
        row = state.rows[-1]
        row["batch_correct"] = batch_correct
        row["batch_size"] = len(batch.hidden_labels)
        row["cumulative_accuracy"] = correct / total
        curve.append(correct / total)

    return StreamMetrics(
        method=kind, correct=correct, total=total, rows=state.rows,
        accuracy_curve=curve, selected_total=state.selected_total,
        mask_total=state.mask_total, loss_skipped=state.loss_skipped,
        adam_skipped=state.opt.state.skipped_steps if state.opt else 0)
