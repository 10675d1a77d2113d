"""
Optimization loop, metrics and ablation runs.

Training uses AdamW with decoupled weight decay, a linear learning-rate
warm-up followed by a constant rate, global-norm gradient clipping and
early stopping on validation accuracy. Runs are single-threaded and fully
determined by the seed.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import ops
from .errors import DivergenceError, InputError, NonFiniteError
from .model import AblationConfig, ModelConfig, WaveFormer
from .signals import DatasetSplit, WindowBatch, Windows, iterate_batches
from .tensor import RngStreams, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-5
    weight_decay: float = 1e-4
    batch: int = 64
    epochs: int = 30
    warmup_epochs: int = 5
    clip_norm: float = 1.0
    early_stop_patience: int = 5
    early_stop_min_delta: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise InputError("lr and weight_decay must be >= 0, clip_norm > 0")
        if self.batch < 1 or self.epochs < 1 or self.early_stop_patience < 1:
            raise InputError("batch, epochs and patience must be positive")
        if self.warmup_epochs < 0:
            raise InputError("warmup_epochs must be >= 0")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (the decay term is scaled by the lr)."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            dt = p.data.dtype.type
            update = (m / c1) / (np.sqrt(v / c2) + dt(self.eps)) + dt(self.weight_decay) * p.data
            p.data = (p.data - dt(lr) * update).astype(p.data.dtype, copy=False)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based optimizer ``step``.

    Rises linearly so that the last step of the warm-up epochs uses the full
    rate, then stays constant.
    """
    warm = cfg.warmup_epochs * steps_per_epoch
    if warm == 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / warm)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        f = max_norm / total
        for g in grads:
            g *= g.dtype.type(f)
    return total


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    auroc: float | None          # None when undefined (fewer than two classes present)
    confusion: np.ndarray        # rows = true class, columns = predicted class
    param_count: int = 0
    loss: float | None = None

    @property
    def auroc_text(self) -> str:
        return "undefined" if self.auroc is None else f"{self.auroc:.6f}"

    def summary(self) -> str:
        loss = "" if self.loss is None else f" loss={self.loss:.4f}"
        return (f"acc={self.accuracy:.4f} macro_f1={self.macro_f1:.4f} "
                f"auroc={self.auroc_text}{loss} params={self.param_count}")


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean())


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with midranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auroc(probs: np.ndarray, y_true: np.ndarray) -> float | None:
    """Macro one-vs-rest AUROC over the classes present in ``y_true``."""
    present = np.unique(y_true)
    if present.size < 2:
        return None
    return float(np.mean([binary_auc(probs[:, c], y_true == c) for c in present]))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def metrics_from_logits(logits: np.ndarray, y_true: np.ndarray, num_classes: int,
                        param_count: int = 0) -> MetricsReport:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise InputError("cannot compute metrics on an empty split")
    pred = np.argmax(logits, axis=1)
    cm = confusion_matrix(y_true, pred, num_classes)
    probs = softmax_np(logits.astype(np.float64))
    nll = -np.log(np.maximum(probs[np.arange(len(y_true)), y_true], 1e-300)).mean()
    return MetricsReport(
        accuracy=float((pred == y_true).mean()),
        macro_f1=macro_f1(cm),
        auroc=macro_auroc(probs, y_true),
        confusion=cm,
        param_count=param_count,
        loss=float(nll),
    )


def evaluate(model: WaveFormer, data: WindowBatch, batch_size: int = 256) -> MetricsReport:
    logits = model.predict_logits(data.data, batch_size)
    return metrics_from_logits(logits, data.labels, model.config.num_classes, model.num_params)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    split: str
    loss: float
    acc: float
    f1: float
    auroc: float | None


@dataclass
class TrainResult:
    model: WaveFormer
    history: list[HistoryRow]
    best_epoch: int
    best_val_acc: float
    epochs_run: int
    stopped_early: bool
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


HISTORY_HEADER = ("epoch", "split", "loss", "acc", "f1", "auroc")


def _fmt(v: float | None) -> str:
    return "undefined" if v is None else repr(float(v))


def history_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for r in history:
        w.writerow([r.epoch, r.split, _fmt(r.loss), _fmt(r.acc), _fmt(r.f1), _fmt(r.auroc)])
    return buf.getvalue()


def _train_step(model: WaveFormer, opt: AdamW, x: np.ndarray, y: np.ndarray, lr: float,
                cfg: TrainConfig, rng: RngStreams, step: int) -> tuple[float, np.ndarray]:
    model.zero_grad()
    try:
        logits = model.forward(x, training=True, rng=rng, step=step)
        loss = ops.cross_entropy(logits, y)
    except NonFiniteError as exc:
        raise DivergenceError(f"non-finite forward value at step {step}: {exc}",
                              exc.tensor_name or exc.op) from exc
    backward(loss)
    for name, p in model.named_parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient for '{name}' at step {step}", name)
    clip_grad_norm(model.parameters(), cfg.clip_norm)
    opt.step(lr)
    return loss.item(), logits.data


def train(model: WaveFormer, train_data: WindowBatch, val_data: WindowBatch | None,
          cfg: TrainConfig = TrainConfig(), on_epoch=None) -> TrainResult:
    """Train ``model`` in place and restore the best-validation-accuracy parameters.

    Early stopping: an epoch counts as an improvement when validation
    accuracy exceeds the best so far by more than ``early_stop_min_delta``;
    training stops after ``early_stop_patience`` epochs without one.
    """
    if len(train_data) == 0:
        raise InputError("empty training set")
    K = model.config.num_classes
    opt = AdamW(model.parameters(), cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    streams = RngStreams(cfg.seed)
    spe = math.ceil(len(train_data) / cfg.batch)
    history: list[HistoryRow] = []
    best_acc, best_epoch, wait = -math.inf, 0, 0
    best_state = model.state()
    step = 0
    epoch = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        order_rng = streams.generator("shuffle", epoch)
        losses, logits_all, labels_all = [], [], []
        for idx in iterate_batches(len(train_data), cfg.batch, order_rng):
            x, y = train_data.data[idx], train_data.labels[idx]
            loss, logits = _train_step(model, opt, x, y, lr_at(step, spe, cfg), cfg, streams, step)
            losses.append(loss * len(idx))
            logits_all.append(logits)
            labels_all.append(y)
            step += 1
        tr = metrics_from_logits(np.concatenate(logits_all), np.concatenate(labels_all), K)
        history.append(HistoryRow(epoch, "train", sum(losses) / len(train_data),
                                  tr.accuracy, tr.macro_f1, tr.auroc))
        monitor = val_data if val_data is not None and len(val_data) else None
        if monitor is not None:
            va = evaluate(model, monitor)
            history.append(HistoryRow(epoch, "val", va.loss, va.accuracy, va.macro_f1, va.auroc))
            acc = va.accuracy
        else:
            acc = tr.accuracy
        if on_epoch is not None:
            on_epoch(epoch, history)
        log.info("epoch %d lr=%.3g %s", epoch, lr_at(step - 1, spe, cfg),
                 " ".join(f"{r.split}:loss={r.loss:.4f},acc={r.acc:.4f}"
                          for r in history if r.epoch == epoch))
        if acc > best_acc + cfg.early_stop_min_delta:
            best_acc, best_epoch, wait = acc, epoch, 0
            best_state = model.state()
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                stopped = True
                break
    model.load_state(best_state)
    return TrainResult(model, history, best_epoch, best_acc, epoch, stopped, best_state)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

VARIANTS = {
    "full": AblationConfig(True, True),
    "no_waveletconv": AblationConfig(False, True),
    "no_rope": AblationConfig(True, False),
}


@dataclass
class AblationRow:
    variant: str
    ablation: AblationConfig
    metrics: MetricsReport
    best_epoch: int


def fit_and_score(model_cfg: ModelConfig, ablation: AblationConfig, windows: Windows,
                  split: DatasetSplit, cfg: TrainConfig, model_seed: int | None = None
                  ) -> tuple[TrainResult, MetricsReport]:
    model = WaveFormer(model_cfg, ablation, seed=cfg.seed if model_seed is None else model_seed)
    res = train(model, windows.subset(split.train).batch(), windows.subset(split.val).batch(), cfg)
    return res, evaluate(model, windows.subset(split.test).batch())


def ablation_run(windows: Windows, split: DatasetSplit, model_cfg: ModelConfig,
                 cfg: TrainConfig, variants: Sequence[str] = tuple(VARIANTS)) -> list[AblationRow]:
    """Train every variant under the same seed and configuration; score on the test split."""
    rows = []
    for name in variants:
        res, rep = fit_and_score(model_cfg, VARIANTS[name], windows, split, cfg)
        rows.append(AblationRow(name, VARIANTS[name], rep, res.best_epoch))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["variant,acc,f1,auroc,params"]
    for r in rows:
        m = r.metrics
        lines.append(f"{r.variant},{m.accuracy:.6f},{m.macro_f1:.6f},{m.auroc_text},{m.param_count}")
    return "\n".join(lines) + "\n"


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
