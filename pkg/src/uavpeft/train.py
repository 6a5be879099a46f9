"""Loss, Adam/AdamW, plateau scheduling, the accumulation loop and metrics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .models import Module
from .tensor import Tensor, make_op, no_grad

__all__ = [
    "OptimizerConfig",
    "Optimizer",
    "PlateauScheduler",
    "TrainConfig",
    "MetricsReport",
    "ArrayDataset",
    "FitResult",
    "cross_entropy",
    "macro_f1",
    "confusion_matrix",
    "predict",
    "train_epoch",
    "evaluate",
    "fit",
]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((g / b) * grad,)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_arch(cls, arch: str, **overrides) -> OptimizerConfig:
        """Adam for the CNN, AdamW (decay 0.01) for the transformer."""
        if arch == "transformer":
            base = dict(kind="adamw", weight_decay=0.01)
        else:
            base = dict(kind="adam", weight_decay=0.0)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"optimizer kind must be 'adam' or 'adamw', got {self.kind!r}")


class Optimizer:
    """Adam with bias correction; AdamW decays weights before the Adam term.

    State is allocated only for the parameters handed in.
    """

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    @classmethod
    def for_model(cls, model: Module, mask: dict[str, bool], cfg: OptimizerConfig) -> Optimizer:
        return cls({n: p for n, p in model.named_parameters() if mask[n]}, cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is not None and set(grads) - set(self.params):
            raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(self.params))}")
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.kind == "adamw" and cfg.weight_decay:
                p.data -= self.lr * cfg.weight_decay * p.data
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)


@dataclass
class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without improvement."""

    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# data and metrics


@dataclass
class ArrayDataset:
    x: np.ndarray  # (N, 1, n_mels, frames)
    y: np.ndarray  # (N,)
    ids: np.ndarray | None = None  # clip id of each row (provenance)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> ArrayDataset:
        return ArrayDataset(self.x[idx], self.y[idx], None if self.ids is None else self.ids[idx])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    accumulation_steps: int = 2
    max_epochs: int = 50
    early_stop_patience: int = 10
    eval_batch_size: int = 64
    seed: int = 0

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps


@dataclass
class MetricsReport:
    loss: float
    accuracy: float
    f1: float
    train_time: float = 0.0
    trainable_percent: float = 100.0
    n: int = 0


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    scores = []
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict(model: Module, data: ArrayDataset, batch_size: int = 64) -> tuple[np.ndarray, float]:
    """Eval-mode argmax predictions and mean cross-entropy."""
    was_training = model.training
    model.eval()
    preds, total = [], 0.0
    try:
        with no_grad():
            for sl in _batches(len(data), batch_size):
                logits = model(Tensor(data.x[sl]))
                total += cross_entropy(logits, data.y[sl]).item() * (sl.stop - sl.start)
                preds.append(logits.data.argmax(axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds), total / len(data)


def evaluate(model: Module, data: ArrayDataset, n_classes: int | None = None, batch_size: int = 64) -> MetricsReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    preds, loss = predict(model, data, batch_size)
    n_classes = n_classes or _n_classes(model)
    acc = float(np.mean(preds == data.y))
    return MetricsReport(loss, acc, macro_f1(data.y, preds, n_classes), n=len(data))


def _n_classes(model: Module) -> int:
    return model.cfg.n_classes


def train_epoch(
    model: Module,
    data: ArrayDataset,
    optimizer: Optimizer,
    cfg: TrainConfig,
    epoch: int = 0,
) -> MetricsReport:
    """One pass with gradient accumulation.

    Each micro-batch loss is scaled by 1/accumulation_steps before backward;
    the optimizer steps after every ``accumulation_steps`` micro-batches and
    once more for a trailing partial group.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model.train()
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
    micro = list(_batches(len(data), cfg.batch_size))
    losses, correct = [], 0
    preds = np.empty(len(data), dtype=np.int64)
    start = time.perf_counter()
    optimizer.zero_grad()
    for i, sl in enumerate(micro):
        idx = order[sl]
        logits = model(Tensor(data.x[idx]))
        loss = cross_entropy(logits, data.y[idx])
        (loss * (1.0 / cfg.accumulation_steps)).backward()
        losses.append(loss.item())
        preds[idx] = logits.data.argmax(axis=1)
        if (i + 1) % cfg.accumulation_steps == 0 or i + 1 == len(micro):
            optimizer.step()
            optimizer.zero_grad()
    elapsed = time.perf_counter() - start
    correct = float(np.mean(preds == data.y))
    return MetricsReport(
        float(np.mean(losses)), correct, macro_f1(data.y, preds, _n_classes(model)),
        train_time=elapsed, n=len(data),
    )


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best: MetricsReport
    history: list[dict] = field(default_factory=list)
    train_time: float = 0.0
    epochs_run: int = 0


def fit(
    model: Module,
    train: ArrayDataset,
    monitor: ArrayDataset,
    mask: dict[str, bool],
    opt_cfg: OptimizerConfig,
    cfg: TrainConfig,
    scheduler: PlateauScheduler | None = None,
    monitor_name: str = "test",
    extra: dict[str, ArrayDataset] | None = None,
    trainable_percent: float = 100.0,
    log: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train until ``max_epochs`` or early stop on the monitored loss.

    Only ``monitor`` drives the scheduler, early stopping and checkpoint
    choice; ``extra`` splits are evaluated for the log and nothing else.
    The retained state has the best monitored accuracy (ties: lower loss,
    then earlier epoch).
    """
    optimizer = Optimizer.for_model(model, mask, opt_cfg)
    scheduler = scheduler or PlateauScheduler(lr=opt_cfg.lr)
    optimizer.lr = scheduler.lr
    n_classes = _n_classes(model)
    history: list[dict] = []
    best_key, best_state, best_epoch, best_report = None, model.state_dict(), -1, None
    stale, best_loss, train_time = 0, float("inf"), 0.0

    def record(epoch, split, report, seconds):
        row = {
            "epoch": epoch,
            "split": split,
            "loss": float(report.loss),
            "accuracy": float(report.accuracy),
            "f1": float(report.f1),
            "lr": float(optimizer.lr),
            "seconds": round(seconds, 3),
            "trainable_percent": trainable_percent,
        }
        history.append(row)
        if log is not None:
            log(row)

    epoch = 0
    for epoch in range(cfg.max_epochs):
        tr = train_epoch(model, train, optimizer, cfg, epoch)
        train_time += tr.train_time
        record(epoch, "train", tr, tr.train_time)

        t0 = time.perf_counter()
        mon = evaluate(model, monitor, n_classes, cfg.eval_batch_size)
        record(epoch, monitor_name, mon, time.perf_counter() - t0)
        for name, split in (extra or {}).items():
            t0 = time.perf_counter()
            record(epoch, name, evaluate(model, split, n_classes, cfg.eval_batch_size), time.perf_counter() - t0)

        key = (mon.accuracy, -mon.loss)
        if best_key is None or key > best_key:
            best_key, best_state, best_epoch, best_report = key, model.state_dict(), epoch, mon

        optimizer.lr = scheduler.step(mon.loss)
        if mon.loss < best_loss - scheduler.threshold:
            best_loss, stale = mon.loss, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break

    best_report.train_time = train_time
    best_report.trainable_percent = trainable_percent
    return FitResult(best_state, best_epoch, best_report, history, train_time, epoch + 1)


class JsonlWriter:
    """Append one JSON object per line; keys keep insertion order."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.write_text("")

    def __call__(self, row: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
