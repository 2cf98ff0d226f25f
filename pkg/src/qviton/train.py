"""Optimization loop: AdamW with decoupled weight decay, warmup-cosine
learning-rate schedule, cross-entropy training, and confusion-matrix metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import FloodDataset, WeightedSampler
from .errors import ConfigError, ContractError, DatasetError, NumericalError
from .model import HybridModel
from .tensor import ParamStore

CSV_HEADER = "epoch,lr,train_loss,val_acc,val_f1_flood,val_f1_nonflood"


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 5
    total_epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0  # global-norm clip; 0 disables

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ConfigError(f"lr_max must be positive, got {self.lr_max}")
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"need 0 < warmup_epochs < total_epochs, got "
                f"{self.warmup_epochs} / {self.total_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear ramp over the warmup epochs, then half-cosine decay to zero."""
    t, w = config.total_epochs, config.warmup_epochs
    if not 0 <= epoch < t:
        raise ContractError(f"epoch {epoch} outside [0, {t})")
    if epoch < w:
        return config.lr_max * (epoch + 1) / w
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (t - w)))


class AdamW:
    """Bias-corrected Adam plus weight decay applied directly to the weights,
    decoupled from the adaptive update."""

    def __init__(self, store: ParamStore, config: TrainConfig):
        self.store = store
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, lr: float) -> None:
        beta1, beta2 = self.config.betas
        eps, wd = self.config.eps, self.config.weight_decay
        self.step_count += 1
        bc1 = 1.0 - beta1**self.step_count
        bc2 = 1.0 - beta2**self.step_count
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                raise ContractError(f"parameter {name} has no gradient")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name}")
            if wd:
                p.data -= lr * wd * p.data
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.m:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((t.grad**2).sum())
                          for _, t in store.items() if t.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for _, t in store.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


# -- metrics --------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """2x2 counts with Flooded (label 1) as the positive class."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ConfigError("confusion matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def add_predictions(self, y_true: np.ndarray, y_pred: np.ndarray) -> None:
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        self.tp += int(((y_true == 1) & (y_pred == 1)).sum())
        self.tn += int(((y_true == 0) & (y_pred == 0)).sum())
        self.fp += int(((y_true == 0) & (y_pred == 1)).sum())
        self.fn += int(((y_true == 1) & (y_pred == 0)).sum())

    def swapped(self) -> "ConfusionMatrix":
        """The same matrix with class polarity reversed."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    degenerate = []
    if cm.tp + cm.fp == 0:
        precision = 0.0
        degenerate.append("precision")
    else:
        precision = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        recall = 0.0
        degenerate.append("recall")
    else:
        recall = cm.tp / (cm.tp + cm.fn)
    if precision + recall == 0:
        degenerate.append("f1")
    return ClassMetrics(precision, recall, f1_score(precision, recall),
                        tuple(degenerate))


@dataclass
class MetricsReport:
    accuracy: float
    flooded: ClassMetrics
    non_flooded: ClassMetrics

    @property
    def precision(self) -> float:
        return self.flooded.precision

    @property
    def recall(self) -> float:
        return self.flooded.recall

    @property
    def f1(self) -> float:
        return self.flooded.f1


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class precision/recall/F1; zero-denominator metrics
    come back as 0 and are flagged in the class report."""
    if cm.total == 0:
        raise ConfigError("metrics undefined for an all-zero confusion matrix")
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        flooded=class_metrics(cm),
        non_flooded=class_metrics(cm.swapped()),
    )


# -- loops -----------------------------------------------------------------------


def train_epoch(model: HybridModel, dataset: FloodDataset,
                sampler: WeightedSampler, optimizer: AdamW, lr: float,
                config: TrainConfig,
                data_rng: np.random.Generator | None = None) -> dict:
    """One pass of len(dataset)/batch_size weighted-sampled steps."""
    model.train()
    steps = max(1, math.ceil(len(dataset) / config.batch_size))
    losses = []
    for step in range(steps):
        idx = sampler.draw(config.batch_size)
        x, y = dataset.batch(idx, train=True, rng=data_rng)
        logits = model(T.Tensor(x))
        loss = T.softmax_cross_entropy(logits, y)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at batch {step}")
        model.store.zero_grad()
        T.backward(loss, model.store)
        grad_norm = clip_grad_norm(model.store, config.grad_clip)
        optimizer.step(lr)
        losses.append(value)
    return {"mean_loss": float(np.mean(losses)), "lr": lr,
            "grad_norm": grad_norm, "steps": steps}


def evaluate(model: HybridModel, dataset: FloodDataset,
             batch_size: int = 32) -> tuple[ConfusionMatrix, MetricsReport]:
    """Argmax predictions over a split; dropout off, running stats frozen."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix()
    try:
        with T.no_grad():
            for start in range(0, len(dataset), batch_size):
                idx = range(start, min(start + batch_size, len(dataset)))
                x, y = dataset.batch(idx, train=False)
                logits = model(T.Tensor(x))
                cm.add_predictions(y, np.argmax(logits.data, axis=1))
    finally:
        model.training = was_training
    return cm, metrics(cm)


def accuracy_on(model: HybridModel, dataset: FloodDataset,
                batch_size: int = 32) -> float:
    cm, report = evaluate(model, dataset, batch_size)
    return report.accuracy


def csv_row(epoch: int, lr: float, train_loss: float,
            report: MetricsReport) -> str:
    """One deterministic metrics-log line (6 decimal places)."""
    return (f"{epoch},{lr:.6f},{train_loss:.6f},{report.accuracy:.6f},"
            f"{report.flooded.f1:.6f},{report.non_flooded.f1:.6f}")


def fit(model: HybridModel, train_ds: FloodDataset, val_ds: FloodDataset | None,
        config: TrainConfig, *, optimizer: AdamW | None = None,
        sampler: WeightedSampler | None = None,
        data_rng: np.random.Generator | None = None,
        start_epoch: int = 0, on_epoch=None) -> list[dict]:
    """Run epochs [start_epoch, total_epochs); returns one log dict per epoch.

    on_epoch(epoch, row, state) fires after each epoch with the CSV-ready
    row and the mutable training state (for checkpointing).
    """
    if optimizer is None:
        optimizer = AdamW(model.store, config)
    if sampler is None or data_rng is None:
        sampler_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
        if sampler is None:
            sampler = WeightedSampler(train_ds.labels(),
                                      np.random.default_rng(sampler_seq))
        if data_rng is None:
            data_rng = np.random.default_rng(data_seq)

    history = []
    for epoch in range(start_epoch, config.total_epochs):
        lr = lr_schedule(epoch, config)
        log = train_epoch(model, train_ds, sampler, optimizer, lr, config,
                          data_rng)
        report = None
        if val_ds is not None:
            _, report = evaluate(model, val_ds)
            log["val_accuracy"] = report.accuracy
            log["val_f1_flood"] = report.flooded.f1
            log["val_f1_nonflood"] = report.non_flooded.f1
        log["epoch"] = epoch
        history.append(log)
        if on_epoch is not None:
            row = csv_row(epoch, lr, log["mean_loss"], report) if report else None
            on_epoch(epoch, row, {
                "model": model, "optimizer": optimizer, "sampler": sampler,
                "data_rng": data_rng, "report": report,
            })
    return history
