"""Cross-entropy training with Adam, plus dataset evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import metrics
from .data import Dataset
from .model import MPVCNN, predict_batch, prepare_batch
from .ops import Parameter

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean per-point cross entropy of ``logits [B, K, N]`` against integer
    ``labels [B, N]``, averaged over points and then over the batch.

    Returns ``(loss, dlogits)``.
    """
    B, K, N = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    picked = np.take_along_axis(log_p, labels[:, None, :], axis=1)[:, 0]
    loss = float(-picked.mean(axis=1).mean())
    grad = np.exp(log_p)
    np.put_along_axis(
        grad, labels[:, None, :], np.take_along_axis(grad, labels[:, None, :], axis=1) - 1.0, axis=1
    )
    return loss, (grad / (B * N)).astype(logits.dtype, copy=False)


class Adam:
    """Adam with bias correction: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, named_parameters: Iterable[tuple[str, Parameter]], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_parameters)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class EvalReport:
    miou: float
    macc: float
    accuracy: float
    shape_ious: list[float]
    class_recall: dict[int, float]
    class_iou: dict[int, float]

    def format(self) -> str:
        lines = [f"mIoU\t{self.miou:.6f}", f"mAcc\t{self.macc:.6f}", f"accuracy\t{self.accuracy:.6f}"]
        for k in sorted(self.class_iou):
            recall = self.class_recall.get(k)
            recall = "nan" if recall is None else f"{recall:.6f}"
            lines.append(f"class {k}\tIoU {self.class_iou[k]:.6f}\trecall {recall}")
        return "\n".join(lines) + "\n"


def evaluate(model: MPVCNN, dataset: Dataset, batch_size: int = 8) -> EvalReport:
    """Shape-averaged mIoU over all parts of the dataset, class-mean
    accuracy and overall point accuracy, from eval-mode predictions."""
    preds = predict_batch(model, dataset.samples, batch_size)
    parts = range(dataset.class_count)
    ious = [metrics.shape_iou(c.labels, p, parts) for c, p in zip(dataset.samples, preds)]
    true = np.concatenate([c.labels for c in dataset.samples])
    pred = np.concatenate(preds)
    counts = metrics.confusion_counts(true, pred, parts)
    return EvalReport(
        miou=metrics.dataset_miou(ious),
        macc=metrics.mean_accuracy(true, pred, dataset.class_count),
        accuracy=metrics.overall_accuracy(true, pred),
        shape_ious=ious,
        class_recall=metrics.per_class_recall(true, pred, dataset.class_count),
        class_iou=dict(zip(counts.parts, counts.ious())),
    )


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_miou: float = float("nan")
    val_macc: float = float("nan")
    val_accuracy: float = float("nan")

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_miou:.6f}\t{self.val_macc:.6f}"


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    optimizer: Adam
    epoch: int
    rng: np.random.Generator
    train_config: TrainConfig = field(default_factory=TrainConfig)


def train(
    model: MPVCNN,
    dataset: Dataset,
    tcfg: TrainConfig,
    val_set: Dataset | None = None,
    until: Callable[[EpochMetrics], bool] | None = None,
    log_file=None,
) -> TrainResult:
    """Minimize mean per-point cross entropy with Adam.

    Samples are shuffled every epoch with a generator seeded from
    ``tcfg.seed``. After each epoch the validation set, when given, is
    evaluated and the epoch's metrics are appended to the history (and
    written as a tab-separated line to ``log_file``). Training stops early
    once ``until(metrics)`` returns true.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    for i, s in enumerate(dataset.samples):
        if s.labels is None:
            raise ValueError(f"training sample {i} has no labels")
    if dataset.class_count > model.config.num_classes:
        raise ValueError(
            f"dataset has {dataset.class_count} classes, model only {model.config.num_classes}"
        )
    rng = np.random.default_rng(tcfg.seed)
    optimizer = Adam(model.named_parameters(), lr=tcfg.learning_rate)
    coords, feats, labels = [], [], []
    for s in dataset.samples:
        c, f = prepare_batch([s], model.dtype)
        coords.append(c[0])
        feats.append(f[0])
        labels.append(s.labels)

    history = []
    epoch = 0
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        order = rng.permutation(len(dataset))
        losses = []
        for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[start : start + tcfg.batch_size]
            batch = [dataset.samples[i] for i in idx]
            if len({s.num_points for s in batch}) != 1:
                raise ValueError("clouds in one batch must have equal point counts")
            model.zero_grad()
            logits = model.forward(np.stack([coords[i] for i in idx]), np.stack([feats[i] for i in idx]))
            loss, dlogits = softmax_cross_entropy(logits, np.stack([labels[i] for i in idx]))
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, b, loss)
            model.backward(dlogits)
            optimizer.step()
            losses.append(loss)
        m = EpochMetrics(epoch, float(np.mean(losses)))
        if val_set is not None:
            rep = evaluate(model, val_set, tcfg.batch_size)
            m.val_miou, m.val_macc, m.val_accuracy = rep.miou, rep.macc, rep.accuracy
        history.append(m)
        logger.info("epoch %d loss %.4f val mIoU %.4f acc %.4f", epoch, m.train_loss, m.val_miou, m.val_accuracy)
        if log_file is not None:
            log_file.write(m.log_line() + "\n")
            log_file.flush()
        if until is not None and until(m):
            break
    return TrainResult(history, optimizer, epoch, rng, tcfg)
