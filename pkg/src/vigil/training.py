"""Loss, optimizers, splits, metrics, the train loop, and overfit diagnostics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, NumericalError
from .models import forward, predict
from .tensor import Tape, Tensor, clamp_min, log, mul, neg, tsum
from .util import derive_rng, pmap

_TAG_SPLIT = 11
_TAG_EPOCH = 12
_TAG_DROPOUT = 13

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "wall_ms"]
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    split_fraction: float = 0.8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie strictly between 0 and 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be positive")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    wall_ms: float


@dataclass
class RunMetrics:
    """Per-epoch series; epochs run 1..N, losses are per-sample means."""

    epochs: list[EpochMetrics] = field(default_factory=list)

    def append(self, row):
        if row.epoch != len(self.epochs) + 1:
            raise ValueError(f"epoch {row.epoch} out of order (expected {len(self.epochs) + 1})")
        if row.train_loss < 0 or row.val_loss < 0:
            raise ValueError("losses must be non-negative")
        self.epochs.append(row)

    def without_wall_times(self):
        """Copy with wall_ms zeroed: the byte-stable form for CI artifacts."""
        return RunMetrics([replace(e, wall_ms=0.0) for e in self.epochs])


def write_metrics_csv(path, metrics):
    """CSV with 9-significant-digit floats, LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for e in metrics.epochs:
            fh.write(
                f"{e.epoch},{e.train_loss:.9g},{e.val_loss:.9g},"
                f"{e.train_acc:.9g},{e.val_acc:.9g},{e.wall_ms:.9g}\n"
            )


def read_metrics_csv(path):
    metrics = RunMetrics()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise DataFormatError(f"bad metrics header {header!r}")
        for row in reader:
            if len(row) != 6:
                raise DataFormatError(f"bad metrics row {row!r}")
            metrics.append(
                EpochMetrics(
                    epoch=int(row[0]),
                    train_loss=float(row[1]),
                    val_loss=float(row[2]),
                    train_acc=float(row[3]),
                    val_acc=float(row[4]),
                    wall_ms=float(row[5]),
                )
            )
    return metrics


# ---------------------------------------------------------------------------
# loss and metrics


def cross_entropy(probs, label):
    """-log(probs[label]) with the probability clamped to >= 1e-12."""
    n = probs.shape[-1]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    onehot = np.zeros(n)
    onehot[label] = 1.0
    picked = tsum(mul(probs, onehot))
    return neg(log(clamp_min(picked, PROB_FLOOR)))


def accuracy(predictions, labels):
    """Correct predictions divided by total predictions."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise ValueError("accuracy of an empty list is undefined")
    correct = sum(1 for p, l in zip(predictions, labels) if p == l)
    return correct / len(predictions)


def train_test_split(clips, fraction=0.8, seed=0):
    """Seeded shuffle, then the first ceil(fraction * n) clips train."""
    clips = list(clips)
    if len(clips) < 2:
        raise ValueError("need at least 2 clips to split")
    perm = derive_rng(seed, _TAG_SPLIT).permutation(len(clips))
    n_train = math.ceil(fraction * len(clips))
    train = [clips[i] for i in perm[:n_train]]
    test = [clips[i] for i in perm[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params, lr):
        self.params = dict(params)
        self.lr = lr

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        for name, t in self.params.items():
            if t.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            t.data = t.data - self.lr * t.grad


class Adam:
    """Standard Adam with bias correction; beta = (0.9, 0.999), eps = 1e-8."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(named_params, config):
    if config.optimizer == "sgd":
        return SGD(named_params, config.learning_rate)
    return Adam(named_params, config.learning_rate)


# ---------------------------------------------------------------------------
# evaluation and training


def evaluate(params, model_config, clips, threads=1):
    """Mean per-clip cross-entropy and accuracy, dropout off.

    Per-clip work may fan out over threads; results reduce in clip order,
    so the values are identical for any worker count.
    """

    def one(clip):
        probs = forward(params, model_config, clip, train=False)
        loss = cross_entropy(probs, clip.label)
        return float(loss.data), int(np.argmax(probs.data))

    results = pmap(one, clips, threads=threads)
    losses = [r[0] for r in results]
    preds = [r[1] for r in results]
    mean_loss = sum(losses) / len(losses)
    return mean_loss, accuracy(preds, [c.label for c in clips])


def train(params, model_config, train_clips, val_clips, config, log_fn=None, stop_fn=None):
    """Seeded minibatch training; returns per-epoch RunMetrics.

    Each epoch reshuffles the train set with a generator derived from
    (seed, epoch), steps through minibatches with dropout in train mode,
    then runs full eval passes (dropout off) over the train and val sets.
    ``stop_fn(metrics_row) -> bool`` can end the run early; ``log_fn`` gets
    one line per epoch. A non-finite loss aborts, naming the batch.
    """
    if not train_clips:
        raise ValueError("empty training set")
    named = dict(params.named())
    opt = make_optimizer(named, config)
    dropout_rng = derive_rng(config.seed, _TAG_DROPOUT)
    metrics = RunMetrics()

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = derive_rng(config.seed, _TAG_EPOCH, epoch).permutation(len(train_clips))
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_clips[i] for i in order[start : start + config.batch_size]]
            with Tape() as tape:
                total = None
                for clip in batch:
                    probs = forward(params, model_config, clip, train=True, rng=dropout_rng)
                    loss = cross_entropy(probs, clip.label)
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(batch))
            if not np.isfinite(total.data):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}"
                )
            opt.zero_grad()
            tape.backward(total)
            opt.step()

        train_loss, train_acc = evaluate(params, model_config, train_clips, threads=config.threads)
        val_loss, val_acc = evaluate(params, model_config, val_clips, threads=config.threads)
        wall_ms = (time.perf_counter() - started) * 1000.0
        row = EpochMetrics(epoch, train_loss, val_loss, train_acc, val_acc, wall_ms)
        metrics.append(row)
        if log_fn is not None:
            log_fn(
                f"epoch {epoch}: train_loss={train_loss:.6f} val_loss={val_loss:.6f} "
                f"train_acc={train_acc:.4f} val_acc={val_acc:.4f} ({wall_ms:.0f} ms)"
            )
        if stop_fn is not None and stop_fn(row):
            break
    return metrics


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class OverfitVerdict:
    overfitting: bool
    reason: str


def overfit_report(metrics):
    """Flag the classic signature: validation loss sitting above training
    loss for the final half of the run while drifting up from its minimum.
    """
    rows = metrics.epochs
    if len(rows) < 3:
        raise ValueError("overfit_report needs at least 3 recorded epochs")
    half = math.ceil(len(rows) / 2)
    tail = rows[-half:]
    gap = all(r.val_loss > r.train_loss for r in tail)
    min_val = min(r.val_loss for r in rows)
    drift = rows[-1].val_loss > 1.05 * min_val
    if gap and drift:
        return OverfitVerdict(True, f"val_loss above train_loss for final {half} epochs "
                                    f"and {rows[-1].val_loss / min_val - 1.0:.1%} above its minimum")
    if not gap:
        return OverfitVerdict(False, "val_loss does not dominate train_loss over the final half")
    return OverfitVerdict(False, "val_loss has not drifted more than 5% above its minimum")
