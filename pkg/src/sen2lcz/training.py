"""Nesterov-Adam training loop with step learning-rate decay and early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dataio import NUM_CLASSES, BandStats, PatchDataset, class_distribution
from .layers import one_hot
from .model import Checkpoint, ConfigError, Sen2LCZNet, fused_loss, labels_from_probs
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; carries the last finite checkpoint."""

    def __init__(self, msg: str, checkpoint: Optional[Checkpoint] = None, history=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.history = history


class Nadam:
    """Nadam as implemented in Keras 2: Adam with a warming momentum schedule.

    The momentum coefficient at step ``t`` is
    ``beta1 * (1 - 0.5 * 0.96 ** (t * schedule_decay))`` and the running
    product of these coefficients bias-corrects the first moment.
    """

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-7, schedule_decay: float = 0.004):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.schedule_decay = schedule_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.m_schedule = 1.0

    def _momentum(self, t: int) -> float:
        return self.beta1 * (1.0 - 0.5 * 0.96 ** (t * self.schedule_decay))

    def step(self, lr: float, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if grads is None:
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name or p.shape}")

        t = self.t + 1
        mu_t = self._momentum(t)
        mu_next = self._momentum(t + 1)
        sched_new = self.m_schedule * mu_t
        sched_next = sched_new * mu_next
        b1, b2 = self.beta1, self.beta2
        bias2 = 1.0 - b2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            g_prime = g / (1.0 - sched_new)
            m_prime = m / (1.0 - sched_next)
            v_prime = v / bias2
            m_bar = (1.0 - mu_t) * g_prime + mu_next * m_prime
            p.data -= (lr * m_bar / (np.sqrt(v_prime) + self.epsilon)).astype(p.dtype, copy=False)
        self.t = t
        self.m_schedule = sched_new


def nadam_step(state: Nadam, lr: float, grads: Optional[Sequence[np.ndarray]] = None) -> None:
    state.step(lr, grads)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 2e-2
    lr_halving_period: int = 5
    patience: int = 40
    max_epochs: int = 300
    class_weighting: bool = False
    seed: int = 0
    stop_at_train_acc: Optional[float] = None  # optional extra stop once epoch train accuracy reaches this

    def __post_init__(self):
        for name in ("batch_size", "lr_halving_period", "patience", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.stop_at_train_acc is not None and not 0 < self.stop_at_train_acc <= 1:
            raise ConfigError("stop_at_train_acc must lie in (0, 1]")


def lr_schedule(epoch: int, lr0: float = 2e-2, period: int = 5) -> float:
    """Step decay: ``lr0 * 0.5 ** (epoch // period)`` with zero-based epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // period)


def compute_class_weights(counts) -> np.ndarray:
    """Inverse sample fraction, normalized so uniform counts give ones: ``total / (K * n_k)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("every class needs at least one sample to be weighted")
    return counts.sum() / (counts.size * counts)


class EarlyStopping:
    """Stop once the monitored loss has not strictly decreased for ``patience`` epochs."""

    def __init__(self, patience: int = 40):
        self.patience = patience
        self.best = math.inf
        self.wait = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainHistory:
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
            for i in range(len(self)):
                wr.writerow([i + 1, repr(self.lr[i]), repr(self.train_loss[i]), repr(self.train_acc[i]),
                             repr(self.val_loss[i]), repr(self.val_acc[i])])


def evaluate_loss_acc(model: Sen2LCZNet, x: np.ndarray, labels: np.ndarray, batch_size: int = 256,
                      sample_weights: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Infer-mode mean loss and accuracy over a dataset (float64 accumulation)."""
    total_loss = 0.0
    correct = 0
    n = len(labels)
    with no_grad():
        for s in range(0, n, batch_size):
            xb = Tensor(x[s:s + batch_size])
            yb = labels[s:s + batch_size]
            res = model.forward(xb, "infer")
            w = None if sample_weights is None else sample_weights[s:s + batch_size]
            loss = fused_loss(res.heads, one_hot(yb, NUM_CLASSES, model.dtype),
                              model.config.fusion_loss, w)
            total_loss += float(loss.data) * len(yb)
            correct += int(np.sum(labels_from_probs(res.fused.data) == yb))
    return total_loss / n, correct / n


def train(model: Sen2LCZNet, train_set: PatchDataset, val_set: PatchDataset, config: TrainConfig,
          stats: Optional[BandStats] = None) -> tuple[Checkpoint, TrainHistory]:
    """Train ``model`` in place and return the highest-validation-accuracy checkpoint.

    The datasets are expected to be standardized already; ``stats`` is only
    recorded in the checkpoint.  On return the model holds the best weights.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if config.batch_size > len(train_set):
        raise ConfigError("batch_size exceeds the training set size")
    if stats is None:
        stats = BandStats.identity()

    rng = np.random.default_rng(config.seed)
    x_train = train_set.as_nchw().astype(model.dtype, copy=False)
    y_train = train_set.labels.astype(np.int64)
    x_val = val_set.as_nchw().astype(model.dtype, copy=False)
    y_val = val_set.labels.astype(np.int64)

    class_w = None
    if config.class_weighting:
        class_w = compute_class_weights(class_distribution(train_set))

    opt = Nadam(model.parameters())
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best_acc = -1.0
    best_state = model.state_dict()
    n = len(y_train)

    def snapshot() -> Checkpoint:
        return Checkpoint(model.config, {k: v.copy() for k, v in best_state.items()},
                          stats.mean.copy(), stats.std.copy())

    for epoch in range(config.max_epochs):
        lr = lr_schedule(epoch, config.lr0, config.lr_halving_period)
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            yb = y_train[idx]
            w = None if class_w is None else class_w[yb - 1]
            res = model.forward(Tensor(x_train[idx]), "train", rng)
            loss = fused_loss(res.heads, one_hot(yb, NUM_CLASSES, model.dtype), model.config.fusion_loss, w)
            if not np.isfinite(loss.data):
                model.load_state_dict(best_state)
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch + 1}", snapshot(), history)
            model.zero_grad()
            loss.backward()
            try:
                opt.step(lr)
            except FloatingPointError as exc:
                model.load_state_dict(best_state)
                raise TrainingDiverged(f"epoch {epoch + 1}: {exc}", snapshot(), history) from exc
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(labels_from_probs(res.fused.data) == yb))
        model.zero_grad()

        val_w = None if class_w is None else class_w[y_val - 1]
        val_loss, val_acc = evaluate_loss_acc(model, x_val, y_val, sample_weights=val_w)
        history.lr.append(lr)
        history.train_loss.append(loss_sum / n)
        history.train_acc.append(correct / n)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        log.info("epoch %d lr %.3g loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 epoch + 1, lr, loss_sum / n, correct / n, val_loss, val_acc)

        if val_acc > best_acc:
            best_acc = val_acc
            best_state = model.state_dict()
            history.best_epoch = epoch
        if stopper.update(val_loss):
            log.info("early stopping after epoch %d", epoch + 1)
            break
        if config.stop_at_train_acc is not None and correct / n >= config.stop_at_train_acc:
            break

    model.load_state_dict(best_state)
    return snapshot(), history
