"""SGD on cross-entropy using tape-autodiff parameter gradients.

The defaults (full batch, zero-initialised head, linear learning-rate
warmup, heavy-ball momentum) keep the loss non-increasing through the early
epochs on the toy task, where the model sits near the uniform-prediction
plateau, and let momentum carry it off that plateau afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import backward_from
from ..model import Model, ModelConfig, forward_record, init_model
from .datasets import NEUTRAL, SyntheticDataset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def soft_targets(y: np.ndarray, classes: int) -> np.ndarray:
    """One-hot rows for labels, uniform rows for ``NEUTRAL``."""
    y = np.asarray(y)
    if np.any((y < NEUTRAL) | (y >= classes)):
        raise ValueError(f"labels must be in [0, {classes}) or {NEUTRAL}")
    targets = np.full((len(y), classes), 1.0 / classes)
    hard = y != NEUTRAL
    targets[hard] = np.eye(classes)[y[hard]]
    return targets


def cross_entropy(model: Model, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy, its parameter gradients, and the batch logits."""
    tape = forward_record(model, X)
    logp = _log_softmax(tape.output_logits)
    target = soft_targets(y, logp.shape[-1])
    n = len(y)
    loss = -float((target * logp).sum(axis=-1).mean())
    grads = backward_from(tape, (np.exp(logp) - target) / n).params
    return loss, grads, tape.output_logits


def _hit_rate(logits: np.ndarray, y: np.ndarray) -> float:
    hard = y != NEUTRAL
    if not hard.any():
        return float("nan")
    return float((logits[hard].argmax(axis=-1) == y[hard]).mean())


def accuracy(model: Model, dataset: SyntheticDataset) -> float:
    """Top-1 accuracy over the labelled items."""
    return _hit_rate(forward_record(model, dataset.inputs()).output_logits, dataset.labels())


def train_toy(config: ModelConfig, dataset: SyntheticDataset, epochs: int = 300,
              lr: float = 0.03, seed: int = 0, batch_size: int | None = None,
              momentum: float = 0.9, warmup: int = 30) -> TrainResult:
    """Deterministic given ``seed``; losses and accuracies are measured on the
    full dataset after each epoch.

    ``batch_size=None`` means full-batch steps. The step size ramps linearly
    from ``lr / warmup`` to ``lr`` over the first ``warmup`` epochs.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if epochs < 0 or lr < 0 or warmup < 0:
        raise ValueError("epochs, lr and warmup must be non-negative")
    model = init_model(config, seed, zero_head=True)
    rng = np.random.default_rng(seed)
    X, y = dataset.inputs(), dataset.labels()
    batch_size = batch_size or len(y)
    velocity = {k: np.zeros_like(v) for k, v in model.parameters.items()}
    result = TrainResult(model)
    # overflow surfaces as a non-finite loss, reported below with its epoch
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            step = lr * min(1.0, (epoch + 1) / warmup) if warmup else lr
            order = rng.permutation(len(y))
            for start in range(0, len(y), batch_size):
                idx = order[start:start + batch_size]
                loss, grads, _ = cross_entropy(model, X[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
                for k, g in grads.items():
                    velocity[k] = momentum * velocity[k] + g
                    model.parameters[k] = model.parameters[k] - step * velocity[k]
            loss, _, logits = cross_entropy(model, X, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            result.losses.append(loss)
            result.accuracies.append(_hit_rate(logits, y))
            result.train_accuracy = result.accuracies[-1]
    log.info("trained %d epochs: loss %.4f, accuracy %.3f", epochs,
             result.losses[-1] if result.losses else float("nan"), result.train_accuracy)
    return result
