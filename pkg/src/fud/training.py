"""Minibatch training loops shared by the unlearning pipelines."""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from fud import tensor as T
from fud.models import Classifier, Model


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def epoch_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def check_finite(value: float, **context) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} ({context})", dict(context, loss=value))


def task_loss(model: Classifier, x, y) -> T.Tensor:
    out = model(x)
    if model.spec.head == "sigmoid":
        return T.bce(out, np.asarray(y, dtype=np.float64).reshape(out.shape))
    return T.cross_entropy(out, y)


def train_epoch(
    model: Model,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], T.Tensor],
    lr: float,
    batch_size: int,
    rng: np.random.Generator | None,
    params=None,
) -> float:
    """One pass over ``x``'s rows; ``loss_fn(indices)`` builds the batch loss.

    Returns the mean batch loss.
    """
    params = model.parameters() if params is None else params
    total, batches = 0.0, 0
    for idx in minibatches(len(x), batch_size, rng):
        for p in params:
            p.zero_grad()
        with T.Tape() as tape:
            loss = loss_fn(idx)
        value = loss.item()
        check_finite(value, batch=batches)
        T.backward(tape, loss)
        T.sgd_step(params, lr)
        total += value
        batches += 1
    return total / max(batches, 1)


def train_classifier(
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float = 0.05,
    batch_size: int = 64,
    seed: int = 0,
) -> list[float]:
    """Plain task training: cross-entropy for softmax heads, BCE for sigmoid heads."""
    model.set_trainable(True)
    losses = []
    for epoch in range(epochs):
        rng = epoch_rng(seed, 0x7A1, epoch)
        losses.append(train_epoch(model, x, lambda idx: task_loss(model, x[idx], y[idx]), lr, batch_size, rng))
    return losses


def predict_outputs(model: Classifier, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward pass without recording; returns logits (softmax head) or probabilities (sigmoid head)."""
    outs = [model(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
    if not outs:
        return np.zeros((0, model.spec.outputs))
    return np.concatenate(outs)


def predict_proba(model: Classifier, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = predict_outputs(model, x, batch_size)
    if model.spec.head == "sigmoid":
        return out
    z = out - out.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_labels(model: Classifier, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = predict_outputs(model, x, batch_size)
    if model.spec.head == "sigmoid":
        return (out > 0.5).astype(np.int64)
    return out.argmax(axis=1)
