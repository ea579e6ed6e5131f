"""Source-model training on the clean toy dataset."""

from __future__ import annotations

import logging

import numpy as np

from ..nn import BNMode, CrossEntropy, Model, ParamSet, backward, build_model, forward, forward_with_cache, objective_loss
from ..streamgen import ToyDataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, chunk: int = 4096) -> float:
    """Error rate with stored BN statistics."""
    wrong = 0
    for i in range(0, len(x), chunk):
        wrong += int((forward(model, x[i:i + chunk]).argmax(axis=1) != y[i:i + chunk]).sum())
    return wrong / len(x)


def train_source_model(dataset: ToyDataset, epochs: int = 16, lr: float = 0.1, rng: np.random.Generator | None = None,
                       *, batch_size: int = 128, hidden: int = 64, momentum: float = 0.9,
                       max_test_error: float = 0.05, history: list | None = None) -> Model:
    """Mini-batch SGD (heavy-ball momentum) on cross-entropy, BN in running-update mode.

    Raises :class:`TrainingError` if the clean test error ends above
    ``max_test_error``. Per-epoch mean losses are appended to ``history``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = dataset.arrays("train")
    if len(x) == 0:
        raise ValueError("empty training split")
    model = build_model(x.shape[1], dataset.num_classes, hidden, rng)
    velocity = {k: np.zeros_like(v) for k, v in model.params(ParamSet.ALL).items()}
    for epoch in range(epochs):
        step_lr = lr * 0.5 * (1 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(order) - 1, batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            logits, cache = forward_with_cache(model, x[idx], BNMode.UPDATE)
            loss, dlogits = objective_loss(CrossEntropy(y[idx]), logits)
            grads = backward(model, cache, dlogits, ParamSet.ALL)
            params = model.params(ParamSet.ALL)
            for k, g in grads.items():
                velocity[k] = momentum * velocity[k] + g
                params[k] -= step_lr * velocity[k]
            losses.append(loss)
        if history is not None:
            history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, np.mean(losses))
    xt, yt = dataset.arrays("test")
    err = evaluate(model, xt, yt)
    if err > max_test_error:
        raise TrainingError(f"clean test error {err:.3f} above {max_test_error:.3f} after {epochs} epochs")
    return model
