"""Small MLP classifier with batch normalization and hand-written backward passes.

Everything is float64 numpy. The model is a plain list of layers; forward
returns logits plus a cache that :func:`backward` consumes.
"""

from __future__ import annotations

import copy
import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BNMode(str, enum.Enum):
    RUNNING = "running"  # stored statistics, no mutation
    BATCH = "batch"  # normalize by the batch's own mean/var
    UPDATE = "update"  # as BATCH, and blend batch stats into running stats


class ParamSet(str, enum.Enum):
    BN_AFFINE = "bn_affine"
    INPUT = "input"
    ALL = "all"  # dense weights + BN affine; used by source training


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNorm:
    running_mean: np.ndarray
    running_var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "BatchNorm":
        return cls(np.zeros(dim), np.ones(dim), np.ones(dim), np.zeros(dim), momentum, eps)

    @property
    def in_dim(self) -> int:
        return self.scale.shape[0]

    out_dim = in_dim


@dataclass
class ReLU:
    pass


Layer = Dense | BatchNorm | ReLU

_ARRAYS = {Dense: ("weight", "bias"), BatchNorm: ("running_mean", "running_var", "scale", "shift")}


@dataclass
class Model:
    layers: list
    num_classes: int
    input_dim: int

    def __post_init__(self):
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ReLU):
                continue
            if layer.in_dim != dim:
                raise ValueError(f"layer {i} expects input dim {layer.in_dim}, got {dim}")
            dim = layer.out_dim
        if dim != self.num_classes:
            raise ValueError(f"final output dim {dim} != num_classes {self.num_classes}")

    def bn_layers(self) -> list[tuple[int, BatchNorm]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    def params(self, group: ParamSet = ParamSet.ALL) -> dict[str, np.ndarray]:
        """Named references to the trainable arrays of ``group``."""
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                out[f"{i}.scale"] = layer.scale
                out[f"{i}.shift"] = layer.shift
            elif isinstance(layer, Dense) and group == ParamSet.ALL:
                out[f"{i}.weight"] = layer.weight
                out[f"{i}.bias"] = layer.bias
        return out

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            idx, attr = name.split(".")
            layer = self.layers[int(idx)]
            if getattr(layer, attr).shape != value.shape:
                raise ValueError(f"shape mismatch for {name}")
            setattr(layer, attr, np.array(value, dtype=np.float64))

    def state(self) -> dict[str, np.ndarray]:
        """Every array of the model, keyed ``<layer index>.<array name>``."""
        out = {}
        for i, layer in enumerate(self.layers):
            for attr in _ARRAYS.get(type(layer), ()):
                out[f"{i}.{attr}"] = getattr(layer, attr)
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def digest(self, names: list[str] | None = None) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state().items()):
            if names is None or name in names:
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_model(input_dim: int, num_classes: int, hidden: int = 64, rng: np.random.Generator | None = None) -> Model:
    """Dense -> BN -> ReLU -> Dense -> BN -> ReLU -> Dense, He-initialised."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def dense(n_in, n_out):
        return Dense(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)), np.zeros(n_out))

    layers = [
        dense(input_dim, hidden), BatchNorm.fresh(hidden), ReLU(),
        dense(hidden, hidden), BatchNorm.fresh(hidden), ReLU(),
        dense(hidden, num_classes),
    ]
    return Model(layers, num_classes, input_dim)


# ---------------------------------------------------------------- forward


def _check_input(model: Model, x: np.ndarray, mode: BNMode, start: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    width = model.input_dim if start == 0 else _width_before(model, start)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected input of shape (B, {width}), got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if mode != BNMode.RUNNING and x.shape[0] < 2:
        raise ValueError("batch-statistics modes need at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def _width_before(model: Model, start: int) -> int:
    if not 0 <= start < len(model.layers):
        raise ValueError(f"start layer {start} out of range")
    for layer in reversed(model.layers[:start]):
        if not isinstance(layer, ReLU):
            return layer.out_dim
    return model.input_dim


def forward_with_cache(model: Model, x: np.ndarray, mode: BNMode = BNMode.RUNNING,
                       momentum: float | None = None, start: int = 0) -> tuple[np.ndarray, list]:
    """Logits and the backward cache.

    With ``start > 0``, ``x`` is the activation entering layer ``start``
    (layers before it are skipped and have ``None`` cache slots).
    """
    mode = BNMode(mode)
    h = _check_input(model, x, mode, start)
    batch_stats = mode is not BNMode.RUNNING
    cache: list = [None] * start
    for layer in model.layers[start:]:
        if isinstance(layer, Dense):
            cache.append(h)
            h = h @ layer.weight + layer.bias
        elif isinstance(layer, ReLU):
            mask = h > 0
            cache.append(mask)
            h = h * mask
        else:
            if batch_stats:
                n = len(h)  # sum / n is numpy's mean without its Python wrapper
                mean = h.sum(axis=0) / n
                centered = h - mean
                var = (centered * centered).sum(axis=0) / n  # biased estimator, as in train-mode BN
            else:
                mean, var = layer.running_mean, layer.running_var
                centered = h - mean
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = centered * inv_std
            cache.append((xhat, inv_std, batch_stats))
            if mode is BNMode.UPDATE:
                m = layer.momentum if momentum is None else momentum
                layer.running_mean = (1 - m) * layer.running_mean + m * mean
                layer.running_var = (1 - m) * layer.running_var + m * var
            h = xhat * layer.scale + layer.shift
    return h, cache


def forward(model: Model, x: np.ndarray, mode: BNMode = BNMode.RUNNING, start: int = 0) -> np.ndarray:
    return forward_with_cache(model, x, mode, start=start)[0]


def project_input(model: Model, x: np.ndarray) -> np.ndarray:
    """Output of the leading dense layer; feed it back with ``start=1``.

    Test-time adaptation never touches dense weights, so adapters cache this
    projection per sample instead of recomputing the widest matmul.
    """
    layer = model.layers[0]
    if not isinstance(layer, Dense):
        raise ValueError("model does not start with a dense layer")
    return _check_input(model, x, BNMode.RUNNING) @ layer.weight + layer.bias


def bn_batch_stats(model: Model, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-BN-layer (mean, biased var) of ``x`` under batch normalization."""
    h = _check_input(model, x, BNMode.BATCH)
    stats = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            h = h @ layer.weight + layer.bias
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        else:
            mean = h.sum(axis=0) / len(h)
            centered = h - mean
            var = (centered * centered).sum(axis=0) / len(h)
            stats.append((mean, var))
            h = centered * (layer.scale / np.sqrt(var + layer.eps)) + layer.shift
    return stats


def backward(model: Model, cache: list, dlogits: np.ndarray, group: ParamSet) -> dict[str, np.ndarray]:
    """Back-propagate ``dlogits``; return gradients for ``group`` only."""
    grads = {}
    d = dlogits
    need_input = group == ParamSet.INPUT
    if need_input and cache[0] is None:
        raise ValueError("input gradients need a forward pass from layer 0")
    # no trainable array sits below the lowest BN layer in affine-only mode
    stop = model.bn_layers()[0][0] if group == ParamSet.BN_AFFINE and model.bn_layers() else -1
    for i in range(len(model.layers) - 1, -1, -1):
        layer, c = model.layers[i], cache[i]
        if c is None:
            if group == ParamSet.ALL:
                raise ValueError("full gradients need a forward pass from layer 0")
            break
        if isinstance(layer, Dense):
            if group == ParamSet.ALL:
                grads[f"{i}.weight"] = c.T @ d
                grads[f"{i}.bias"] = d.sum(axis=0)
            if i == 0 and not need_input:
                break
            d = d @ layer.weight.T
        elif isinstance(layer, ReLU):
            d = d * c
        else:
            xhat, inv_std, batch_stats = c
            if group != ParamSet.INPUT:
                grads[f"{i}.scale"] = (d * xhat).sum(axis=0)
                grads[f"{i}.shift"] = d.sum(axis=0)
            if i == stop:
                break
            dxhat = d * layer.scale
            if batch_stats:
                n = d.shape[0]
                d = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                d = dxhat * inv_std
    if need_input:
        grads["input"] = d
    return grads


# ---------------------------------------------------------------- probability helpers


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(p: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Shannon entropy (nats) along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("not a probability distribution")
    return -_xlogx(p).sum(axis=-1)


# ---------------------------------------------------------------- objectives


@dataclass(frozen=True)
class CrossEntropy:
    """Mean cross-entropy against integer labels."""
    targets: np.ndarray


@dataclass(frozen=True)
class Distill:
    """Mean cross-entropy against soft target distributions (teacher outputs)."""
    targets: np.ndarray


@dataclass(frozen=True)
class EntropyMin:
    pass


@dataclass(frozen=True)
class InfoMax:
    pass


Objective = CrossEntropy | Distill | EntropyMin | InfoMax

_ALLOWED = {
    CrossEntropy: {ParamSet.INPUT, ParamSet.ALL},
    Distill: {ParamSet.BN_AFFINE},
    EntropyMin: {ParamSet.BN_AFFINE},
    InfoMax: {ParamSet.BN_AFFINE},
}


def objective_loss(objective: Objective, logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss value and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    n = logits.shape[0]
    if isinstance(objective, CrossEntropy):
        y = np.asarray(objective.targets, dtype=np.int64)
        if y.shape != (n,) or np.any(y < 0) or np.any(y >= logits.shape[1]):
            raise ValueError("invalid targets")
        loss = -logp[np.arange(n), y].mean()
        d = p.copy()
        d[np.arange(n), y] -= 1.0
        return float(loss), d / n
    if isinstance(objective, Distill):
        q = np.asarray(objective.targets, dtype=np.float64)
        if q.shape != logits.shape:
            raise ValueError("soft targets must match logits shape")
        loss = -(q * logp).sum(axis=1).mean()
        return float(loss), (p * q.sum(axis=1, keepdims=True) - q) / n
    plogp = p * logp
    ent = -plogp.sum(axis=1)
    d_ent = -(plogp + p * ent[:, None]) / n
    if isinstance(objective, EntropyMin):
        return float(ent.mean()), d_ent
    if isinstance(objective, InfoMax):
        pbar = p.mean(axis=0)
        log_pbar = np.log(np.maximum(pbar, np.finfo(float).tiny))
        marginal = -float((pbar * log_pbar).sum())
        d_marg = p * (log_pbar - (p * log_pbar).sum(axis=1, keepdims=True)) / n
        return float(ent.mean()) - marginal, d_ent + d_marg
    raise TypeError(f"unknown objective {objective!r}")


def loss_and_grads(model: Model, x: np.ndarray, objective: Objective,
                   wrt: ParamSet, start: int = 0) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of ``objective`` on batch ``x`` and its gradient w.r.t. ``wrt``.

    Input gradients (used for memory synthesis) run the network with stored BN
    statistics so samples stay independent. Affine-only objectives run in
    batch-statistics mode, the test-time adaptation setting. Source training
    (``wrt=ALL``) uses batch statistics as well; callers wanting running-stat
    updates do an extra forward pass. ``start`` is as in :func:`forward_with_cache`.
    """
    wrt = ParamSet(wrt)
    if wrt not in _ALLOWED.get(type(objective), ()):
        raise ValueError(f"{type(objective).__name__} cannot be differentiated w.r.t. {wrt.value}")
    mode = BNMode.RUNNING if wrt == ParamSet.INPUT else BNMode.BATCH
    logits, cache = forward_with_cache(model, x, mode, start=start)
    loss, dlogits = objective_loss(objective, logits)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, backward(model, cache, dlogits, wrt)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        out[name] = p - lr * g if lr else p.copy()
    return out


# ---------------------------------------------------------------- checkpoints
#
# Checkpoints are numpy .npz archives. Each model array is stored under
# "<layer index>.<array name>" (row-major float64); the layer layout is
# stored as "__layout__" (one "dense"/"bn:<momentum>:<eps>"/"relu" string per
# layer) together with "__meta__" = [num_classes, input_dim].


def model_to_arrays(model: Model, prefix: str = "") -> dict[str, np.ndarray]:
    kinds = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            kinds.append("dense")
        elif isinstance(layer, BatchNorm):
            kinds.append(f"bn:{layer.momentum!r}:{layer.eps!r}")
        else:
            kinds.append("relu")
    arrays = {prefix + k: v for k, v in model.state().items()}
    arrays[prefix + "__layout__"] = np.array(kinds)
    arrays[prefix + "__meta__"] = np.array([model.num_classes, model.input_dim], dtype=np.int64)
    return arrays


def model_from_arrays(arrays, prefix: str = "") -> Model:
    layers = []
    for i, kind in enumerate(arrays[prefix + "__layout__"].tolist()):
        get = lambda a: np.array(arrays[f"{prefix}{i}.{a}"], dtype=np.float64)  # noqa: E731
        if kind == "dense":
            layers.append(Dense(get("weight"), get("bias")))
        elif kind.startswith("bn:"):
            _, m, eps = kind.split(":")
            layers.append(BatchNorm(get("running_mean"), get("running_var"), get("scale"), get("shift"),
                                    float(m), float(eps)))
        else:
            layers.append(ReLU())
    k, d = arrays[prefix + "__meta__"].tolist()
    return Model(layers, int(k), int(d))


def save_model(model: Model, path: str | Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **model_to_arrays(model))


def load_model(path: str | Path) -> Model:
    with np.load(path, allow_pickle=False) as f:
        return model_from_arrays(f)
