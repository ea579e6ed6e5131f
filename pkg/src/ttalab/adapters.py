"""Test-time adaptation methods behind one ``predict_and_adapt`` interface."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .memory import MemoryBank, advmem_init, trainmem_init
from .nn import (BNMode, Distill, EntropyMin, InfoMax, Model, ParamSet, backward, bn_batch_stats, entropy, forward,
                 forward_with_cache, loss_and_grads, objective_loss, project_input, sgd_step,
                 softmax)


class Method(str, enum.Enum):
    SOURCE = "source"
    ADABN = "adabn"
    TENT = "tent"
    SHOT_IM = "shot_im"
    ROTTA_LITE = "rotta_lite"
    MEM_TENT = "mem_tent"
    MEM_SHOT_IM = "mem_shot_im"

    @property
    def uses_memory(self) -> bool:
        return self in (Method.ROTTA_LITE, Method.MEM_TENT, Method.MEM_SHOT_IM)


class MemInit(str, enum.Enum):
    EMPTY = "empty"
    ADVMEM = "advmem"
    TRAINMEM = "trainmem"


@dataclass(frozen=True)
class AdapterHyper:
    lr: float = 1e-3
    memory_capacity: int = 64
    mem_init: MemInit = MemInit.EMPTY
    ema_decay: float = 0.999
    bn_blend: float = 0.05
    temperature: float = 0.5  # sharpening of RoTTA-lite teacher targets
    adapt_on_live_batch: bool = False  # memory methods: also step on the incoming batch
    advmem_alpha: float = 0.05
    advmem_max_iters: int = 200
    advmem_balanced: bool = False
    age_weight: float = 0.5
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mem_init", MemInit(self.mem_init))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.ema_decay < 1 and 0 < self.bn_blend < 1):
            raise ValueError("ema_decay and bn_blend must lie in (0, 1)")


def _sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    q = p ** (1.0 / temperature)
    return q / q.sum(axis=1, keepdims=True)


class Adapter:
    """One method with its own model, memory bank and teacher.

    ``train_data`` (x, y) is only needed for training-sample memory
    initialisation.
    """

    def __init__(self, method: Method | str, model: Model, hyper: AdapterHyper = AdapterHyper(),
                 train_data: tuple[np.ndarray, np.ndarray] | None = None):
        self.method = Method(method)
        self.hyper = hyper
        if hyper.mem_init != MemInit.EMPTY and not self.method.uses_memory:
            raise ValueError(f"{self.method.value} has no memory to initialise")
        if hyper.mem_init == MemInit.TRAINMEM and train_data is None:
            raise ValueError("training-sample initialisation needs train_data")
        self.train_data = train_data
        self.reset(model)

    def reset(self, pristine: Model) -> None:
        """Restore model, teacher, memory and RNG state from ``pristine``."""
        if hasattr(self, "model") and self.model.state().keys() != pristine.state().keys():
            raise ValueError("pristine model does not match the adapter's architecture")
        if hasattr(self, "model"):
            for name, arr in pristine.state().items():
                if self.model.state()[name].shape != arr.shape:
                    raise ValueError(f"shape mismatch in {name}")
        self.model = pristine.copy()
        self.teacher = pristine.copy() if self.method == Method.ROTTA_LITE else None
        self.rng = np.random.default_rng([self.hyper.init_seed, 1])
        self.bank = self._init_bank() if self.method.uses_memory else None

    def _init_bank(self) -> MemoryBank:
        h = self.hyper
        k = self.model.num_classes
        rng = np.random.default_rng([h.init_seed, 2])
        if h.mem_init == MemInit.ADVMEM:
            bank = advmem_init(self.model, k, h.memory_capacity, h.advmem_alpha, h.advmem_max_iters, rng,
                               balanced=h.advmem_balanced)
        elif h.mem_init == MemInit.TRAINMEM:
            x, y = self.train_data
            bank = trainmem_init(x, y, k, h.memory_capacity, rng, model=self.model)
        else:
            bank = MemoryBank(h.memory_capacity, k)
        bank.age_weight = h.age_weight
        return bank

    # ------------------------------------------------------------ steps

    def _affine_step(self, model: Model, x: np.ndarray, objective, start: int = 0) -> None:
        _, grads = loss_and_grads(model, x, objective, ParamSet.BN_AFFINE, start)
        model.set_params(sgd_step(model.params(ParamSet.BN_AFFINE), grads, self.hyper.lr))

    def _objective(self):
        return InfoMax() if self.method in (Method.SHOT_IM, Method.MEM_SHOT_IM) else EntropyMin()

    def _remember(self, x: np.ndarray, z: np.ndarray, probs: np.ndarray) -> None:
        unc = entropy(probs)
        for xi, zi, pi, ui in zip(x, z, probs.argmax(axis=1), unc):
            self.bank.insert(xi, int(pi), float(ui), feature=zi)

    def _memory_batch(self) -> np.ndarray | None:
        """Shuffled memory as first-layer features (dense weights never adapt)."""
        missing = [e for e in self.bank.entries if e.feature is None]
        if missing:  # initialiser entries
            z = project_input(self.model, np.stack([e.x for e in missing]))
            for e, zi in zip(missing, z):
                e.feature = zi
        return self.bank.snapshot(self.rng, features=True)

    def predict_and_adapt(self, x: np.ndarray) -> np.ndarray:
        """Predict labels for an unlabeled batch, then adapt on it."""
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            raise ValueError("empty batch")
        m = self.method
        if m == Method.SOURCE:
            return forward(self.model, x).argmax(axis=1)
        if m in (Method.ADABN, Method.TENT, Method.SHOT_IM):
            if len(x) < 2:  # batch statistics undefined for a single sample
                return forward(self.model, x).argmax(axis=1)
            logits = forward(self.model, x, BNMode.BATCH)
            if m == Method.ADABN:
                for (_, layer), (mean, var) in zip(self.model.bn_layers(), bn_batch_stats(self.model, x)):
                    layer.running_mean, layer.running_var = mean, var
            else:
                self._affine_step(self.model, x, self._objective())
            return logits.argmax(axis=1)
        if m in (Method.MEM_TENT, Method.MEM_SHOT_IM):
            z = project_input(self.model, x)
            probs = softmax(forward(self.model, z, start=1))
            self._remember(x, z, probs)
            mem = self._memory_batch()
            if mem is not None and len(mem) >= 2:
                self._affine_step(self.model, mem, self._objective(), start=1)
            if self.hyper.adapt_on_live_batch and len(x) >= 2:
                self._affine_step(self.model, x, self._objective())
            self.bank.tick()
            return probs.argmax(axis=1)
        return self._rotta_step(x)

    def _rotta_step(self, x: np.ndarray) -> np.ndarray:
        h = self.hyper
        z = project_input(self.teacher, x)
        teacher_probs = softmax(forward(self.teacher, z, start=1))
        self._remember(x, z, teacher_probs)
        mem = self._memory_batch()
        if mem is not None and len(mem) >= 2:
            # UPDATE-mode passes blend the memory batch's statistics into the
            # running ones (robust BN) while normalising by the batch itself
            targets = _sharpen(softmax(forward_with_cache(self.teacher, mem, BNMode.UPDATE, h.bn_blend, 1)[0]),
                               h.temperature)
            logits, cache = forward_with_cache(self.model, mem, BNMode.UPDATE, h.bn_blend, 1)
            _, dlogits = objective_loss(Distill(targets), logits)
            grads = backward(self.model, cache, dlogits, ParamSet.BN_AFFINE)
            self.model.set_params(sgd_step(self.model.params(ParamSet.BN_AFFINE), grads, h.lr))
            t_params = self.teacher.params(ParamSet.BN_AFFINE)
            s_params = self.model.params(ParamSet.BN_AFFINE)
            self.teacher.set_params({k: h.ema_decay * t_params[k] + (1 - h.ema_decay) * s_params[k]
                                     for k in t_params})
        self.bank.tick()
        return teacher_probs.argmax(axis=1)

    # ------------------------------------------------------------ checkpoint

    def state_arrays(self) -> dict[str, np.ndarray]:
        from .nn import model_to_arrays
        out = model_to_arrays(self.model, "model.")
        if self.teacher is not None:
            out.update(model_to_arrays(self.teacher, "teacher."))
        if self.bank is not None:
            out.update(self.bank.to_arrays("memory."))
        out["method"] = np.array(self.method.value)
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_arrays())
