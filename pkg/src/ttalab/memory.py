"""Category-balanced memory bank and its initialisers (empty, adversarial, training samples)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import BNMode, CrossEntropy, Model, ParamSet, entropy, forward, loss_and_grads, softmax


class AdvMemError(RuntimeError):
    """Input-gradient descent failed to reach the assigned label; the model is likely untrained."""


@dataclass(eq=False)  # identity semantics: the bank removes entries by reference
class MemoryEntry:
    x: np.ndarray
    y: int
    uncertainty: float
    age: int = 0
    synthetic: bool = False
    order: int = field(default=0, compare=False, repr=False)  # insertion rank, breaks exact ties
    feature: np.ndarray | None = field(default=None, compare=False, repr=False)  # owner's cached projection of x


@dataclass
class MemoryBank:
    """Fixed-capacity store. Mutate only through :meth:`add`, :meth:`insert` and :meth:`tick`."""

    capacity: int
    num_classes: int
    entries: list[MemoryEntry] = field(default_factory=list)
    age_weight: float = 0.5  # lambda in the eviction score

    def __post_init__(self):
        if len(self.entries) > max(self.capacity, 0):
            raise ValueError("more entries than capacity")
        given, self.entries = self.entries, []
        self._by_class = [[] for _ in range(self.num_classes)]
        self._next = 0
        for e in given:
            self.add(e)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def is_full(self) -> bool:
        return len(self.entries) >= self.capacity

    def class_counts(self) -> np.ndarray:
        return np.array([len(c) for c in self._by_class], dtype=np.int64)

    def add(self, entry: MemoryEntry) -> None:
        """Append without eviction (initialisers, loading)."""
        if not 0 <= entry.y < self.num_classes:
            raise ValueError(f"label {entry.y} out of range")
        if self.is_full:
            raise ValueError("bank is full")
        entry.order = self._next
        self._next += 1
        self.entries.append(entry)
        self._by_class[entry.y].append(entry)

    def _victim(self, incoming: int) -> MemoryEntry:
        sizes = [len(c) for c in self._by_class]
        top = max(sizes)
        # an incoming label that already holds the maximum replaces one of its own,
        # so a balanced bank stays balanced
        if sizes[incoming] == top:
            pool = self._by_class[incoming]
        else:
            pool = [e for c, n in zip(self._by_class, sizes) if n == top for e in c]
        lam, inv_log_k = self.age_weight, 1.0 / math.log(self.num_classes)

        def key(e):
            # synthetic first, then the oldest/most uncertain; earliest insertion breaks exact ties
            return e.synthetic, lam * e.age / (1.0 + e.age) + (1 - lam) * e.uncertainty * inv_log_k, -e.order
        return max(pool, key=key)

    def insert(self, x: np.ndarray, label: int, uncertainty: float, synthetic: bool = False,
               feature: np.ndarray | None = None) -> MemoryEntry | None:
        """Add a sample; when full, first evict from a most populated class.

        That class is the sample's own when it is among the most populated.
        """
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} out of range")
        if self.capacity <= 0:
            return None
        evicted = None
        if self.is_full:
            evicted = self._victim(int(label))
            self.entries.remove(evicted)
            self._by_class[evicted.y].remove(evicted)
        self.add(MemoryEntry(np.array(x, dtype=np.float64), int(label), float(uncertainty), 0, synthetic,
                             feature=feature))
        return evicted

    def tick(self) -> None:
        for e in self.entries:
            e.age += 1

    def snapshot(self, rng: np.random.Generator, features: bool = False) -> np.ndarray | None:
        """All stored samples in shuffled order, or None when there is nothing to adapt on.

        ``features=True`` stacks the cached features instead (all must be set).
        """
        if not self.entries:
            return None
        order = rng.permutation(len(self.entries))
        if features:
            return np.stack([self.entries[i].feature for i in order])
        return np.stack([self.entries[i].x for i in order])

    # named-array dump in the same .npz container as model checkpoints
    def to_arrays(self, prefix: str = "memory.") -> dict[str, np.ndarray]:
        dim = self.entries[0].x.shape if self.entries else (0,)
        return {
            prefix + "x": np.stack([e.x for e in self.entries]) if self.entries else np.zeros((0, *dim)),
            prefix + "y": np.array([e.y for e in self.entries], dtype=np.int64),
            prefix + "uncertainty": np.array([e.uncertainty for e in self.entries], dtype=np.float64),
            prefix + "age": np.array([e.age for e in self.entries], dtype=np.int64),
            prefix + "synthetic": np.array([e.synthetic for e in self.entries], dtype=bool),
            prefix + "meta": np.array([self.capacity, self.num_classes], dtype=np.int64),
            prefix + "age_weight": np.array(self.age_weight),
        }

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "memory.") -> "MemoryBank":
        cap, k = arrays[prefix + "meta"].tolist()
        bank = cls(int(cap), int(k), age_weight=float(arrays[prefix + "age_weight"]))
        for x, y, u, a, s in zip(arrays[prefix + "x"], arrays[prefix + "y"], arrays[prefix + "uncertainty"],
                                 arrays[prefix + "age"], arrays[prefix + "synthetic"]):
            bank.add(MemoryEntry(np.array(x), int(y), float(u), int(a), bool(s)))
        return bank

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.to_arrays())

    @classmethod
    def load(cls, path: str | Path) -> "MemoryBank":
        with np.load(path) as f:
            return cls.from_arrays(f)


def _draw_labels(k: int, n: int, balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if balanced:
        return np.arange(n) % k
    return rng.integers(0, k, size=n)


def advmem_init(model: Model, k: int, n: int, alpha: float = 0.05, max_iters: int = 200,
                rng: np.random.Generator | None = None, *, balanced: bool = False, retries: int = 5,
                noise_scale: float = 0.15) -> MemoryBank:
    """Fill a bank with noise optimised by input-gradient descent until the model predicts its label.

    Each candidate starts as ``clip(0.5 + noise_scale * z, 0, 1)`` with
    ``z ~ N(0, I)`` and a label drawn uniformly (or cycled when
    ``balanced``), then follows ``x <- x - alpha * grad_x CE(f(x), y)`` until
    ``argmax f(x) == y``. Candidates still wrong after ``max_iters`` steps are
    redrawn, at most ``retries`` times.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    bank = MemoryBank(n, k)
    if n <= 0:
        return bank
    labels = _draw_labels(k, n, balanced, rng)
    pending = np.arange(n)
    done = np.zeros((n, model.input_dim))
    for _attempt in range(retries + 1):
        x = np.clip(0.5 + noise_scale * rng.standard_normal((len(pending), model.input_dim)), 0.0, 1.0)
        y = labels[pending]
        active = np.ones(len(pending), dtype=bool)
        for _ in range(max_iters + 1):
            pred = forward(model, x[active]).argmax(axis=1)
            hit = np.flatnonzero(active)[pred == y[active]]
            active[hit] = False
            if not active.any():
                break
            idx = np.flatnonzero(active)
            # stored BN statistics make samples independent; undo the batch mean
            _, g = loss_and_grads(model, x[idx], CrossEntropy(y[idx]), ParamSet.INPUT)
            x[idx] -= alpha * g["input"] * len(idx)
        done[pending[~active]] = x[~active]
        pending = pending[active]
        if len(pending) == 0:
            break
    else:
        raise AdvMemError(f"{len(pending)} of {n} samples never reached their label "
                          f"after {retries} retries of {max_iters} steps")
    probs = softmax(forward(model, done))
    unc = entropy(probs)
    for xi, yi, ui in zip(done, labels, unc):
        bank.add(MemoryEntry(xi, int(yi), float(ui), 0, True))
    return bank


def trainmem_init(x_train: np.ndarray, y_train: np.ndarray, k: int, n: int, rng: np.random.Generator | None = None,
                  *, model: Model | None = None, balanced: bool = False) -> MemoryBank:
    """Fill a bank with training samples drawn class-first, without replacement.

    A drawn class with no samples left is redrawn. ``balanced`` cycles the
    classes instead of drawing them.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if n > len(x_train):
        raise ValueError("not enough training samples to fill the bank")
    pools = {c: list(rng.permutation(np.flatnonzero(y_train == c))) for c in range(k)}
    chosen, labels = [], []
    step = 0
    while len(chosen) < n:
        c = step % k if balanced else int(rng.integers(k))
        step += 1
        if not pools[c]:
            if not any(pools.values()):
                raise ValueError("training pool exhausted")
            continue
        chosen.append(int(pools[c].pop()))
        labels.append(c)
    bank = MemoryBank(n, k)
    if n == 0:
        return bank
    xs = x_train[chosen]
    unc = entropy(softmax(forward(model, xs))) if model is not None else np.zeros(n)
    for xi, yi, ui in zip(xs, labels, unc):
        bank.add(MemoryEntry(np.array(xi), yi, float(ui), 0, False))
    return bank
