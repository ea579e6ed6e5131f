"""Single runs and deterministic grids of (scenario, corruption, method) cells."""

from __future__ import annotations

import itertools
import logging
import multiprocessing as mp
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..adapters import Adapter, AdapterHyper, MemInit, Method
from ..corruption import BENCHMARK_KINDS, CorruptionKind, SeveritySchedule
from ..nn import Model
from ..streamgen import CorruptedFrames, Scenario, ScenarioConfig, ToyDataset, build_stream
from .config import ConfigError, split_list

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdapterSpec:
    method: Method
    hyper: AdapterHyper = AdapterHyper()

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))


@dataclass
class RunReport:
    scenario: str
    gamma: float | None
    batch_size: int
    corruption: str
    method: str
    mem_init: str
    seed: int
    n_samples: int = 0
    errors: int = 0
    status: str = "ok"
    message: str = ""
    wall_time: float = field(default=0.0, compare=False)  # informational, never written to CSV

    @property
    def error_rate(self) -> float:
        return self.errors / self.n_samples if self.n_samples else float("nan")

    @property
    def key(self) -> tuple:
        return cell_sort_key(self.scenario, self.gamma, self.batch_size, self.corruption,
                             self.method, self.mem_init, self.seed)


_SCENARIO_RANK = {s.value: i for i, s in enumerate(Scenario)}
_METHOD_RANK = {m.value: i for i, m in enumerate(Method)}
_INIT_RANK = {m.value: i for i, m in enumerate(MemInit)}
_KIND_RANK = {k.value: i for i, k in enumerate(CorruptionKind)}


def cell_sort_key(scenario, gamma, batch_size, corruption, method, mem_init, seed) -> tuple:
    """Canonical order: scenario, gamma, batch size, corruption, method, memory init, seed."""
    return (_SCENARIO_RANK[scenario], -1.0 if gamma is None else float(gamma), int(batch_size),
            _KIND_RANK.get(corruption, len(_KIND_RANK)), corruption, _METHOD_RANK[method], _INIT_RANK[mem_init],
            int(seed))


def run_one(model: Model, dataset: ToyDataset, adapter_spec: AdapterSpec, scenario_config: ScenarioConfig, *,
            frames: CorruptedFrames | None = None, stream=None) -> RunReport:
    """Online protocol: predict each batch before adapting on it, score against held labels.

    ``stream`` may pass a prebuilt batch list for ``scenario_config``.
    """
    cfg = scenario_config
    report = RunReport(cfg.scenario.value, cfg.gamma, cfg.batch_size,
                       cfg.corruption.value if cfg.corruption is not None else "none",
                       adapter_spec.method.value, adapter_spec.hyper.mem_init.value, cfg.seed)
    start = time.perf_counter()
    if stream is None:
        stream = build_stream(dataset, cfg, frames)
    train_data = dataset.arrays("train") if adapter_spec.hyper.mem_init == MemInit.TRAINMEM else None
    adapter = Adapter(adapter_spec.method, model, adapter_spec.hyper, train_data)
    adapter.reset(model)
    for batch in stream:
        pred = adapter.predict_and_adapt(batch.x.copy())  # the adapter never sees labels
        report.errors += int((pred != batch.labels).sum())
        report.n_samples += len(batch)
    report.wall_time = time.perf_counter() - start
    return report


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class Cell:
    scenario: Scenario
    gamma: float | None
    batch_size: int
    corruption: CorruptionKind
    method: Method
    mem_init: MemInit
    seed: int

    @property
    def key(self) -> tuple:
        return cell_sort_key(self.scenario.value, self.gamma, self.batch_size, self.corruption.value,
                             self.method.value, self.mem_init.value, self.seed)


@dataclass(frozen=True)
class GridSpec:
    """Cartesian product of cells.

    ``gammas`` only expand the non-iid scenario; memory initialisers other
    than empty only pair with memory-owning methods.
    """
    scenarios: tuple[Scenario, ...] = (Scenario.TRACKLET_NONIID,)
    gammas: tuple[float, ...] = (1e-4, 1e-1, 1e3)
    batch_sizes: tuple[int, ...] = (8, 16, 32, 64)
    corruptions: tuple[CorruptionKind, ...] = tuple(BENCHMARK_KINDS)
    methods: tuple[Method, ...] = tuple(Method)
    mem_inits: tuple[MemInit, ...] = tuple(MemInit)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    severity: float = 5.0
    dynamic_severity: bool = False
    lr: float = AdapterHyper.lr
    memory_capacity: int = AdapterHyper.memory_capacity
    ema_decay: float = AdapterHyper.ema_decay
    bn_blend: float = AdapterHyper.bn_blend

    def __post_init__(self):
        conv = {"scenarios": Scenario, "corruptions": CorruptionKind, "methods": Method, "mem_inits": MemInit,
                "gammas": float, "batch_sizes": int, "seeds": int}
        for name, typ in conv.items():
            object.__setattr__(self, name, tuple(typ(v) for v in getattr(self, name)))
            if not getattr(self, name) and not (name == "gammas" and Scenario.TRACKLET_NONIID not in self.scenarios):
                raise ValueError(f"grid axis {name} is empty")
        if any(b < 1 for b in self.batch_sizes) or any(g <= 0 for g in self.gammas):
            raise ValueError("batch sizes and gammas must be positive")
        self.hyper(MemInit.EMPTY)  # validates the scalar hyperparameters

    def schedule(self) -> SeveritySchedule:
        return SeveritySchedule(self.severity, self.dynamic_severity)

    def hyper(self, mem_init: MemInit, seed: int = 0) -> AdapterHyper:
        return AdapterHyper(lr=self.lr, memory_capacity=self.memory_capacity, mem_init=mem_init,
                            ema_decay=self.ema_decay, bn_blend=self.bn_blend, init_seed=seed)

    def cells(self) -> list[Cell]:
        out = []
        for sc in self.scenarios:
            gammas = self.gammas if sc == Scenario.TRACKLET_NONIID else (None,)
            for g, b, kind, m, mi, seed in itertools.product(gammas, self.batch_sizes, self.corruptions,
                                                             self.methods, self.mem_inits, self.seeds):
                if mi != MemInit.EMPTY and not m.uses_memory:
                    continue
                out.append(Cell(sc, g, b, kind, m, mi, seed))
        return sorted(set(out), key=lambda c: c.key)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "GridSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                continue  # sweep-level keys (seed, parallelism, ...) live alongside grid keys
            default = getattr(cls, key) if not isinstance(getattr(cls, key, None), property) else None
            if isinstance(default, tuple):
                kwargs[key] = tuple(split_list(value))
            elif isinstance(default, bool):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{key}: expected a boolean, got {value!r}")
                kwargs[key] = value.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def grid_cells(grids: GridSpec | list[GridSpec]) -> list[tuple[Cell, GridSpec]]:
    """Union of the cells of ``grids`` in canonical order; the first grid naming a cell wins."""
    grids = [grids] if isinstance(grids, GridSpec) else list(grids)
    seen: dict[Cell, GridSpec] = {}
    for g in grids:
        for c in g.cells():
            seen.setdefault(c, g)
    return sorted(seen.items(), key=lambda item: item[0].key)


def _failed(cell: Cell, message: str) -> RunReport:
    return RunReport(cell.scenario.value, cell.gamma, cell.batch_size, cell.corruption.value, cell.method.value,
                     cell.mem_init.value, cell.seed, status="failed", message=message)


# process-global context for forked workers
_CONTEXT: dict = {}


def _run_unit(unit: list[tuple[Cell, GridSpec]]) -> list[RunReport]:
    """All cells sharing one (corruption, seed, schedule): corrupted frames are computed once.

    Cells whose streams have identical batch boundaries (e.g. batch sizes
    above the tracklet length) reuse the result of the first such run.
    """
    model, dataset = _CONTEXT["model"], _CONTEXT["dataset"]
    first_cell, first_grid = unit[0]
    frames = CorruptedFrames(first_cell.corruption, first_grid.schedule(), first_cell.seed)
    streams: dict[tuple, tuple] = {}
    done: dict[tuple, RunReport] = {}
    out = []
    for cell, grid in unit:
        try:
            cfg = ScenarioConfig(cell.scenario, cell.gamma, cell.corruption, grid.schedule(), cell.batch_size,
                                 cell.seed)
            if cfg not in streams:
                stream = build_stream(dataset, cfg, frames)
                shape = (cell.scenario, cell.gamma, tuple(len(b) for b in stream))
                streams[cfg] = (stream, shape)
            stream, shape = streams[cfg]
            spec = AdapterSpec(cell.method, grid.hyper(cell.mem_init, cell.seed))
            memo = (shape, spec)
            if memo in done:
                rep = replace(done[memo], batch_size=cell.batch_size, wall_time=0.0)
            else:
                rep = run_one(model, dataset, spec, cfg, stream=stream)
                done[memo] = rep
        except Exception as exc:  # one bad cell must not sink the grid
            log.warning("cell %s failed: %s", cell, exc)
            rep = _failed(cell, f"{type(exc).__name__}: {exc}".replace("\n", " "))
            log.debug("%s", traceback.format_exc())
        out.append(rep)
    return out


def _init_worker(model, dataset):
    _CONTEXT["model"] = model
    _CONTEXT["dataset"] = dataset


def run_grid(grid: GridSpec | list[GridSpec], parallelism: int, *, model: Model, dataset: ToyDataset,
             progress=None) -> list[RunReport]:
    """Run every cell; the result list is in canonical cell order for any ``parallelism``."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    cells = grid_cells(grid)
    units: dict[tuple, list] = {}
    for cell, g in cells:
        units.setdefault((cell.corruption, cell.seed, g.schedule()), []).append((cell, g))
    work = list(units.values())
    results: list[RunReport] = []
    if parallelism == 1 or len(work) == 1:
        _init_worker(model, dataset)
        for i, unit in enumerate(work):
            results.extend(_run_unit(unit))
            if progress:
                progress(i + 1, len(work))
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(parallelism, mp_context=ctx, initializer=_init_worker,
                                 initargs=(model, dataset)) as pool:
            for i, reps in enumerate(pool.map(_run_unit, work)):
                results.extend(reps)
                if progress:
                    progress(i + 1, len(work))
    return sorted(results, key=lambda r: r.key)
