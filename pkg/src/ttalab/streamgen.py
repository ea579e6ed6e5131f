"""Synthetic tracklet data, tracklet preprocessing geometry and test-stream construction."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .corruption import CorruptionKind, SeveritySchedule, corrupt, severity_at


class Scenario(str, enum.Enum):
    FRAME_IID = "frame_iid"
    TRACKLET_IID = "tracklet_iid"
    TRACKLET_NONIID = "tracklet_noniid"
    TRACKLET_MIMIC = "tracklet_mimic"


@dataclass
class Tracklet:
    id: int
    label: int
    frames: np.ndarray  # (T, side*side)
    corruption_seed: int
    split: str = "test"

    def __post_init__(self):
        if self.frames.ndim != 2 or len(self.frames) < 1:
            raise ValueError("a tracklet needs at least one frame")


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 21
    tracklets_per_class: int = 40
    frames_per_tracklet: int = 64  # as rendered, before subsampling
    subsample_interval: int = 4  # keeps frames 0, 4, ..., 60
    side: int = 16
    drift: float = 1.0
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.side * self.side


SPLIT_FRACTIONS = {"train": 0.5, "val": 0.3, "test": 0.2}


@dataclass
class ToyDataset:
    config: DatasetConfig
    tracklets: list[Tracklet]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def split(self, name: str) -> list[Tracklet]:
        return [t for t in self.tracklets if t.split == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """All frames of a split stacked as (x, y)."""
        tr = self.split(name)
        x = np.concatenate([t.frames for t in tr])
        y = np.concatenate([np.full(len(t.frames), t.label) for t in tr])
        return x, y


# ---------------------------------------------------------------- rendering


def class_prototype(label: int, num_classes: int = 21) -> dict[str, float]:
    """Pattern parameters of a class: an oriented grating under a Gaussian envelope."""
    if not 0 <= label < num_classes:
        raise ValueError(f"unknown class {label}")
    n_orient = 7
    orient = (label % n_orient) * math.pi / n_orient
    band = (label // n_orient) % 3
    freq = (0.11, 0.19, 0.29)[band]
    # each frequency band sits in its own region so bands are separable spatially as well
    angle = 2 * math.pi * (label % n_orient) / n_orient + band
    return {
        "orient": orient,
        "freq": freq,
        "phase": 0.0,
        "cy": 7.5 + 1.5 * math.sin(angle),
        "cx": 7.5 + 1.5 * math.cos(angle),
        "width": 4.0 + band,
        "amp": 0.4,
        "bg": 0.5,
    }


def render(params: dict[str, float], side: int = 16) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u = (xx - params["cx"]) * math.cos(params["orient"]) + (yy - params["cy"]) * math.sin(params["orient"])
    env = np.exp(-((xx - params["cx"]) ** 2 + (yy - params["cy"]) ** 2) / (2 * params["width"] ** 2))
    img = params["bg"] + params["amp"] * env * np.cos(2 * math.pi * params["freq"] * u + params["phase"])
    return np.clip(img, 0.0, 1.0).ravel()


_JITTER = {"orient": 0.06, "freq": 0.008, "phase": 0.5, "cy": 0.6, "cx": 0.6, "width": 0.3, "amp": 0.05, "bg": 0.04}
_STEP = {"orient": 0.01, "freq": 0.001, "phase": 0.06, "cy": 0.08, "cx": 0.08, "width": 0.04, "amp": 0.005, "bg": 0.004}


def synth_tracklet(label: int, length: int, drift: float, rng: np.random.Generator, *,
                   num_classes: int = 21, side: int = 16, tracklet_id: int = 0) -> Tracklet:
    """Class prototype plus instance jitter, then a random walk of the pattern parameters."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if drift < 0:
        raise ValueError("drift must be >= 0")
    params = class_prototype(label, num_classes)
    for k, s in _JITTER.items():
        params[k] += s * rng.standard_normal()
    frames = np.empty((length, side * side))
    frames[0] = render(params, side)
    steps = rng.standard_normal((length, len(_STEP)))
    for t in range(1, length):
        if drift > 0:
            for j, (k, s) in enumerate(_STEP.items()):
                params[k] += drift * s * steps[t, j]
            frames[t] = render(params, side)
        else:
            frames[t] = frames[0]
    return Tracklet(tracklet_id, label, frames, int(rng.integers(2**63)))


def make_dataset(config: DatasetConfig = DatasetConfig()) -> ToyDataset:
    rng = np.random.default_rng(config.seed)
    n = config.tracklets_per_class
    n_train = round(n * SPLIT_FRACTIONS["train"])
    n_val = round(n * SPLIT_FRACTIONS["val"])
    if min(n_train, n_val, n - n_train - n_val) < 1:
        raise ValueError("too few tracklets per class for a three-way split")
    tracklets = []
    for c in range(config.num_classes):
        for i in range(n):
            t = synth_tracklet(c, config.frames_per_tracklet, config.drift, rng,
                               num_classes=config.num_classes, side=config.side, tracklet_id=len(tracklets))
            t.frames = subsample_frames(t.frames, config.subsample_interval)
            t.split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            tracklets.append(t)
    return ToyDataset(config, tracklets)


# ---------------------------------------------------------------- dataset files
#
# <stem>.manifest.txt : "key = value" lines for the DatasetConfig, then one
#                       whitespace-separated record per tracklet:
#                       id class split frame_count corruption_seed
# <stem>.npz          : frames of tracklet <id> under key "tracklet.<id>",
#                       shape (frame_count, side*side), float64


def save_dataset(ds: ToyDataset, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    manifest = stem.with_name(stem.name + ".manifest.txt")
    arrays = stem.with_name(stem.name + ".npz")
    lines = ["# toy tracklet dataset manifest"]
    lines += [f"{k} = {v!r}" for k, v in asdict(ds.config).items()]
    lines.append("# id class split frame_count corruption_seed")
    lines += [f"{t.id} {t.label} {t.split} {len(t.frames)} {t.corruption_seed}" for t in ds.tracklets]
    manifest.write_text("\n".join(lines) + "\n")
    with open(arrays, "wb") as fh:
        np.savez(fh, **{f"tracklet.{t.id}": t.frames for t in ds.tracklets})
    return manifest, arrays


def load_dataset(stem: str | Path) -> ToyDataset:
    stem = Path(stem)
    manifest = stem.with_name(stem.name + ".manifest.txt")
    cfg, records = {}, []
    for line in manifest.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            cfg[k] = v
        else:
            records.append(line.split())
    types = {f.name: f.type for f in fields(DatasetConfig)}
    config = DatasetConfig(**{k: (float(v) if types[k] in (float, "float") else int(v)) for k, v in cfg.items()})
    tracklets = []
    with np.load(stem.with_name(stem.name + ".npz")) as arr:
        for tid, label, split, count, seed in records:
            frames = arr[f"tracklet.{tid}"]
            if len(frames) != int(count):
                raise ValueError(f"tracklet {tid}: manifest says {count} frames, archive has {len(frames)}")
            tracklets.append(Tracklet(int(tid), int(label), frames, int(seed), split))
    return ToyDataset(config, tracklets)


# ---------------------------------------------------------------- preprocessing geometry


def subsample_frames(frames, interval: int):
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return frames[::interval]


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    w: float
    h: float
    image_w: float
    image_h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("degenerate bounding box")
        if self.x0 >= self.image_w or self.y0 >= self.image_h or self.x0 + self.w <= 0 or self.y0 + self.h <= 0:
            raise ValueError("bounding box does not intersect the frame")


def crop_square(b: BBox, enlarge: float = 1.1) -> tuple[float, float, float]:
    """Square region (cx, cy, side) around ``b``, 10% larger than its longest side.

    The square is shifted, never shrunk, to fit the frame; it is only capped
    at the shorter frame side when it cannot fit at all.
    """
    side = min(enlarge * max(b.w, b.h), min(b.image_w, b.image_h))
    half = side / 2
    cx = min(max(b.x0 + b.w / 2, half), b.image_w - half)
    cy = min(max(b.y0 + b.h / 2, half), b.image_h - half)
    return cx, cy, side


def extract_crop(image: np.ndarray, region: tuple[float, float, float], out_side: int = 16) -> np.ndarray:
    """Bilinearly resample a square region of a 2-D image to ``out_side`` x ``out_side``."""
    cx, cy, side = region
    step = side / out_side
    grid = (np.arange(out_side) + 0.5) * step - side / 2
    yy, xx = np.meshgrid(cy + grid - 0.5, cx + grid - 0.5, indexing="ij")
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64), [yy, xx], order=1, mode="nearest")


def read_annotations(path: str | Path) -> list[tuple[str, float, float, float, float]]:
    """Parse one tracklet annotation file: ``frame_path x0 y0 w h`` per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p, x0, y0, w, h = line.split()
        rows.append((p, float(x0), float(y0), float(w), float(h)))
    return rows


def ingest_tracklet_dir(directory: str | Path, class_of: dict[str, int], interval: int = 5,
                        out_side: int = 16, seed: int = 0) -> list[Tracklet]:
    """Build tracklets from ``<name>.txt`` annotation files over pre-decoded ``.npy`` frames.

    Frame paths are resolved relative to the annotation directory and must
    hold 2-D grayscale arrays in [0, 1]; the tracklet's class is looked up by
    file stem in ``class_of``.
    """
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    out = []
    for ann in sorted(directory.glob("*.txt")):
        rows = subsample_frames(read_annotations(ann), interval)
        crops = []
        for p, x0, y0, w, h in rows:
            img = np.load(directory / p)
            region = crop_square(BBox(x0, y0, w, h, img.shape[1], img.shape[0]))
            crops.append(np.clip(extract_crop(img, region, out_side), 0, 1).ravel())
        if crops:
            out.append(Tracklet(len(out), class_of[ann.stem], np.stack(crops), int(rng.integers(2**63))))
    return out


# ---------------------------------------------------------------- Dirichlet ordering


def dirichlet(gamma: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Dir(gamma) draw from k normalised Gamma(gamma, 1) variates.

    The gammas are drawn in log space (Gamma(a) = Gamma(a + 1) * U**(1/a)),
    which stays finite for concentrations as small as 1e-4 where direct
    draws underflow to zero.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if k < 2:
        raise ValueError("need at least two components")
    log_g = np.log(rng.gamma(gamma + 1.0, 1.0, size=k)) + np.log(rng.random(k)) / gamma
    log_g -= log_g.max()
    p = np.exp(log_g)
    return p / p.sum()


def order_tracklets_noniid(tracklets: list, gamma: float, num_slots: int, rng: np.random.Generator) -> list:
    """Label-correlated order: each class is spread over time slots by a Dir(gamma) draw.

    A class's tracklets are shuffled and cut into contiguous chunks with
    sizes proportional to its Dirichlet weights, one chunk per slot. Slots
    are emitted in order, with the chunks inside a slot in random order.
    """
    if not tracklets:
        raise ValueError("no tracklets to order")
    if num_slots < 1:
        raise ValueError("num_slots must be >= 1")
    by_class: dict[int, list[int]] = {}
    for i, t in enumerate(tracklets):
        by_class.setdefault(t.label, []).append(i)
    slots: list[list[np.ndarray]] = [[] for _ in range(num_slots)]
    for c in sorted(by_class):
        idx = rng.permutation(by_class[c])
        weights = dirichlet(gamma, num_slots, rng) if num_slots > 1 else np.ones(1)
        cuts = (np.cumsum(weights)[:-1] * len(idx)).astype(int)
        for s, chunk in enumerate(np.split(idx, cuts)):
            if len(chunk):
                slots[s].append(chunk)
    order = []
    for chunks in slots:
        for j in rng.permutation(len(chunks)):
            order.extend(int(i) for i in chunks[j])
    return [tracklets[i] for i in order]


# ---------------------------------------------------------------- streams


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario = Scenario.TRACKLET_IID
    gamma: float | None = None
    corruption: CorruptionKind | None = CorruptionKind.GAUSSIAN_NOISE
    schedule: SeveritySchedule = field(default_factory=SeveritySchedule)
    batch_size: int = 64
    seed: int = 0
    num_slots: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.corruption is not None:
            object.__setattr__(self, "corruption", CorruptionKind(self.corruption))
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.scenario == Scenario.TRACKLET_NONIID:
            if self.gamma is None or self.gamma <= 0:
                raise ValueError("the non-iid scenario needs a positive gamma")
        elif self.gamma is not None:
            raise ValueError(f"gamma only applies to {Scenario.TRACKLET_NONIID.value}")


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray | None = None
    tracklet_ids: np.ndarray | None = None
    frame_index: np.ndarray | None = None
    severity: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)


class CorruptedFrames:
    """Lazily corrupted view of tracklet frames for one (kind, schedule, seed).

    A tracklet's frames share its kind and ``corruption_seed``; the per-frame
    generator is seeded by (stream seed, corruption_seed, frame index).
    """

    def __init__(self, corruption: CorruptionKind | None, schedule: SeveritySchedule, seed: int):
        self.corruption = corruption
        self.schedule = schedule
        self.seed = seed
        self._cache: dict[tuple[int, int], tuple[np.ndarray, float]] = {}

    def frame(self, tracklet: Tracklet, t: int) -> tuple[np.ndarray, float]:
        key = (tracklet.id, t)
        hit = self._cache.get(key)
        if hit is None:
            x = tracklet.frames[t]
            if self.corruption is None:
                hit = (x, 0.0)
            else:
                s = severity_at(self.schedule, t)
                if s > 0:
                    x = corrupt(x, self.corruption, s, [self.seed, tracklet.corruption_seed, t])
                hit = (x, s)
            self._cache[key] = hit
        return hit


def _pack(items, tracklets_by_pos) -> Batch:
    xs, ys, tids, ts, sev = [], [], [], [], []
    for (x, s), (trk, t) in zip(items, tracklets_by_pos):
        xs.append(x)
        ys.append(trk.label)
        tids.append(trk.id)
        ts.append(t)
        sev.append(s)
    return Batch(np.stack(xs), np.array(ys), np.array(tids), np.array(ts), np.array(sev))


def stream_order(tracklets: list[Tracklet], config: ScenarioConfig, num_classes: int):
    """Ordered (tracklet, frame index) pairs of a scenario, and the batch boundaries."""
    rng = np.random.default_rng([config.seed, 0x5EED])
    b = config.batch_size
    if config.scenario in (Scenario.FRAME_IID, Scenario.TRACKLET_MIMIC):
        order = [tracklets[i] for i in rng.permutation(len(tracklets))]
        picks = [(t, int(rng.integers(len(t.frames)))) for t in order]
        if config.scenario == Scenario.FRAME_IID:
            bounds = [(i, min(i + b, len(picks))) for i in range(0, len(picks), b)]
            return picks, bounds
        return [p for p in picks for _ in range(b)], [(i * b, (i + 1) * b) for i in range(len(picks))]
    if config.scenario == Scenario.TRACKLET_IID:
        order = [tracklets[i] for i in rng.permutation(len(tracklets))]
    else:
        order = order_tracklets_noniid(tracklets, config.gamma, config.num_slots or num_classes, rng)
    picks, bounds = [], []
    for t in order:
        start = len(picks)
        picks.extend((t, i) for i in range(len(t.frames)))
        bounds.extend((s, min(s + b, len(picks))) for s in range(start, len(picks), b))
    return picks, bounds


def build_stream(dataset: ToyDataset, config: ScenarioConfig, frames: CorruptedFrames | None = None) -> list[Batch]:
    """Corrupted test stream of ``config``'s scenario, cut into batches.

    Tracklet-wise scenarios never mix tracklets inside a batch; a tracklet
    longer than the batch size spans consecutive batches and its last batch
    may be short.
    """
    tracklets = dataset.split("test")
    if not tracklets:
        raise ValueError("dataset has an empty test split")
    if frames is None:
        frames = CorruptedFrames(config.corruption, config.schedule, config.seed)
    picks, bounds = stream_order(tracklets, config, dataset.num_classes)
    return [_pack([frames.frame(t, i) for t, i in picks[a:z]], picks[a:z]) for a, z in bounds]


def batch_majority_labels(batches: list[Batch]) -> np.ndarray:
    return np.array([np.bincount(b.labels).argmax() for b in batches])


def lag1_label_agreement(batches: list[Batch]) -> float:
    """Fraction of consecutive batch pairs whose majority labels agree."""
    lab = batch_majority_labels(batches)
    if len(lab) < 2:
        return 1.0
    return float(np.mean(lab[1:] == lab[:-1]))
