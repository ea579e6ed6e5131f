"""Severity-parameterised corruptions for small grayscale images, and severity schedules.

Every operator is a pure function of (image, kind, severity, seed). The
parameter values per severity level live in ``corruption_table.txt``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn


class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    DEFOCUS_BLUR = "defocus_blur"
    GLASS_BLUR = "glass_blur"
    ZOOM_BLUR = "zoom_blur"
    MOTION_BLUR = "motion_blur"
    SNOW = "snow"
    FROST = "frost"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    ELASTIC_TRANSFORM = "elastic_transform"
    PIXELATE = "pixelate"
    JPEG_LIKE = "jpeg_like"

    @property
    def group(self) -> str:
        return GROUP_OF[self]

    @property
    def short(self) -> str:
        return SHORT_NAMES[self]


K = CorruptionKind
GROUPS = {
    "Noise": [K.GAUSSIAN_NOISE, K.SHOT_NOISE, K.IMPULSE_NOISE],
    "Blur": [K.DEFOCUS_BLUR, K.GLASS_BLUR, K.MOTION_BLUR, K.ZOOM_BLUR],
    "Weather": [K.SNOW, K.FROST, K.FOG, K.BRIGHTNESS],
    "Digital": [K.CONTRAST, K.ELASTIC_TRANSFORM, K.PIXELATE, K.JPEG_LIKE],
}
GROUP_OF = {kind: g for g, kinds in GROUPS.items() for kind in kinds}
SHORT_NAMES = {
    K.GAUSSIAN_NOISE: "gauss.", K.SHOT_NOISE: "shot", K.IMPULSE_NOISE: "impul.",
    K.DEFOCUS_BLUR: "defoc.", K.GLASS_BLUR: "glass", K.MOTION_BLUR: "motion", K.ZOOM_BLUR: "zoom",
    K.SNOW: "snow", K.FROST: "frost", K.FOG: "fog", K.BRIGHTNESS: "brigh.",
    K.CONTRAST: "contr.", K.ELASTIC_TRANSFORM: "elast.", K.PIXELATE: "pixel.", K.JPEG_LIKE: "jpeg",
}
# the 14-kind benchmark set; motion blur is available but not in the default grid
BENCHMARK_KINDS = [k for k in CorruptionKind if k != K.MOTION_BLUR]
_INT_PARAMS = {"delta", "iterations", "block"}


def parse_table(text: str) -> dict[CorruptionKind, list[dict[str, float]]]:
    table: dict[CorruptionKind, dict[int, dict[str, float]]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, level, *params = line.split()
        entry = {}
        for item in params:
            name, value = item.split("=")
            entry[name] = float(value)
        table.setdefault(CorruptionKind(kind), {})[int(level)] = entry
    out = {}
    for kind, levels in table.items():
        if sorted(levels) != list(range(6)):
            raise ValueError(f"{kind.value}: levels 0..5 required, got {sorted(levels)}")
        out[kind] = [levels[i] for i in range(6)]
    return out


@lru_cache(maxsize=1)
def severity_table() -> dict[CorruptionKind, list[dict[str, float]]]:
    text = resources.files("ttalab").joinpath("corruption_table.txt").read_text()
    return parse_table(text)


def params_at(kind: CorruptionKind, severity: float) -> dict[str, float]:
    """Table parameters at a (possibly fractional) severity in [0, 5]."""
    levels = severity_table()[CorruptionKind(kind)]
    lo = min(int(math.floor(severity)), 4)
    frac = severity - lo
    out = {}
    for name, a in levels[lo].items():
        v = a + frac * (levels[lo + 1][name] - a)
        out[name] = int(round(v)) if name in _INT_PARAMS else v
    return out


# ---------------------------------------------------------------- kernels


def _disk_kernel(radius: float, supersample: int = 8) -> np.ndarray:
    r = int(math.ceil(radius))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    grid = np.arange(-r, r + 1)
    sub = (grid[:, None] + offs[None, :]).ravel()
    inside = (sub[:, None] ** 2 + sub[None, :] ** 2) <= radius**2
    k = inside.reshape(2 * r + 1, supersample, 2 * r + 1, supersample).mean(axis=(1, 3))
    return k / k.sum()


def _line_average(img: np.ndarray, length: float, angle: float) -> np.ndarray:
    n = max(int(math.ceil(length)) * 2 + 1, 3)
    ts = np.linspace(-length / 2, length / 2, n)
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros_like(img)
    for t in ts:
        coords = [yy + t * math.sin(angle), xx + t * math.cos(angle)]
        acc += ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return acc / n


def _gaussian_noise(img, p, rng):
    return img + p["std"] * rng.standard_normal(img.shape)


def _shot_noise(img, p, rng):
    lam = p["inv_photons"]
    if lam <= 0:
        return img.copy()
    return rng.poisson(np.clip(img, 0, 1) / lam) * lam


def _impulse_noise(img, p, rng):
    u = rng.random(img.shape)
    out = img.copy()
    out[u < p["amount"] / 2] = 0.0
    out[u > 1 - p["amount"] / 2] = 1.0
    return out


def _defocus_blur(img, p, rng):
    if p["radius"] <= 0:
        return img.copy()
    return ndimage.convolve(img, _disk_kernel(p["radius"]), mode="reflect")


def _glass_blur(img, p, rng):
    if p["sigma"] <= 0:
        return img.copy()
    out = ndimage.gaussian_filter(img, p["sigma"], mode="reflect")
    h, w = img.shape
    d = p["delta"]
    if d > 0 and p["iterations"] > 0:
        pos = [(y, x) for y in range(h - d - 1, d - 1, -1) for x in range(w - d - 1, d - 1, -1)]
        offsets = rng.integers(-d, d + 1, size=(p["iterations"], len(pos), 2)).tolist()
        flat = out.ravel().tolist()  # swaps on a list are far cheaper than on an ndarray
        for it in offsets:
            for (y, x), (dy, dx) in zip(pos, it):
                a, b = y * w + x, (y + dy) * w + (x + dx)
                flat[a], flat[b] = flat[b], flat[a]
        out = np.array(flat).reshape(h, w)
    return ndimage.gaussian_filter(out, p["sigma"], mode="reflect")


def _zoom_blur(img, p, rng):
    zmax = p["max_zoom"]
    if zmax <= 1.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    zooms = np.linspace(1.0, zmax, 6)
    acc = np.zeros_like(img)
    for z in zooms:
        coords = [cy + (yy - cy) / z, cx + (xx - cx) / z]
        acc += ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return acc / len(zooms)


def _motion_blur(img, p, rng):
    if p["length"] <= 0:
        return img.copy()
    return _line_average(img, p["length"], rng.uniform(0, math.pi))


def _snow(img, p, rng):
    flakes = (rng.random(img.shape) < p["density"]).astype(np.float64)
    if p["length"] > 0:
        flakes = _line_average(flakes, p["length"], rng.uniform(math.pi / 4, 3 * math.pi / 4))
        flakes = flakes / max(flakes.max(), 1e-12)
    return img + p["intensity"] * flakes


def _frost(img, p, rng):
    field = ndimage.gaussian_filter(rng.random(img.shape), p["smooth"], mode="wrap")
    field = (field - field.min()) / max(np.ptp(field), 1e-12)
    crystals = field**2 + 0.5 * (rng.random(img.shape) < 0.08)
    return (1 - 0.5 * p["weight"]) * img + p["weight"] * crystals


def _fog(img, p, rng):
    field = ndimage.gaussian_filter(rng.standard_normal(img.shape), p["smooth"], mode="wrap")
    field = field / max(np.abs(field).max(), 1e-12)
    gray = 0.55 + 0.25 * field
    return (1 - p["blend"]) * img + p["blend"] * gray


def _brightness(img, p, rng):
    return img + p["offset"]


def _contrast(img, p, rng):
    m = img.mean()
    return (img - m) * p["factor"] + m


def _elastic(img, p, rng):
    if p["alpha"] <= 0:
        return img.copy()
    h, w = img.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, img.shape), p["sigma"], mode="reflect")
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, img.shape), p["sigma"], mode="reflect")
    # unit-RMS field so alpha is the typical displacement in pixels
    scale = p["alpha"] / max(math.sqrt(float((dy**2 + dx**2).mean())), 1e-12)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + scale * dy, xx + scale * dx], order=1, mode="reflect")


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Average over ``block``-sized tiles (ragged at the border) and upsample."""
    if block <= 1:
        return img.copy()
    h, w = img.shape
    rows = np.arange(0, h, block)
    cols = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(img, rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    means = sums / counts
    return np.repeat(np.repeat(means, np.diff(np.append(rows, h)), axis=0), np.diff(np.append(cols, w)), axis=1)


def _pixelate(img, p, rng):
    return pixelate(img, p["block"])


def _jpeg_like(img, p, rng, block: int = 8):
    step = p["step"]
    if step <= 0:
        return img.copy()
    h, w = img.shape
    u, v = np.meshgrid(np.arange(block), np.arange(block), indexing="ij")
    q = step * (1.0 + u + v) / 2.0  # coarser steps for higher frequencies
    out = np.empty_like(img)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = img[y:y + block, x:x + block]
            th, tw = tile.shape
            coef = dctn(tile - 0.5, norm="ortho")
            qq = q[:th, :tw]
            out[y:y + th, x:x + tw] = idctn(np.round(coef / qq) * qq, norm="ortho") + 0.5
    return out


_OPS = {
    K.GAUSSIAN_NOISE: _gaussian_noise, K.SHOT_NOISE: _shot_noise, K.IMPULSE_NOISE: _impulse_noise,
    K.DEFOCUS_BLUR: _defocus_blur, K.GLASS_BLUR: _glass_blur, K.ZOOM_BLUR: _zoom_blur,
    K.MOTION_BLUR: _motion_blur, K.SNOW: _snow, K.FROST: _frost, K.FOG: _fog,
    K.BRIGHTNESS: _brightness, K.CONTRAST: _contrast, K.ELASTIC_TRANSFORM: _elastic,
    K.PIXELATE: _pixelate, K.JPEG_LIKE: _jpeg_like,
}


def corrupt(x: np.ndarray, kind: CorruptionKind | str, severity: float, seed) -> np.ndarray:
    """Corrupt one square grayscale sample (2-D, or flattened) at ``severity`` in (0, 5].

    ``seed`` is anything ``numpy.random.default_rng`` accepts; equal
    arguments give bit-identical output. The result is clipped to [0, 1] and
    keeps the input's shape.
    """
    try:
        kind = CorruptionKind(kind)
    except ValueError:
        raise ValueError(f"unknown corruption kind {kind!r}") from None
    if not (0 < severity <= 5):
        raise ValueError(f"severity must be in (0, 5], got {severity}")
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    if x.ndim == 1:
        side = math.isqrt(x.size)
        if side * side != x.size:
            raise ValueError("flattened input must be a square image")
        x = x.reshape(side, side)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("input values must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = _OPS[kind](x, params_at(kind, severity), rng)
    return np.clip(out, 0.0, 1.0).reshape(shape)


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class SeveritySchedule:
    """Static severity, or ``s * |sin(omega * t + phase)|`` when dynamic.

    With ``literal_sign=True`` the dynamic form is ``s * |sign(t)|``.
    """
    severity: float = 5.0
    dynamic: bool = False
    omega: float = 2 * math.pi / 32
    phase: float = 0.0
    literal_sign: bool = False

    def __post_init__(self):
        if not (0 < self.severity <= 5):
            raise ValueError("severity must be in (0, 5]")


def severity_at(schedule: SeveritySchedule, t: int) -> float:
    if t < 0:
        raise ValueError("frame index must be non-negative")
    s = schedule.severity
    if not schedule.dynamic:
        return s
    if schedule.literal_sign:
        return s * abs(float(np.sign(t)))
    return s * abs(math.sin(schedule.omega * t + schedule.phase))
