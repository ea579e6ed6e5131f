"""CSV results (the source of truth) and the tables/plots derived from them.

CSV header, one row per run::

    scenario,gamma,batch_size,corruption,method,mem_init,seed,n_samples,errors,error_rate,status,message

``gamma`` is empty outside the non-iid scenario; ``error_rate`` is written
with ``repr`` so it parses back to the identical float.
"""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..corruption import GROUPS, CorruptionKind
from .runner import RunReport, cell_sort_key

CSV_FIELDS = ["scenario", "gamma", "batch_size", "corruption", "method", "mem_init", "seed",
              "n_samples", "errors", "error_rate", "status", "message"]


class MixedAxesError(ValueError):
    """Reports disagree on an axis that a single table or plot must hold fixed."""


def to_csv(reports: list[RunReport]) -> str:
    if not reports:
        raise ValueError("no reports")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sorted(reports, key=lambda r: r.key):
        w.writerow([r.scenario, "" if r.gamma is None else repr(float(r.gamma)), r.batch_size, r.corruption,
                    r.method, r.mem_init, r.seed, r.n_samples, r.errors, repr(r.error_rate), r.status, r.message])
    return buf.getvalue()


def write_csv(reports: list[RunReport], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(to_csv(reports))
    return path


def parse_csv(text: str) -> list[RunReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        if list(row.keys()) != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {list(row.keys())}")
        out.append(RunReport(row["scenario"], float(row["gamma"]) if row["gamma"] else None, int(row["batch_size"]),
                             row["corruption"], row["method"], row["mem_init"], int(row["seed"]),
                             int(row["n_samples"]), int(row["errors"]), row["status"], row["message"]))
    return out


def read_csv(path: str | Path) -> list[RunReport]:
    return parse_csv(Path(path).read_text())


# ---------------------------------------------------------------- aggregation


def seed_stats(reports: list[RunReport]) -> dict[tuple, tuple[float, float, int]]:
    """(scenario, gamma, batch, corruption, method, mem_init) -> (mean, std, n) of error rate over seeds.

    Failed runs are skipped. ``std`` is the population std (0 for one seed).
    """
    groups = defaultdict(list)
    for r in reports:
        if r.status == "ok":
            groups[(r.scenario, r.gamma, r.batch_size, r.corruption, r.method, r.mem_init)].append(r.error_rate)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


def select(reports: list[RunReport], **axes) -> list[RunReport]:
    """Reports whose attributes equal every given axis value (enum values or plain strings)."""
    def norm(v):
        return getattr(v, "value", v)
    return [r for r in reports if all(getattr(r, k) == norm(v) for k, v in axes.items())]


def mean_error(reports: list[RunReport], **axes) -> float:
    """Seed-mean error rate averaged over the corruptions present, for the selected cells."""
    stats = seed_stats(select(reports, **axes))
    if not stats:
        raise KeyError(f"no successful runs for {axes}")
    return float(np.mean([m for m, _, _ in stats.values()]))


# ---------------------------------------------------------------- markdown table

_GROUP_ORDER = list(GROUPS)


def _ordered_kinds(present: set[str]) -> list[tuple[str, list[str]]]:
    out = []
    for g in _GROUP_ORDER:
        kinds = [k.value for k in GROUPS[g] if k.value in present]
        if kinds:
            out.append((g, kinds))
    rest = sorted(present - {k.value for k in CorruptionKind})
    if rest:
        out.append(("Other", rest))
    return out


def _fixed_axis(reports, name):
    values = {getattr(r, name) for r in reports}
    if len(values) != 1:
        raise MixedAxesError(f"a single table needs one {name}, got {sorted(map(str, values))}")
    return values.pop()


def table_values(reports: list[RunReport]) -> tuple[list[str], list[tuple[str, str]], dict]:
    """Corruption columns, (method, mem_init) rows and {(row, column): (mean %, std %)} cells."""
    if not reports:
        raise ValueError("no reports")
    for axis in ("scenario", "gamma", "batch_size"):
        _fixed_axis(reports, axis)
    stats = seed_stats(reports)
    columns = [k for _, kinds in _ordered_kinds({r.corruption for r in reports}) for k in kinds]
    rows = sorted({(k[4], k[5]) for k in stats},
                  key=lambda mr: cell_sort_key("frame_iid", None, 0, "", mr[0], mr[1], 0))
    cells = {}
    for (sc, g, b, kind, m, mi), (mean, std, _) in stats.items():
        cells[((m, mi), kind)] = (100.0 * mean, 100.0 * std)
    for row in rows:
        vals = [cells[(row, c)][0] for c in columns if (row, c) in cells]
        if len(vals) == len(columns):
            cells[(row, "Avg.")] = (float(np.mean(vals)), float("nan"))
    return columns, rows, cells


def _fmt(mean: float, std: float) -> str:
    if math.isnan(std):
        return repr(mean)
    return f"{mean!r} ± {std!r}"


def md_table(reports: list[RunReport]) -> str:
    """Error rates in percent, mean ± std over seeds, columns grouped Noise | Blur | Weather | Digital."""
    columns, rows, cells = table_values(reports)
    sc, g, b = reports[0].scenario, reports[0].gamma, reports[0].batch_size
    groups = _ordered_kinds(set(columns))
    head_groups = ["", ""] + [name for name, kinds in groups for _ in kinds] + [""]
    head = ["Method", "Memory init"] + [CorruptionKind(c).short if c in CorruptionKind._value2member_map_ else c
                                         for c in columns] + ["Avg."]
    lines = [f"Scenario: {sc}" + (f", gamma = {g!r}" if g is not None else "") + f", batch size {b}", "",
             "| " + " | ".join(head_groups) + " |",
             "|" + "---|" * len(head),
             "| " + " | ".join(head) + " |"]
    for row in rows:
        vals = [_fmt(*cells[(row, c)]) if (row, c) in cells else "n/a" for c in columns]
        avg = _fmt(*cells[(row, "Avg.")]) if (row, "Avg.") in cells else "n/a"
        lines.append("| " + " | ".join([row[0], row[1]] + vals + [avg]) + " |")
    return "\n".join(lines) + "\n"


_NUM = r"(?:nan|[-+]?(?:\d+\.?\d*(?:e[-+]?\d+)?|\.\d+(?:e[-+]?\d+)?))"
_CELL = re.compile(rf"^(?P<mean>{_NUM})(?: ± (?P<std>{_NUM}))?$")


def parse_md_table(text: str) -> dict[tuple[tuple[str, str], str], tuple[float, float]]:
    """Inverse of :func:`md_table`: {((method, mem_init), column): (mean %, std %)}."""
    table = [l for l in text.splitlines() if l.startswith("|")]
    if len(table) < 3:
        raise ValueError("no table found")
    short_to_kind = {k.short: k.value for k in CorruptionKind}
    head = [c.strip() for c in table[2].strip("|").split("|")]
    columns = [short_to_kind.get(c, c) for c in head[2:]]
    out = {}
    for line in table[3:]:
        parts = [c.strip() for c in line.strip("|").split("|")]
        row = (parts[0], parts[1])
        for col, cell in zip(columns, parts[2:]):
            m = _CELL.match(cell)
            if m is None:
                continue
            out[(row, col)] = (float(m.group("mean")), float(m.group("std")) if m.group("std") else float("nan"))
    return out


# ---------------------------------------------------------------- svg lines

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#7f7f7f",
            "#bcbd22", "#393b79", "#637939", "#843c39"]


def series_points(reports: list[RunReport], x_axis: str) -> dict[tuple[str, str], list[tuple[float, float]]]:
    """{(method, mem_init): [(x, mean error %)]} sorted by x; corruptions and seeds averaged."""
    if x_axis not in ("gamma", "batch_size"):
        raise ValueError("x_axis must be 'gamma' or 'batch_size'")
    if not reports:
        raise ValueError("no reports")
    other = {"gamma": "batch_size", "batch_size": "gamma"}[x_axis]
    scenarios = {r.scenario for r in reports}
    if x_axis == "gamma":
        _fixed_axis(reports, "batch_size")
        if scenarios != {"tracklet_noniid"}:
            raise MixedAxesError("a gamma plot needs only non-iid runs")
    else:
        _fixed_axis(reports, "scenario")
        _fixed_axis(reports, other)
    acc = defaultdict(lambda: defaultdict(list))
    for (sc, g, b, kind, m, mi), (mean, _, _) in seed_stats(reports).items():
        acc[(m, mi)][g if x_axis == "gamma" else b].append(100.0 * mean)
    series = {}
    for key in sorted(acc, key=lambda mr: cell_sort_key("frame_iid", None, 0, "", mr[0], mr[1], 0)):
        series[key] = sorted((float(x), float(np.mean(v))) for x, v in acc[key].items())
    return series


def svg_lines(reports: list[RunReport], x_axis: str = "gamma", width: int = 640, height: int = 400) -> str:
    """Error rate against gamma (log-x) or batch size, one polyline per (method, mem_init)."""
    series = series_points(reports, x_axis)
    xs = sorted({x for pts in series.values() for x, _ in pts})
    ys = [y for pts in series.values() for _, y in pts]
    tx = (lambda v: math.log10(v)) if x_axis == "gamma" else (lambda v: float(v))
    x_lo, x_hi = tx(xs[0]), tx(xs[-1])
    y_lo, y_hi = min(0.0, min(ys)), max(100.0, max(ys))
    left, right, top, bottom = 60, width - 190, 20, height - 50
    span_x = (x_hi - x_lo) or 1.0

    def px(v):
        return left + (tx(v) - x_lo) / span_x * (right - left)

    def py(v):
        return bottom - (v - y_lo) / (y_hi - y_lo) * (bottom - top)

    label = "gamma (log scale)" if x_axis == "gamma" else "batch size"
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
           f'<text x="{(left + right) / 2:.1f}" y="{height - 12}" text-anchor="middle">{label}</text>',
           f'<text x="14" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {(top + bottom) / 2:.1f})">error rate (%)</text>']
    for x in xs:
        out.append(f'<text x="{px(x):.2f}" y="{bottom + 16}" text-anchor="middle">{x:g}</text>')
    for y in np.linspace(y_lo, y_hi, 6):
        out.append(f'<text x="{left - 6}" y="{py(y) + 4:.2f}" text-anchor="end">{y:.0f}</text>')
    for i, ((m, mi), pts) in enumerate(series.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        name = f"{m}/{mi}"
        out.append(f'<polyline data-series="{name}" fill="none" stroke="{colour}" stroke-width="1.5" '
                   f'points="{coords}"/>')
        out.append(f'<text x="{right + 10}" y="{top + 14 * (i + 1)}" fill="{colour}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(reports: list[RunReport], fmt: str, path: str | Path, x_axis: str = "gamma") -> Path:
    path = Path(path)
    if fmt == "csv":
        return write_csv(reports, path)
    if fmt == "md-table":
        path.write_text(md_table(reports))
    elif fmt == "svg-lines":
        path.write_text(svg_lines(reports, x_axis))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path
