"""Command line: gen-data, train, run, sweep, report.

Settings resolve as flag > config file > ``TTALAB_SEED`` (seed only) > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .adapters import MemInit, Method
from .corruption import CorruptionKind
from .harness.config import ConfigError, load_config, parse_config
from .harness.report import MixedAxesError, md_table, read_csv, select, svg_lines, write_csv
from .harness.runner import AdapterSpec, GridSpec, run_grid, run_one
from .harness.training import evaluate, train_source_model
from .nn import load_model, save_model
from .streamgen import DatasetConfig, Scenario, ScenarioConfig, load_dataset, make_dataset, save_dataset

log = logging.getLogger("ttalab")

SEED_ENV = "TTALAB_SEED"

# flag name -> config key
_GRID_FLAGS = {"scenario": "scenarios", "gamma": "gammas", "batch_size": "batch_sizes", "corruption": "corruptions",
               "method": "methods", "mem_init": "mem_inits"}


def default_config_text() -> str:
    return resources.files("ttalab").joinpath("default_sweep.cfg").read_text()


def _sections(args) -> list[tuple[str, dict[str, str]]]:
    if args.config:
        return load_config(args.config)
    if args.command == "sweep":
        return parse_config(default_config_text())
    return [("default", {})]


def _apply_flags(mapping: dict[str, str], args) -> dict[str, str]:
    """Command-line values replace config values."""
    out = dict(mapping)
    for flag, key in _GRID_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "dynamic_severity", False):
        out["dynamic_severity"] = "true"
    return out


def resolve_seed(args, mapping: dict[str, str]) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in mapping:
        return int(mapping["seed"])
    if os.environ.get(SEED_ENV):
        return int(os.environ[SEED_ENV])
    return 0


def _dataset_and_model(mapping: dict[str, str]):
    if "data" in mapping:
        ds = load_dataset(mapping["data"])
    else:
        ds = make_dataset(DatasetConfig(seed=int(mapping.get("dataset_seed", 0))))
    if "model" in mapping:
        model = load_model(mapping["model"])
    else:
        model = train_source_model(ds, rng=np.random.default_rng(int(mapping.get("model_seed", 0))))
    return ds, model


def cmd_gen_data(args) -> int:
    mapping = _sections(args)[0][1]
    seed = resolve_seed(args, mapping)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(DatasetConfig(seed=seed))
    manifest, arrays = save_dataset(ds, out / "toy")
    print(f"wrote {manifest} and {arrays} ({len(ds.tracklets)} tracklets)")
    return 0


def cmd_train(args) -> int:
    mapping = _sections(args)[0][1]
    seed = resolve_seed(args, mapping)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = args.data or mapping.get("data")
    ds = load_dataset(data) if data else make_dataset(DatasetConfig(seed=int(mapping.get("dataset_seed", 0))))
    model = train_source_model(ds, rng=np.random.default_rng(seed))
    path = out / "source_model.npz"
    save_model(model, path)
    print(f"wrote {path}; clean test error {evaluate(model, *ds.arrays('test')):.4f}")
    return 0


RUN_DEFAULTS = {"scenarios": "tracklet_iid", "gammas": "0.1", "batch_sizes": "64", "corruptions": "gaussian_noise",
                "methods": "source", "mem_inits": "empty"}


def cmd_run(args) -> int:
    mapping = _apply_flags(RUN_DEFAULTS | _sections(args)[0][1], args)
    seed = resolve_seed(args, mapping)
    cells = GridSpec.from_mapping(mapping | {"seeds": str(seed)}).cells()
    if len(cells) != 1:
        raise ConfigError(f"run executes one cell, the settings describe {len(cells)}; pass single axis values")
    cell = cells[0]
    grid = GridSpec.from_mapping(mapping | {"seeds": str(seed)})
    ds, model = _dataset_and_model(mapping)
    cfg = ScenarioConfig(cell.scenario, cell.gamma, cell.corruption, grid.schedule(), cell.batch_size, cell.seed)
    report = run_one(model, ds, AdapterSpec(cell.method, grid.hyper(cell.mem_init, cell.seed)), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv([report], out / "run.csv")
    print(f"{report.scenario} {report.corruption} {report.method}/{report.mem_init} B={report.batch_size} "
          f"seed={report.seed}: error {report.error_rate:.4f} over {report.n_samples} samples")
    return 0


def cmd_sweep(args) -> int:
    sections = _sections(args)
    grids = []
    for _, mapping in sections:
        mapping = _apply_flags(mapping, args)
        if args.seed is not None:
            mapping["seeds"] = str(args.seed)
        grids.append(GridSpec.from_mapping(mapping))
    shared = _apply_flags(sections[0][1], args)
    parallelism = args.parallelism or int(shared.get("parallelism", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    ds, model = _dataset_and_model(shared)

    def progress(i, n):
        log.info("unit %d/%d done (%.0f s)", i, n, time.perf_counter() - start)

    reports = run_grid(grids, parallelism, model=model, dataset=ds, progress=progress)
    csv_path = write_csv(reports, out / "results.csv")
    failed = sum(r.status != "ok" for r in reports)
    print(f"wrote {csv_path}: {len(reports)} runs, {failed} failed, {time.perf_counter() - start:.1f} s")
    return 0 if failed == 0 else 1


def _groups(reports, axes):
    keys = sorted({tuple(getattr(r, a) for a in axes) for r in reports}, key=str)
    return [(k, [r for r in reports if tuple(getattr(r, a) for a in axes) == k]) for k in keys]


def cmd_report(args) -> int:
    reports = read_csv(args.csv)
    filters = {flag: getattr(args, flag) for flag in ("scenario", "gamma", "batch_size", "method", "mem_init")
               if getattr(args, flag) is not None}
    reports = select(reports, **filters)
    if not reports:
        print("no rows match the filters", file=sys.stderr)
        return 2
    out = Path(args.out)
    if args.format == "csv":
        write_csv(reports, out)
    elif args.format == "md-table":
        parts = [md_table(group) for _, group in _groups(reports, ("scenario", "gamma", "batch_size"))]
        out.write_text("\n".join(parts))
    else:
        out.write_text(svg_lines(reports, args.x_axis))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttalab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--seed", type=int, default=None, help=f"overrides config and ${SEED_ENV}")
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--out", default=out_default, help="output directory")
        return sp

    def axes(sp):
        sp.add_argument("--scenario", choices=[s.value for s in Scenario])
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--corruption", choices=[k.value for k in CorruptionKind])
        sp.add_argument("--method", choices=[m.value for m in Method])
        sp.add_argument("--mem-init", choices=[m.value for m in MemInit])
        sp.add_argument("--dynamic-severity", action="store_true")

    common(sub.add_parser("gen-data", help="write the toy dataset manifest and arrays"))
    tr = common(sub.add_parser("train", help="train the source model checkpoint"))
    tr.add_argument("--data", default=None, help="dataset stem written by gen-data")
    axes(common(sub.add_parser("run", help="run a single cell")))
    sw = common(sub.add_parser("sweep", help="run a grid from a config file (default grid if none)"))
    sw.add_argument("--parallelism", type=int, default=None)
    axes(sw)
    rp = sub.add_parser("report", help="derive a table or plot from results CSV")
    rp.add_argument("csv")
    rp.add_argument("--format", choices=["csv", "md-table", "svg-lines"], default="md-table")
    rp.add_argument("--x-axis", choices=["gamma", "batch_size"], default="gamma")
    rp.add_argument("--out", required=True, help="output file")
    for flag, typ in (("--scenario", str), ("--gamma", float), ("--batch-size", int), ("--method", str),
                      ("--mem-init", str)):
        rp.add_argument(flag, type=typ, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "run": cmd_run, "sweep": cmd_sweep,
                "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, MixedAxesError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
