"""Tables and plots from a sweep CSV.

    python scripts/make_reports.py out/default/results.csv --out out/default/reports

Writes one markdown table per (scenario, gamma, batch size) block, the error
vs gamma plot for non-iid streams at B = 64, error vs batch size plots, and
summary.md with the corruption-averaged seed-mean error of every cell group.
"""

import argparse
from pathlib import Path

from ttalab.harness.report import md_table, mean_error, read_csv, select, svg_lines


def _name(scenario, gamma, batch_size):
    return f"{scenario}" + (f"_g{gamma:g}" if gamma is not None else "") + f"_b{batch_size}"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    args = p.parse_args()
    reports = [r for r in read_csv(args.csv) if r.status == "ok"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    blocks = sorted({(r.scenario, r.gamma, r.batch_size) for r in reports}, key=lambda k: (k[0], k[1] or 0, k[2]))
    summary = ["| scenario | gamma | B | method | mem init | error % |", "|---|---|---|---|---|---|"]
    for sc, g, b in blocks:
        group = select(reports, scenario=sc, gamma=g, batch_size=b)
        (out / f"table_{_name(sc, g, b)}.md").write_text(md_table(group))
        for m, mi in sorted({(r.method, r.mem_init) for r in group}):
            err = mean_error(group, method=m, mem_init=mi)
            summary.append(f"| {sc} | {'' if g is None else f'{g:g}'} | {b} | {m} | {mi} | {100 * err:.1f} |")
    (out / "summary.md").write_text("\n".join(summary) + "\n")

    noniid64 = select(reports, scenario="tracklet_noniid", batch_size=64)
    if len({r.gamma for r in noniid64}) > 1:
        (out / "error_vs_gamma.svg").write_text(svg_lines(noniid64, "gamma"))
    for sc, g in sorted({(r.scenario, r.gamma) for r in reports}, key=lambda k: (k[0], k[1] or 0)):
        group = select(reports, scenario=sc, gamma=g)
        if len({r.batch_size for r in group}) > 1:
            (out / f"error_vs_batch_{_name(sc, g, 'all')}.svg").write_text(svg_lines(group, "batch_size"))
    print(f"wrote {len(list(out.iterdir()))} files to {out}")


if __name__ == "__main__":
    main()
