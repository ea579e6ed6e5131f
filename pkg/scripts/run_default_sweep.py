"""Run the default sweep and derive its reports.

    python scripts/run_default_sweep.py --out out/default --parallelism 4

The CSV lands in <out>/results.csv and the tables and plots in <out>/reports.
"""

import argparse
import subprocess
import sys
import time
from pathlib import Path

from ttalab.cli import main as ttalab


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/default")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--config", default=None, help="sweep config (the packaged default grid if omitted)")
    args = p.parse_args()
    argv = ["-v", "sweep", "--out", args.out, "--parallelism", str(args.parallelism)]
    if args.config:
        argv += ["--config", args.config]
    start = time.perf_counter()
    code = ttalab(argv)
    print(f"sweep finished in {(time.perf_counter() - start) / 60:.1f} min (exit {code})")
    if code == 0:
        script = Path(__file__).with_name("make_reports.py")
        subprocess.run([sys.executable, str(script), str(Path(args.out) / "results.csv"),
                        "--out", str(Path(args.out) / "reports")], check=True)
    sys.exit(code)


if __name__ == "__main__":
    main()
