#!/usr/bin/env python3
"""Full synthetic experiment: cohort -> embeddings -> grid -> comparison.

Produces the Table-1/Table-2-shaped summary on a phantom cohort, then the
paired J1-vs-J0 signed-rank comparison, all through the CLI surface.

Usage: python scripts/run_synth_grid.py [OUT_DIR] [--seed N] [--n N]
"""

import argparse
import sys
from pathlib import Path

from strokeprog.cli import main as cli


def run(args: list[str]) -> None:
    rc = cli(args)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", nargs="?", default="runs/synth_grid")
    parser.add_argument("--seed", type=int, default=115)
    parser.add_argument("--n", type=int, default=74)
    args = parser.parse_args()

    out = Path(args.out_dir)
    cohort = out / "cohort"
    reports = out / "reports"
    weights = str(cohort / "weights_tiny.adct")

    run([
        "synth", "--output-dir", str(cohort), "--n", str(args.n),
        "--seed", str(args.seed), "--weights-out", weights, "--net", "tiny",
    ])
    data = [
        "--volumes-dir", str(cohort / "volumes"),
        "--clinical-csv", str(cohort / "clinical.csv"),
        "--weights", weights,
        "--net", "tiny",
        "--target-shape", "24,64,64",
        "--projection-dim", "32",
        "--cache-dir", str(out / "cache"),
    ]
    run(["evaluate", *data, "--grid", "1", "--output-dir", str(reports)])
    run([
        "compare",
        "--report-a", str(reports / "report_j1_multimodal.json"),
        "--report-b", str(reports / "report_j0_multimodal.json"),
        "--output-dir", str(reports),
    ])
    run(["report", "--output-dir", str(reports), *sorted(str(p) for p in reports.glob("report_*.json"))])
    print(f"\nall outputs under {out}/", file=sys.stderr)


if __name__ == "__main__":
    main()
