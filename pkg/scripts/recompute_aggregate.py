"""Recompute an experiment2 aggregate.csv from the per-run logs and compare.

Reads runs/T*_slot*_seed*/{metrics,eval}.csv (plus checkpoint.json for runs
that logged no epochs), rebuilds every aggregate column with the statistics
module, and reports the largest absolute difference from aggregate.csv.

    python3 scripts/recompute_aggregate.py OUT_DIR [--tol 1e-12]
"""

import argparse
import csv
import json
import math
import re
import statistics
import sys
from pathlib import Path

RUN_DIR = re.compile(r"T(\d+)_slot(\d+)_seed(\d+)$")


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_record(run_dir):
    T = int(RUN_DIR.match(run_dir.name).group(1))
    metrics = read_rows(run_dir / "metrics.csv")
    evals = read_rows(run_dir / "eval.csv")
    if not metrics:
        ckpt = json.loads((run_dir / "checkpoint.json").read_text())
        sa = max(max(row) for row in ckpt["a_diag"])
        return {"T": T, "diverged": False, "train_acc": math.nan, "test_acc": math.nan, "final_sa": sa}
    last, last_eval = metrics[-1], evals[-1]
    return {
        "T": T,
        "diverged": last["diverged"] == "1",
        "train_acc": float(last_eval["train_accuracy"]),
        "test_acc": float(last_eval["test_accuracy"]),
        "final_sa": float(last["s_a"]),
    }


def mean_std(values):
    if not values:
        return math.nan, math.nan
    return statistics.fmean(values), statistics.pstdev(values)


def recompute(out_dir):
    records = [run_record(p) for p in sorted((Path(out_dir) / "runs").iterdir()) if RUN_DIR.match(p.name)]
    table = {}
    for T in sorted({r["T"] for r in records}):
        runs = [r for r in records if r["T"] == T]
        ok = [r for r in runs if not r["diverged"]]
        row = {}
        for key, vals in (
            ("train_acc", [r["train_acc"] for r in ok]),
            ("test_acc", [r["test_acc"] for r in ok]),
            ("gap", [r["train_acc"] - r["test_acc"] for r in ok]),
        ):
            row[key + "_mean"], row[key + "_std"] = mean_std(vals)
        row["final_sa_mean"] = mean_std([r["final_sa"] for r in ok])[0]
        row["diverged_count"] = sum(r["diverged"] for r in runs)
        table[T] = row
    return table


def max_difference(out_dir):
    """Largest absolute difference between aggregate.csv and the recomputed table."""
    table = recompute(out_dir)
    written = read_rows(Path(out_dir) / "aggregate.csv")
    if sorted(int(r["T"]) for r in written) != sorted(table):
        raise ValueError("aggregate.csv and the run directories cover different lengths")
    worst = 0.0
    for row in written:
        ref = table[int(row["T"])]
        for key, value in ref.items():
            got = float(row[key])
            if math.isnan(value) and math.isnan(got):
                continue
            worst = max(worst, abs(got - value))
    return worst


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--tol", type=float, default=1e-12)
    args = parser.parse_args(argv)
    worst = max_difference(args.out_dir)
    print(f"max |difference| = {worst:.3e}")
    return 0 if worst <= args.tol else 1


if __name__ == "__main__":
    sys.exit(main())
