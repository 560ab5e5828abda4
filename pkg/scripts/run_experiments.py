"""Run the desk-scale experiments through the CLI and summarize them.

    python3 scripts/run_experiments.py OUT_ROOT [--workers N] [--sweep]

Writes OUT_ROOT/{majority_T50,experiment1,experiment2}/ (and sweep/ with
--sweep), then prints the headline numbers. On one core the three experiments
take about two and a half minutes; the sweep adds several more.
"""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from recompute_aggregate import max_difference
from selssm.cli import main as selssm

SEEDS = [0, 1, 2, 3, 4]
PLANS = {
    "majority_T50": ("train", {"task": "majority", "lengths": [50], "seeds": [0]}),
    "experiment1": ("experiment1", {"task": "majority", "lengths": [100, 2000], "seeds": SEEDS}),
    "experiment2": ("experiment2", {"task": "majority", "lengths": [50, 100, 200], "seeds": SEEDS}),
}
SWEEP = ("sweep-sa", {"task": "majority", "seeds": [0]})


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run(root, name, command, doc, workers):
    out = root / name
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "input.json"
    cfg.write_text(json.dumps({**doc, "workers": workers}))
    start = time.perf_counter()
    rc = selssm([command, "--config", str(cfg), "--out", str(out)])
    if rc:
        raise SystemExit(f"{command} failed with exit code {rc}")
    print(f"[{name}] {time.perf_counter() - start:.0f} s")
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_root")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--sweep", action="store_true", help="also sweep the initial spectral abscissa")
    args = parser.parse_args(argv)
    root = Path(args.out_root)
    plans = dict(PLANS)
    if args.sweep:
        plans["sweep"] = SWEEP
    outs = {name: run(root, name, cmd, doc, args.workers) for name, (cmd, doc) in plans.items()}

    last = rows(outs["majority_T50"] / "eval.csv")[-1]
    print(f"majority T=50: test accuracy {float(last['test_accuracy']):.3f} after {last['epoch']} epochs")
    for r in rows(outs["experiment1"] / "summary.csv"):
        print(
            f"experiment1 T={r['T']} seed={r['seed']}: succeeded={r['succeeded']} diverged={r['diverged']} "
            f"final s_a={float(r['final_s_a']):+.4f} train loss={float(r['final_train_loss']):.4g}"
        )
    for r in rows(outs["experiment2"] / "aggregate.csv"):
        print(
            f"experiment2 T={r['T']}: train {float(r['train_acc_mean']):.4f} test {float(r['test_acc_mean']):.4f} "
            f"gap {float(r['gap_mean']):.4f} +- {float(r['gap_std']):.4f} diverged={r['diverged_count']}"
        )
    print(f"experiment2 aggregate vs per-run logs: max |difference| {max_difference(outs['experiment2']):.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
