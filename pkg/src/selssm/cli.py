"""Command-line entry point: data generation, training runs, experiments and bound reports."""

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .artifacts import csv_text, write_csv, write_json
from .bounds import NORM_COLUMNS, BoundAssumptions, audit_norms, bound_report
from .datasets import (
    LISTOPS_VOCAB,
    MAJORITY_VOCAB,
    Vocabulary,
    gen_listops,
    gen_majority,
    load_text_jsonl,
    write_jsonl,
)
from .errors import DataError, ParameterError
from .ssm import load_checkpoint
from .training import TrainConfig, fit, write_metrics

log = logging.getLogger(__name__)

TASKS = ("majority", "listops", "text")

# desk-scale budgets per task; m is the training-set size
TASK_DEFAULTS = {
    "majority": {"d": 4, "N": 4, "m": 1000, "epochs": 40, "batch_size": 64, "flip_frac": 0.1},
    "listops": {"d": 16, "N": 4, "m": 1000, "epochs": 50, "batch_size": 64, "flip_frac": 0.0},
    "text": {"d": 16, "N": 4, "m": None, "epochs": 30, "batch_size": 256, "flip_frac": 0.0},
}
SWEEP_LENGTH = {"majority": 250, "listops": 300, "text": 500}
SWEEP_GRID = tuple(round(-0.1 + 0.02 * i, 10) for i in range(11))
RETRY_STRIDE = 10007

SUMMARY_HEADER = (
    "T", "seed", "epochs_run", "initial_s_a", "final_s_a", "final_train_loss",
    "final_test_accuracy", "sa_decreased", "succeeded", "diverged",
)
RUNS_HEADER = (
    "T", "slot", "seed", "attempt", "diverged", "train_acc", "test_acc", "train_loss", "test_loss", "final_sa",
)
AGGREGATE_HEADER = (
    "T", "train_acc_mean", "train_acc_std", "test_acc_mean", "test_acc_std",
    "gap_mean", "gap_std", "final_sa_mean", "diverged_count",
)
AGGREGATE_LOSS_HEADER = ("T", "train_loss_mean", "train_loss_std", "test_loss_mean", "test_loss_std", "successful")
SWEEP_HEADER = ("s_a_init", "seed", "epoch", "mean_loss", "accuracy", "s_a", "diverged")

# TrainConfig fields fixed by the data or the experiment, not by overrides
_DERIVED_FIELDS = {"T", "K", "V", "seed", "s_a_init"}


@dataclass
class ExperimentConfig:
    task: str = "majority"
    lengths: list = field(default_factory=lambda: [50])
    seeds: list = field(default_factory=lambda: [0])
    s_a_init: float = None  # None: the command's default
    m_train: int = None
    m_test: int = None
    flip_frac: float = None
    data_seed: int = 0
    same_split: bool = False
    max_retries: int = 3
    workers: int = 1
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    train_path: str = None
    test_path: str = None
    vocab_path: str = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ParameterError(f"task must be one of {', '.join(TASKS)}")
        self.lengths = [int(t) for t in self.lengths]
        self.seeds = [int(s) for s in self.seeds]
        if not self.lengths or not self.seeds:
            raise ParameterError("lengths and seeds must be nonempty")
        if min(self.lengths) < 1:
            raise ParameterError("lengths must be >= 1")
        known = {f.name for f in fields(TrainConfig)} - _DERIVED_FIELDS
        bad = sorted(set(self.train) - known)
        if bad:
            raise ParameterError(f"unknown training overrides: {', '.join(bad)}")
        if self.task == "text" and not (self.train_path and self.test_path):
            raise ParameterError("the text task needs train_path and test_path")
        if self.max_retries < 0 or self.workers < 1:
            raise ParameterError("max_retries must be >= 0 and workers >= 1")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(doc) - known)
        if bad:
            raise ParameterError(f"unknown config fields: {', '.join(bad)}")
        return cls(**doc)

    def resolved(self, **command_defaults):
        """Copy with task defaults filled in; ``command_defaults`` fill unset train fields."""
        task = TASK_DEFAULTS[self.task]
        out = ExperimentConfig.from_dict(asdict(self))
        if out.s_a_init is None:
            out.s_a_init = command_defaults.pop("s_a_init", 0.0)
        else:
            command_defaults.pop("s_a_init", None)
        if out.m_train is None:
            out.m_train = task["m"]
        if out.m_test is None:
            out.m_test = out.m_train
        if out.flip_frac is None:
            out.flip_frac = task["flip_frac"]
        train = {k: task[k] for k in ("d", "N", "epochs", "batch_size")}
        train.update(command_defaults)
        train.update(self.train)
        out.train = train
        return out


def _seed(*parts):
    return [int(p) for p in parts]


def make_splits(cfg, T):
    """(train, test) for one sequence length; deterministic in (data_seed, T)."""
    if cfg.task == "majority":
        train = gen_majority(cfg.m_train, T, cfg.flip_frac, seed=_seed(cfg.data_seed, T, 0))
        test = train if cfg.same_split else gen_majority(cfg.m_test, T, 0.0, seed=_seed(cfg.data_seed, T, 1))
    elif cfg.task == "listops":
        train = gen_listops(cfg.m_train, T, seed=_seed(cfg.data_seed, T, 0))
        test = train if cfg.same_split else gen_listops(cfg.m_test, T, seed=_seed(cfg.data_seed, T, 1))
    else:
        vocab = Vocabulary.load(cfg.vocab_path) if cfg.vocab_path else Vocabulary()
        train = load_text_jsonl(cfg.train_path, vocab, T)
        test = train if cfg.same_split else load_text_jsonl(cfg.test_path, vocab, T)
        if cfg.m_train is not None:
            train.examples = train.examples[: cfg.m_train]
        V = max(train.vocab_size, test.vocab_size)
        K = max(train.num_classes, test.num_classes)
        for split in (train, test):
            split.vocab_size, split.num_classes = V, K
    if len(train) == 0:
        raise DataError("training split is empty")
    return train, test


def make_train_config(cfg, split, seed, s_a_init):
    return TrainConfig(
        **cfg.train, T=split.T, K=split.num_classes, V=split.vocab_size, seed=seed, s_a_init=s_a_init
    )


def run_cell(cfg, T, seed, s_a_init, run_dir):
    """Train one (T, seed, s_a_init) cell, write its artifacts and return a summary dict."""
    train, test = make_splits(cfg, T)
    tc = make_train_config(cfg, train, seed, s_a_init)
    result = fit(tc, train, test)
    os.makedirs(run_dir, exist_ok=True)
    write_metrics(result, os.path.join(run_dir, "metrics.csv"), os.path.join(run_dir, "eval.csv"))
    write_json(os.path.join(run_dir, "checkpoint.json"), result.params.to_dict())
    last = result.rows[-1] if result.rows else None
    return {
        "T": T,
        "seed": seed,
        "s_a_init": s_a_init,
        "epochs_run": len(result.rows),
        "initial_s_a": result.initial_norms.s_a,
        "final_s_a": last.s_a if last else result.initial_norms.s_a,
        "final_train_loss": last.train_loss if last else math.nan,
        "train_acc": last.train_accuracy if last else math.nan,
        "test_acc": last.test_accuracy if last else math.nan,
        "test_loss": last.test_loss if last else math.nan,
        "diverged": result.diverged,
        "succeeded": result.succeeded(tc.K),
        "rows": [(r.epoch, r.mean_loss, r.accuracy, r.s_a, r.diverged) for r in result.rows],
    }


def _run_cell_job(job):
    cfg_doc, T, seed, s_a_init, run_dir = job
    return run_cell(ExperimentConfig.from_dict(cfg_doc), T, seed, s_a_init, run_dir)


def _retry_job(job):
    cfg_doc, T, slot, s_a_init, out = job
    cfg = ExperimentConfig.from_dict(cfg_doc)
    attempts = []
    for attempt in range(cfg.max_retries + 1):
        seed = slot + RETRY_STRIDE * attempt
        res = run_cell(cfg, T, seed, s_a_init, os.path.join(out, "runs", f"T{T}_slot{slot}_seed{seed}"))
        res.update(slot=slot, attempt=attempt)
        attempts.append(res)
        if not res["diverged"]:
            break
    return attempts


def _pool_map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _echo_config(out, command, cfg):
    doc = {"command": command, **asdict(cfg)}
    write_json(os.path.join(out, "config.json"), doc)


def cmd_gen_data(task, m, T, seed, out, flip_frac=0.0):
    if task == "majority":
        split, vocab = gen_majority(m, T, flip_frac, seed=seed), MAJORITY_VOCAB
    elif task == "listops":
        split, vocab = gen_listops(m, T, seed=seed), LISTOPS_VOCAB
    else:
        raise ParameterError("gen-data supports the majority and listops tasks")
    os.makedirs(out, exist_ok=True)
    write_jsonl(split, os.path.join(out, "data.jsonl"))
    write_json(os.path.join(out, "vocab.json"), vocab.token_to_id)
    print(f"m={len(split)} T={split.T} classes={split.label_counts()}")
    return split


def cmd_train(cfg, out):
    cfg = cfg.resolved()
    _echo_config(out, "train", cfg)
    res = run_cell(cfg, cfg.lengths[0], cfg.seeds[0], cfg.s_a_init, out)
    print(
        f"T={res['T']} seed={res['seed']} epochs={res['epochs_run']} train_loss={res['final_train_loss']:.4f} "
        f"test_acc={res['test_acc']:.4f} s_a={res['final_s_a']:.4f} diverged={int(res['diverged'])}"
    )
    return res


def cmd_experiment1(cfg, out):
    """Unstable initialization on a balanced 10% subset for a short budget."""
    cfg = cfg.resolved(s_a_init=0.1, epochs=10, subset_frac=0.1)
    _echo_config(out, "experiment1", cfg)
    doc = asdict(cfg)
    jobs = [
        (doc, T, seed, cfg.s_a_init, os.path.join(out, "runs", f"T{T}_seed{seed}"))
        for T in cfg.lengths
        for seed in cfg.seeds
    ]
    results = _pool_map(_run_cell_job, jobs, cfg.workers)
    rows = [
        [
            r["T"], r["seed"], r["epochs_run"], r["initial_s_a"], r["final_s_a"], r["final_train_loss"],
            r["test_acc"], r["final_s_a"] < r["initial_s_a"], r["succeeded"], r["diverged"],
        ]
        for r in results
    ]
    write_csv(os.path.join(out, "summary.csv"), SUMMARY_HEADER, rows)
    for T in cfg.lengths:
        sub = [r for r in results if r["T"] == T]
        print(
            f"T={T} succeeded={sum(r['succeeded'] for r in sub)}/{len(sub)} "
            f"diverged={sum(r['diverged'] for r in sub)}"
        )
    return results


def _stats(values):
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def aggregate_runs(runs, lengths):
    """Per-T aggregate rows from run records; statistics cover non-diverged runs only."""
    agg, agg_loss = [], []
    for T in lengths:
        sub = [r for r in runs if r["T"] == T]
        ok = [r for r in sub if not r["diverged"]]
        tr_m, tr_s = _stats([r["train_acc"] for r in ok])
        te_m, te_s = _stats([r["test_acc"] for r in ok])
        g_m, g_s = _stats([r["train_acc"] - r["test_acc"] for r in ok])
        sa_m, _ = _stats([r["final_s_a"] for r in ok])
        agg.append([T, tr_m, tr_s, te_m, te_s, g_m, g_s, sa_m, sum(r["diverged"] for r in sub)])
        ltr_m, ltr_s = _stats([r["final_train_loss"] for r in ok])
        lte_m, lte_s = _stats([r["test_loss"] for r in ok])
        agg_loss.append([T, ltr_m, ltr_s, lte_m, lte_s, len(ok)])
    return agg, agg_loss


def cmd_experiment2(cfg, out):
    """Marginally stable initialization across lengths, with seed retries on divergence."""
    cfg = cfg.resolved(s_a_init=0.0)
    _echo_config(out, "experiment2", cfg)
    doc = asdict(cfg)
    jobs = [(doc, T, slot, cfg.s_a_init, out) for T in cfg.lengths for slot in cfg.seeds]
    runs = [r for attempts in _pool_map(_retry_job, jobs, cfg.workers) for r in attempts]
    write_csv(
        os.path.join(out, "runs.csv"),
        RUNS_HEADER,
        [
            [r["T"], r["slot"], r["seed"], r["attempt"], r["diverged"], r["train_acc"], r["test_acc"],
             r["final_train_loss"], r["test_loss"], r["final_s_a"]]
            for r in runs
        ],
    )
    agg, agg_loss = aggregate_runs(runs, cfg.lengths)
    write_csv(os.path.join(out, "aggregate.csv"), AGGREGATE_HEADER, agg)
    write_csv(os.path.join(out, "aggregate_loss.csv"), AGGREGATE_LOSS_HEADER, agg_loss)
    sys.stdout.write(csv_text(AGGREGATE_HEADER, agg))
    return agg


def cmd_sweep_sa(cfg, out, lengths_given=False):
    """One run per initial spectral abscissa on the grid -0.1, -0.08, ..., 0.1."""
    cfg = cfg.resolved()
    if not lengths_given:
        cfg.lengths = [SWEEP_LENGTH[cfg.task]]
    _echo_config(out, "sweep-sa", cfg)
    doc = asdict(cfg)
    T = cfg.lengths[0]
    jobs = [
        (doc, T, seed, s0, os.path.join(out, "runs", f"sa{s0:+.2f}_seed{seed}"))
        for s0 in SWEEP_GRID
        for seed in cfg.seeds
    ]
    results = _pool_map(_run_cell_job, jobs, cfg.workers)
    rows = [
        [r["s_a_init"], r["seed"], epoch, loss, acc, sa, div]
        for r in results
        for (epoch, loss, acc, sa, div) in r["rows"]
    ]
    write_csv(os.path.join(out, "sweep.csv"), SWEEP_HEADER, rows)
    print(f"T={T} runs={len(results)} diverged={sum(r['diverged'] for r in results)}")
    return results


def cmd_bound(path, out=None):
    with open(path, encoding="utf-8") as fh:
        assume = BoundAssumptions.from_dict(json.load(fh))
    report = bound_report(assume).to_dict()
    if out:
        write_json(os.path.join(out, "bound_report.json"), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


def _max_length(path):
    longest = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                longest = max(longest, len(json.loads(line).get("tokens", [])))
    return max(longest, 1)


def cmd_audit(checkpoint, data_path, out=None):
    params = load_checkpoint(checkpoint)
    split = load_text_jsonl(data_path, Vocabulary(), _max_length(data_path))
    if split.vocab_size > params.V:
        raise ParameterError(f"dataset uses token ids up to {split.vocab_size - 1}, checkpoint has V={params.V}")
    row = audit_norms(params, split).as_row()
    text = csv_text(NORM_COLUMNS, [row])
    if out:
        write_csv(os.path.join(out, "audit.csv"), NORM_COLUMNS, [row])
    sys.stdout.write(text)
    return row


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="selssm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSONL plus its vocabulary")
    g.add_argument("--task", choices=("majority", "listops"), default="majority")
    g.add_argument("--m", type=int, default=1000)
    g.add_argument("--T", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--flip-frac", type=float, default=0.0)
    g.add_argument("--out", required=True)

    for name, help_text in (
        ("train", "train one model"),
        ("experiment1", "unstable initialization, short budget, per-run logs"),
        ("experiment2", "length sweep with per-T aggregates"),
        ("sweep-sa", "sweep the initial spectral abscissa"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON document with experiment settings")
        p.add_argument("--out", required=True)
        p.add_argument("--task", choices=TASKS)
        p.add_argument("--seeds", type=_ints)
        p.add_argument("--lengths", type=_ints)
        p.add_argument("--sa-init", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--workers", type=int)

    b = sub.add_parser("bound", help="evaluate the generalization bound for given assumptions")
    b.add_argument("--config", required=True, help="JSON document of bound assumptions")
    b.add_argument("--out")

    a = sub.add_parser("audit-norms", help="print parameter and input norms of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True, help="JSONL dataset of token ids")
    a.add_argument("--out")
    return parser


def _experiment_config(args):
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    for flag, key in (("task", "task"), ("seeds", "seeds"), ("lengths", "lengths"), ("sa_init", "s_a_init"),
                      ("workers", "workers")):
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    if args.epochs is not None:
        doc["train"] = {**doc.get("train", {}), "epochs": args.epochs}
    return ExperimentConfig.from_dict(doc), "lengths" in doc


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            cmd_gen_data(args.task, args.m, args.T, args.seed, args.out, args.flip_frac)
        elif args.command == "bound":
            cmd_bound(args.config, args.out)
        elif args.command == "audit-norms":
            cmd_audit(args.checkpoint, args.data, args.out)
        else:
            cfg, lengths_given = _experiment_config(args)
            if args.command == "train":
                cmd_train(cfg, args.out)
            elif args.command == "experiment1":
                cmd_experiment1(cfg, args.out)
            elif args.command == "experiment2":
                cmd_experiment2(cfg, args.out)
            else:
                cmd_sweep_sa(cfg, args.out, lengths_given)
    except (ParameterError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
