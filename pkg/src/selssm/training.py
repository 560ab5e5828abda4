"""Adam with decoupled weight decay, the epoch loop and per-epoch metrics."""

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from .artifacts import write_csv
from .autograd import _batch_cross_entropy, loss_and_grad
from .bounds import NORM_COLUMNS, NormRecord, audit_norms
from .datasets import balanced_subset, same_shape
from .errors import NumericError, ParameterError
from .ssm import PARAM_FIELDS, init_params, logits_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "mean_loss", "accuracy", "s_a", *NORM_COLUMNS[1:], "diverged")
EVAL_HEADER = ("epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 40
    reg_lambda: float = 1.0
    s_a_init: float = 0.0
    seed: int = 0
    N: int = 4
    d: int = 4
    K: int = 2
    V: int = 2
    T: int = 50
    subset_frac: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps_opt: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0 < self.subset_frac <= 1:
            raise ParameterError("subset_frac must lie in (0, 1]")
        self.betas = tuple(self.betas)


@dataclass
class MetricsRow:
    epoch: int
    mean_loss: float
    accuracy: float
    s_a: float
    norms: NormRecord
    diverged: bool = False
    train_loss: float = math.nan
    train_accuracy: float = math.nan
    test_loss: float = math.nan
    test_accuracy: float = math.nan

    def metrics_row(self):
        n = self.norms
        return [self.epoch, self.mean_loss, self.accuracy, self.s_a, *n.as_row()[1:], int(self.diverged)]

    def eval_row(self):
        return [self.epoch, self.train_loss, self.train_accuracy, self.test_loss, self.test_accuracy]


@dataclass
class FitResult:
    rows: list
    params: object
    initial_norms: NormRecord

    @property
    def diverged(self):
        return bool(self.rows) and self.rows[-1].diverged

    def succeeded(self, num_classes):
        """Finished without diverging and ended below the chance-level loss ln K."""
        if not self.rows or self.diverged:
            return False
        return self.rows[-1].train_loss < math.log(num_classes)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            {k: np.zeros(np.shape(getattr(params, k))) for k in PARAM_FIELDS},
            {k: np.zeros(np.shape(getattr(params, k))) for k in PARAM_FIELDS},
        )


def adam_step(params, grads, state, lr, wd=0.0, betas=(0.9, 0.999), eps_opt=1e-8):
    """One Adam update with decoupled weight decay; returns (new params, new state).

    Weight decay shrinks every parameter by (1 - lr wd) before the moment update.
    """
    b1, b2 = betas
    g = grads.as_dict()
    if not grads.is_finite():
        raise NumericError("non-finite gradient")
    step = state.step + 1
    new = params.copy()
    m, v = {}, {}
    for name in PARAM_FIELDS:
        gk = np.asarray(g[name], dtype=float)
        if gk.shape != state.m[name].shape:
            raise ParameterError(f"optimizer state for {name} has shape {state.m[name].shape}")
        m[name] = b1 * state.m[name] + (1 - b1) * gk
        v[name] = b2 * state.v[name] + (1 - b2) * gk * gk
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        theta = np.asarray(getattr(params, name), dtype=float) * (1 - lr * wd)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps_opt)
        setattr(new, name, float(theta) if name == "p" else theta)
    return new, AdamState(m, v, step)


def evaluate(params, tokens, labels, chunk=1024):
    """(mean cross-entropy, accuracy) over a split given as arrays."""
    if len(labels) == 0:
        return math.nan, math.nan
    logits = logits_batch(params, tokens, chunk=chunk)
    loss, _ = _batch_cross_entropy(logits, labels)
    return float(loss.mean()), float(np.mean(np.argmax(logits, axis=1) == labels))


def fit(config, train, test, params=None):
    """Train from ``init_params`` (or ``params``) and record one MetricsRow per epoch.

    A non-finite forward state, loss or gradient ends the run; the last row is
    then flagged ``diverged``.
    """
    if not same_shape(train, test):
        raise ParameterError("train and test splits disagree on T, vocabulary size or classes")
    if (train.T, train.num_classes) != (config.T, config.K) or train.vocab_size > config.V:
        raise ParameterError(
            f"config (T={config.T}, K={config.K}, V={config.V}) does not match data "
            f"(T={train.T}, K={train.num_classes}, V={train.vocab_size})"
        )
    if config.subset_frac < 1:
        train = balanced_subset(train, config.subset_frac, config.seed)
    if params is None:
        params = init_params(config.d, config.N, config.K, config.V, config.s_a_init, config.seed)
    tokens, labels = train.arrays()
    test_tokens, test_labels = test.arrays()
    initial = audit_norms(params, tokens)
    rows = []
    if config.epochs <= 0 or len(labels) == 0:
        return FitResult(rows, params, initial)

    rng = np.random.default_rng([config.seed, 1])
    state = AdamState.zeros(params)
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(labels))
        loss_sum, correct, seen = 0.0, 0.0, 0
        diverged = False
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            try:
                value, grads = loss_and_grad(params, (tokens[idx], labels[idx]), config.reg_lambda)
                params, state = adam_step(
                    params, grads, state, config.learning_rate, config.weight_decay, config.betas, config.eps_opt
                )
            except (NumericError, FloatingPointError) as exc:
                log.info("epoch %d diverged: %s", epoch, exc)
                diverged = True
                break
            loss_sum += value.loss * len(idx)
            correct += value.accuracy * len(idx)
            seen += len(idx)
        # params are only replaced after a successful step, so they stay finite
        norms = _safe_norms(params, tokens)
        row = MetricsRow(
            epoch=epoch,
            mean_loss=loss_sum / seen if seen else math.nan,
            accuracy=correct / seen if seen else math.nan,
            s_a=norms.s_a,
            norms=norms,
            diverged=diverged,
        )
        if not diverged:
            try:
                row.train_loss, row.train_accuracy = evaluate(params, tokens, labels)
                row.test_loss, row.test_accuracy = evaluate(params, test_tokens, test_labels)
            except NumericError as exc:
                log.info("evaluation after epoch %d diverged: %s", epoch, exc)
                row.diverged = True
            if not math.isfinite(row.train_loss):
                row.diverged = True
        rows.append(row)
        if row.diverged:
            break
    return FitResult(rows, params, initial)


def _safe_norms(params, tokens):
    try:
        return audit_norms(params, tokens)
    except (NumericError, ValueError):
        return NormRecord(*(math.nan for _ in NORM_COLUMNS))


def write_metrics(result, metrics_path, eval_path=None):
    write_csv(metrics_path, METRICS_HEADER, [r.metrics_row() for r in result.rows])
    if eval_path is not None:
        write_csv(eval_path, EVAL_HEADER, [r.eval_row() for r in result.rows])


def config_dict(config):
    out = {f.name: getattr(config, f.name) for f in fields(config)}
    out["betas"] = list(config.betas)
    return out

