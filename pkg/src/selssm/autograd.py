"""Exact reverse-mode gradients of the classification objective.

The backward pass replays the stored forward trajectory in reverse. Every
step uses the input three times (step size, B-path, value ``u_j``) and the
last step a fourth time (C-path); all of them feed the embedding gradient.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError
from .numkit import softplus_deriv
from .ssm import PARAM_FIELDS, embed, scan_batch


@dataclass
class GradientSet:
    d_a_diag: np.ndarray
    d_w_b: np.ndarray
    d_w_c: np.ndarray
    d_p: float
    d_q: np.ndarray
    d_readout: np.ndarray
    d_embedding: np.ndarray

    def as_dict(self):
        """Gradients keyed by the matching :class:`SsmParams` field name."""
        return {name: getattr(self, "d_" + name) for name in PARAM_FIELDS}

    @classmethod
    def zeros_like(cls, params):
        return cls(**{"d_" + k: np.zeros_like(np.asarray(getattr(params, k))) for k in PARAM_FIELDS})

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


@dataclass
class LossValue:
    loss: float
    correct: bool


@dataclass
class BatchLoss:
    objective: float  # mean cross-entropy + regularizer
    loss: float  # mean cross-entropy
    accuracy: float


def cross_entropy(logits, label):
    """Loss value and gradient w.r.t. the logits for a single example."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= label < logits.shape[0]:
        raise ParameterError(f"label {label} outside 0..{logits.shape[0] - 1}")
    loss, grad = _batch_cross_entropy(logits[None], np.array([label]))
    return LossValue(float(loss[0]), bool(np.argmax(logits) == label)), grad[0]


def _batch_cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = lse - shifted[rows, labels]
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


def stability_regularizer(a_diag, lam):
    """Quadratic hinge lam * sum(max(0, a)^2) on the state-matrix diagonal, and its gradient."""
    if lam < 0:
        raise ParameterError("regularization weight must be nonnegative")
    pos = np.maximum(np.asarray(a_diag, dtype=float), 0.0)
    return float(lam * np.sum(pos * pos)), 2.0 * lam * pos


def _as_arrays(batch):
    if isinstance(batch, tuple):
        tokens, labels = batch
        return np.asarray(tokens, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    examples = getattr(batch, "examples", batch)
    if len(examples) == 0:
        raise ParameterError("empty batch")
    lengths = {len(ex.tokens) for ex in examples}
    if len(lengths) != 1:
        raise ParameterError(f"sequences in a batch must share one length, got {sorted(lengths)}")
    tokens = np.array([ex.tokens for ex in examples], dtype=np.int64)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return tokens, labels


def objective(params, batch, reg_lambda=0.0, *, unit_step=False):
    """Forward-only value of the training objective."""
    tokens, labels = _as_arrays(batch)
    U = embed(tokens, params.embedding)
    logits = scan_batch(params, U, unit_step=unit_step) @ params.readout.T
    loss, _ = _batch_cross_entropy(logits, labels)
    reg, _ = stability_regularizer(params.a_diag, reg_lambda)
    return float(loss.mean()) + reg


def loss_and_grad(params, batch, reg_lambda=0.0, *, unit_step=False):
    """Mean cross-entropy plus regularizer over ``batch``, with its exact gradient.

    ``batch`` is a list of labeled sequences, a dataset split, or a
    ``(tokens, labels)`` pair of arrays.
    """
    tokens, labels = _as_arrays(batch)
    if labels.size and (labels.min() < 0 or labels.max() >= params.K):
        raise ParameterError(f"labels must lie in 0..{params.K - 1}")
    B = len(labels)
    U = embed(tokens, params.embedding)
    tr = scan_batch(params, U, unit_step=unit_step, trace=True)
    logits = tr.y @ params.readout.T
    losses, g_logits = _batch_cross_entropy(logits, labels)
    g_logits /= B
    reg, g_reg = stability_regularizer(params.a_diag, reg_lambda)
    data_loss = float(losses.mean())
    value = BatchLoss(
        objective=data_loss + reg,
        loss=data_loss,
        accuracy=float(np.mean(np.argmax(logits, axis=1) == labels)),
    )
    if not np.isfinite(value.objective):
        raise NumericError("non-finite loss", last_estimate=value.objective)

    grads, dU = _backward(params, tr, g_logits, unit_step)
    grads.d_a_diag += g_reg
    np.add.at(grads.d_embedding, tokens, dU)
    if not grads.is_finite():
        raise NumericError("non-finite gradient")
    return value, grads


def _backward(params, tr, g_logits, unit_step):
    a = params.a_diag
    U, delta, bproj, states = tr.U, tr.delta, tr.bproj, tr.states
    B, T, d = U.shape
    d_readout = g_logits.T @ tr.y
    g_y = g_logits @ params.readout  # (B, d)

    dU = np.zeros_like(U)
    # y_j = c . x_j at the last step
    x_last = states[:, -1]
    d_c = np.einsum("bj,bjn->bn", g_y, x_last)
    d_w_c = d_c.T @ U[:, -1]
    dU[:, -1] += d_c @ params.w_c
    g_x = g_y[:, :, None] * tr.cproj[:, None, :]  # (B, d, N)

    d_a = np.zeros_like(a)
    d_w_b = np.zeros_like(params.w_b)
    d_delta = np.zeros((B, T))
    zero = np.zeros_like(x_last)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T - 1, -1, -1):
            dt = delta[:, t]
            decay = np.exp(dt[:, None, None] * a)
            x_prev = states[:, t - 1] if t > 0 else zero
            u, b = U[:, t], bproj[:, t]
            # decay term: exp(delta a) * x_prev
            g_decay = g_x * x_prev * decay
            d_a += np.einsum("bjn,b->jn", g_decay, dt)
            d_delta[:, t] += np.einsum("bjn,jn->b", g_decay, a)
            # input term: delta * u_j * b_n
            gb = np.einsum("bjn,bj->bn", g_x, u)  # sum_j g_x u_j
            d_delta[:, t] += np.einsum("bn,bn->b", gb, b)
            d_b = dt[:, None] * gb
            d_w_b += d_b.T @ u
            dU[:, t] += dt[:, None] * np.einsum("bjn,bn->bj", g_x, b) + d_b @ params.w_b
            g_x = g_x * decay

    if unit_step:
        d_p = 0.0
        d_q = np.zeros_like(params.q)
    else:
        d_pre = d_delta * softplus_deriv(tr.pre)
        d_p = float(d_pre.sum())
        d_q = np.einsum("bt,btd->d", d_pre, U)
        dU += d_pre[:, :, None] * params.q
    grads = GradientSet(
        d_a_diag=d_a,
        d_w_b=d_w_b,
        d_w_c=d_w_c,
        d_p=d_p,
        d_q=d_q,
        d_readout=d_readout,
        d_embedding=np.zeros_like(params.embedding),
    )
    return grads, dU


def finite_diff_grad(params, batch, reg_lambda=0.0, step=1e-5, *, unit_step=False):
    """Central differences (L(theta+h) - L(theta-h)) / 2h for every scalar parameter."""
    if step <= 0:
        raise ParameterError("step must be positive")
    batch = _as_arrays(batch)
    out = {}
    for name in PARAM_FIELDS:
        base = np.array(getattr(params, name), dtype=float)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                moved = base.copy()
                moved[idx] += sign * step
                trial = params.copy()
                setattr(trial, name, float(moved) if name == "p" else moved)
                vals.append(objective(trial, batch, reg_lambda, unit_step=unit_step))
            grad[idx] = (vals[0] - vals[1]) / (2.0 * step)
        out["d_" + name] = float(grad) if name == "p" else grad
    return GradientSet(**out)

