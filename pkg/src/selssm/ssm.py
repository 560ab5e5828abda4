"""Single-block selective state-space classifier.

Per channel ``j`` and input step ``u`` (a d-vector)::

    delta  = softplus(p + q . u)
    x_j   <- exp(delta * a_j) * x_j + delta * (W_B u) * u_j
    y_j    = (W_C u) . x_j

with ``a_j`` the j-th row of ``a_diag`` (the diagonal of channel j's state
matrix). Logits are ``readout @ y`` at the last step. The block-diagonal
Kronecker form is never materialized by the scan; :func:`unrolled_output`
does materialize it and serves as an independent check.
"""

import json
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.linalg import expm

from .errors import DataError, ParameterError, ScanOverflowError
from .numkit import softplus

ARRAY_FIELDS = ("a_diag", "w_b", "w_c", "q", "readout", "embedding")
PARAM_FIELDS = ("a_diag", "w_b", "w_c", "p", "q", "readout", "embedding")


@dataclass
class SsmParams:
    a_diag: np.ndarray  # (d, N)
    w_b: np.ndarray  # (N, d)
    w_c: np.ndarray  # (N, d)
    p: float
    q: np.ndarray  # (d,)
    readout: np.ndarray  # (K, d)
    embedding: np.ndarray  # (V, d)

    def __post_init__(self):
        for name in ARRAY_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.p = float(self.p)
        self.validate()

    @property
    def d(self):
        return self.a_diag.shape[0]

    @property
    def N(self):
        return self.a_diag.shape[1]

    @property
    def K(self):
        return self.readout.shape[0]

    @property
    def V(self):
        return self.embedding.shape[0]

    def validate(self):
        if self.a_diag.ndim != 2 or self.a_diag.size == 0:
            raise ParameterError(f"a_diag must be a nonempty (d, N) matrix, got {self.a_diag.shape}")
        d, N = self.a_diag.shape
        expected = {
            "w_b": (N, d),
            "w_c": (N, d),
            "q": (d,),
            "readout": (self.readout.shape[0], d) if self.readout.ndim == 2 else None,
            "embedding": (self.embedding.shape[0], d) if self.embedding.ndim == 2 else None,
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if shape is None or arr.shape != shape:
                raise ParameterError(f"{name} has shape {arr.shape}, expected {shape or '(?, d)'}")
        if self.K < 1 or self.V < 1:
            raise ParameterError("need K >= 1 classes and V >= 1 tokens")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"{name} has non-finite entries")

    def copy(self):
        return SsmParams(**{f.name: np.copy(getattr(self, f.name)) for f in fields(self)})

    def to_dict(self):
        out = {"d": self.d, "N": self.N, "K": self.K, "V": self.V}
        for name in PARAM_FIELDS:
            val = getattr(self, name)
            out[name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    @classmethod
    def from_dict(cls, doc):
        missing = [k for k in ("d", "N", "K", "V", *PARAM_FIELDS) if k not in doc]
        if missing:
            raise ParameterError(f"checkpoint missing fields: {', '.join(missing)}")
        params = cls(**{name: doc[name] for name in PARAM_FIELDS})
        declared = (doc["d"], doc["N"], doc["K"], doc["V"])
        if declared != (params.d, params.N, params.K, params.V):
            raise ParameterError(
                f"checkpoint declares (d, N, K, V) = {declared} but arrays imply "
                f"{(params.d, params.N, params.K, params.V)}"
            )
        return params


def save_checkpoint(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_dict(), fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return SsmParams.from_dict(json.load(fh))


def init_params(d, N, K, V, s_target, seed):
    """Random parameters whose spectral abscissa is exactly ``s_target``.

    ``a_diag`` is uniform on [s_target - 1, s_target] with its largest entry
    pinned to ``s_target``; projections, q, readout and embedding are uniform
    on [-1/sqrt(d), 1/sqrt(d)]; p = 0.
    """
    if not math.isfinite(s_target):
        raise ParameterError("s_target must be finite")
    rng = np.random.default_rng(seed)
    a = rng.uniform(s_target - 1.0, s_target, size=(d, N))
    a.flat[np.argmax(a)] = s_target
    r = 1.0 / math.sqrt(d)
    return SsmParams(
        a_diag=a,
        w_b=rng.uniform(-r, r, size=(N, d)),
        w_c=rng.uniform(-r, r, size=(N, d)),
        p=0.0,
        q=rng.uniform(-r, r, size=d),
        readout=rng.uniform(-r, r, size=(K, d)),
        embedding=rng.uniform(-r, r, size=(V, d)),
    )


def spectral_abscissa(a_diag):
    a_diag = np.asarray(a_diag, dtype=float)
    if a_diag.size == 0:
        raise ParameterError("empty state matrix")
    return float(np.max(a_diag))


def step_size(params, u_t):
    u_t = np.asarray(u_t, dtype=float)
    if u_t.shape != (params.d,):
        raise ParameterError(f"input has shape {u_t.shape}, expected ({params.d},)")
    return softplus(params.p + float(params.q @ u_t))


def discretize_a(a_diag, delta):
    """Zero-order hold on a diagonal state matrix: exp(delta * a)."""
    if not delta > 0:
        raise ParameterError("step size must be positive")
    return np.exp(delta * np.asarray(a_diag, dtype=float))


def embed(tokens, embedding):
    tokens = np.asarray(tokens, dtype=np.int64)
    V = embedding.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        bad = tokens[(tokens < 0) | (tokens >= V)][0]
        raise DataError(f"token id {bad} outside vocabulary of size {V}")
    return embedding[tokens]


def _as_inputs(params, seq):
    """Token ids (1-D ints) are embedded; float arrays of shape (T, d) pass through."""
    arr = np.asarray(seq)
    if arr.ndim == 1 and (arr.size == 0 or np.issubdtype(arr.dtype, np.integer)):
        U = embed(arr, params.embedding)
    elif arr.ndim == 1 and params.d == 1:
        U = arr.astype(float)[:, None]
    elif arr.ndim == 2:
        U = arr.astype(float)
    else:
        raise ParameterError(f"sequence must be token ids or a (T, d) array, got shape {arr.shape}")
    if U.shape[0] == 0:
        raise ParameterError("empty sequence")
    if U.shape[1] != params.d:
        raise ParameterError(f"inputs have {U.shape[1]} channels, model has {params.d}")
    return U


@dataclass
class ScanTrace:
    """Forward trajectory kept for the backward pass."""

    U: np.ndarray  # (B, T, d)
    pre: np.ndarray  # (B, T) p + q.u, unused when unit_step
    delta: np.ndarray  # (B, T)
    bproj: np.ndarray  # (B, T, N)  W_B u
    states: np.ndarray  # (B, T, d, N) state after each update
    cproj: np.ndarray  # (B, N)  W_C u at the last step
    y: np.ndarray  # (B, d)


def scan_batch(params, U, *, unit_step=False, all_outputs=False, trace=False):
    """Run the recurrence over a batch of embedded sequences ``U`` of shape (B, T, d).

    Returns the outputs (B, T, d) when ``all_outputs`` else the last outputs
    (B, d); with ``trace`` a :class:`ScanTrace` is returned instead.
    Raises :class:`ScanOverflowError` at the first step with a non-finite state.
    """
    B, T, d = U.shape
    a, N = params.a_diag, params.N
    x = np.zeros((B, d, N))
    pre = U @ params.q + params.p
    delta = np.ones((B, T)) if unit_step else softplus(pre)
    bproj = U @ params.w_b.T
    ys = np.empty((B, T, d)) if all_outputs else None
    states = np.empty((B, T, d, N)) if trace else None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            dt = delta[:, t, None, None]
            x = np.exp(dt * a) * x + (dt[:, :, 0] * U[:, t])[:, :, None] * bproj[:, t, None, :]
            if not np.isfinite(x).all():
                raise ScanOverflowError(t + 1)
            if trace:
                states[:, t] = x
            if all_outputs:
                c = U[:, t] @ params.w_c.T
                ys[:, t] = (x @ c[:, :, None])[:, :, 0]
        cproj = U[:, -1] @ params.w_c.T
        y = (x @ cproj[:, :, None])[:, :, 0]
    if not np.isfinite(y).all():
        raise ScanOverflowError(T)
    if trace:
        return ScanTrace(U, pre, delta, bproj, states, cproj, y)
    return ys if all_outputs else y


def scan_forward(params, seq, *, unit_step=False):
    """Outputs y[1..T] (list of d-vectors) and logits ``readout @ y[T]`` for one sequence.

    ``unit_step`` forces the step size to exactly 1 (constant-step regime).
    """
    U = _as_inputs(params, seq)
    ys = scan_batch(params, U[None], unit_step=unit_step, all_outputs=True)[0]
    return list(ys), params.readout @ ys[-1]


def logits_batch(params, tokens, *, unit_step=False, chunk=1024):
    """Logits (B, K) for a (B, T) array of token ids."""
    tokens = np.asarray(tokens)
    out = []
    for start in range(0, len(tokens), chunk):
        U = embed(tokens[start:start + chunk], params.embedding)
        out.append(scan_batch(params, U, unit_step=unit_step) @ params.readout.T)
    return np.concatenate(out) if out else np.empty((0, params.K))


def unrolled_output(params, seq, *, unit_step=False):
    """y[T] from the explicit sum over past inputs, with materialized block matrices.

    y[T] = C(u_T) sum_{k=0}^{T-1} A^k delta_{T-k} B(u_{T-k}) u_{T-k}, where
    A^k = expm((delta_T + ... + delta_{T-k+1}) A_c), A_c = blockdiag(diag(a_j)),
    B(u) = I_d kron (W_B u) and C(u) = I_d kron (u^T W_C^T).
    """
    U = _as_inputs(params, seq)
    T, d = U.shape
    A_c = np.diag(params.a_diag.reshape(-1))
    eye = np.eye(d)
    if unit_step:
        deltas = np.ones(T)
    else:
        deltas = np.array([step_size(params, u) for u in U])
    acc = np.zeros(d * params.N)
    for k in range(T):
        t = T - 1 - k
        elapsed = deltas[t + 1:].sum()
        A_pow = expm(elapsed * A_c) if k > 0 else np.eye(d * params.N)
        B_t = np.kron(eye, (params.w_b @ U[t])[:, None])
        acc += A_pow @ (deltas[t] * (B_t @ U[t]))
    C_T = np.kron(eye, (U[-1] @ params.w_c.T)[None, :])
    y = C_T @ acc
    if not np.all(np.isfinite(y)):
        raise ScanOverflowError(T)
    return y


def linear_attention_output(w_b, w_c, readout, seq):
    """Causal linear attention at the last position.

    Query W_C u_T, keys W_B u_t, values u_t, for t = 1..T; returns
    ``readout @ sum_t (query . key_t) value_t``. This is the selective scan
    with a zero state matrix and unit step size.
    """
    U = np.asarray(seq, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    w_b = np.atleast_2d(np.asarray(w_b, dtype=float))
    w_c = np.atleast_2d(np.asarray(w_c, dtype=float))
    readout = np.atleast_2d(np.asarray(readout, dtype=float))
    if U.shape[1] != w_b.shape[1] or w_c.shape != w_b.shape or readout.shape[1] != U.shape[1]:
        raise ParameterError("dimension mismatch between inputs and projections")
    query = w_c @ U[-1]
    keys = U @ w_b.T
    scores = keys @ query
    return readout @ (scores @ U)
