"""Small dense linear-algebra kernel: mixed norms, power iteration, softplus."""

import math

import numpy as np

from .errors import NumericError, ParameterError

SOFTPLUS_THRESHOLD = 30.0
POWER_ITER_CAP = 10_000

_ORDERS = {1: 1, 2: 2, math.inf: np.inf, "inf": np.inf}


def _order(o):
    try:
        return _ORDERS[o]
    except (KeyError, TypeError):
        raise ParameterError(f"unsupported norm order {o!r}; use 1, 2 or inf") from None


def mixed_norm(X, p, q):
    """q-norm of the vector of column p-norms of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ParameterError(f"expected a matrix, got shape {X.shape}")
    cols = np.linalg.norm(X, ord=_order(p), axis=0)
    return float(np.linalg.norm(cols, ord=_order(q)))


def spectral_norm(X, tol=1e-9, max_iter=POWER_ITER_CAP):
    """Largest singular value via power iteration on X^T X.

    Converged when the residual |X^T X v - lam v| drops below ``tol * lam``.
    Starts from the normalized all-ones vector so results are reproducible.
    If that start is orthogonal to every dominant direction the iteration is
    repeated from each standard basis vector.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.size == 0:
        raise ParameterError("spectral_norm needs a nonempty matrix")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if not np.any(X):
        return 0.0
    n = X.shape[1]
    sigma = _power_iterate(X, np.ones(n), tol, max_iter)
    if sigma == 0.0:
        sigma = max(_power_iterate(X, e, tol, max_iter) for e in np.eye(n))
    return sigma


def _power_iterate(X, v, tol, max_iter):
    # Stop on the eigen-residual of X^T X; when the top two singular values
    # nearly coincide the residual can stall above tol, so also stop once the
    # Rayleigh quotient no longer moves at machine precision. The estimate is
    # then within the singular-value gap of the answer.
    v = v / np.linalg.norm(v)
    sigma, prev = 0.0, -1.0
    for _ in range(max_iter):
        w = X.T @ (X @ v)
        lam = float(v @ w)
        if lam <= 0.0:
            return 0.0
        sigma = math.sqrt(lam)
        if np.linalg.norm(w - lam * v) <= tol * lam or abs(lam - prev) <= 4 * np.finfo(float).eps * lam:
            return sigma
        prev = lam
        v = w / np.linalg.norm(w)
    raise NumericError(f"power iteration did not converge in {max_iter} steps", last_estimate=sigma)


def softplus(x):
    """ln(1 + e^x), overflow-safe above ``SOFTPLUS_THRESHOLD``. Scalars or arrays."""
    if np.ndim(x) == 0:
        x = float(x)
        if x > SOFTPLUS_THRESHOLD:
            return x + math.log1p(math.exp(-x))
        return math.log1p(math.exp(x))
    x = np.asarray(x, dtype=float)
    big = x > SOFTPLUS_THRESHOLD
    safe = np.where(big, 0.0, x)
    return np.where(big, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(safe)))


def softplus_deriv(x):
    """Logistic sigmoid, the derivative of softplus."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
