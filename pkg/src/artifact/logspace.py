"""Small log-space helpers shared by the HMM, EM and DP code."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp as _scipy_logsumexp

__all__ = ["logsumexp", "safe_log", "log_vecmat", "log_normalize"]


def logsumexp(a, axis=None, **kwargs):
    """``scipy.special.logsumexp`` with a fast path for plain 1-D vectors.

    The per-token decoding loop calls this on length-V vectors, where the
    scipy wrapper's dispatch overhead dominates the arithmetic.
    """
    if axis is None and not kwargs:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 1 and a.size:
            m = a.max()
            if not np.isfinite(m):
                return float(m) if m == np.inf or np.isnan(m) else -np.inf
            return float(m + np.log(np.exp(a - m).sum()))
    return _scipy_logsumexp(a, axis=axis, **kwargs)


def safe_log(x) -> np.ndarray:
    """Natural log with exact zeros mapped to -inf and no warnings."""
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


def log_vecmat(log_vec: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """``log(exp(log_vec) @ mat)`` for a *linear-space* matrix ``mat``.

    ``log_vec`` may carry leading batch dimensions. The max of each row is
    subtracted before exponentiating, so arbitrarily small (but finite)
    inputs do not underflow.
    """
    log_vec = np.asarray(log_vec, dtype=np.float64)
    m = log_vec.max(axis=-1, keepdims=True)
    # rows that are entirely -inf stay -inf after the shift-back
    m[~np.isfinite(m)] = 0.0
    with np.errstate(divide="ignore"):
        return np.log(np.exp(log_vec - m) @ mat) + m


def log_normalize(log_vec: np.ndarray) -> np.ndarray:
    """Shift a log-vector so it exponentiates to a distribution."""
    total = logsumexp(log_vec)
    if not np.isfinite(total):
        raise ValueError("cannot normalize a vector with no mass")
    return log_vec - total
