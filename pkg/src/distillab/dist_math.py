"""Probability-vector numerics shared by all losses.

Stable softmax/log-softmax, KL divergence with a floored log, convex mixtures,
and closed-form gradients of the KL terms with respect to student logits. All
math is float64 regardless of input dtype; the last axis is the vocabulary.
"""

import numpy as np

from .errors import InvalidInputError

# Floor applied inside logs of the *second* KL argument so the divergence stays
# finite when that argument has (numerically) zero cells.
EPS = 1e-12

_SUM_TOL = 1e-6


def _as_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] < 1:
        raise InvalidInputError(f"{name} must have at least one vocabulary cell")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _as_distribution(x, name: str) -> np.ndarray:
    arr = _as_finite(x, name)
    if np.any(arr < 0.0):
        raise InvalidInputError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _SUM_TOL):
        raise InvalidInputError(f"{name} rows must sum to 1 (tolerance {_SUM_TOL})")
    return arr


def _maybe_scalar(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def softmax(logits) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    z = _as_finite(logits, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    """Row-wise log-softmax over the last axis; finite for finite input."""
    z = _as_finite(logits, "logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(indices, vocab_size: int) -> np.ndarray:
    """One-hot float64 rows for integer indices in [0, vocab_size)."""
    idx = np.asarray(indices)
    if np.any(idx < 0) or np.any(idx >= vocab_size):
        raise InvalidInputError("one_hot indices out of range")
    out = np.zeros(idx.shape + (vocab_size,), dtype=np.float64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def mix(a, b, w: float) -> np.ndarray:
    """Convex mixture w*a + (1-w)*b of two distributions."""
    pa = _as_distribution(a, "a")
    pb = _as_distribution(b, "b")
    if pa.shape != pb.shape:
        raise InvalidInputError("mix arguments must share a shape")
    if not (0.0 <= w <= 1.0):
        raise InvalidInputError(f"mixture weight must lie in [0, 1], got {w}")
    return w * pa + (1.0 - w) * pb


def kl_divergence(p, q):
    """KL(p || q) over the last axis, with 0*log 0 := 0 and q floored at EPS.

    Scalar for vector inputs, an array of row divergences for batched inputs.
    """
    pp = _as_distribution(p, "p")
    qq = _as_distribution(q, "q")
    if pp.shape != qq.shape:
        raise InvalidInputError("kl_divergence arguments must share a shape")
    log_ratio = np.log(np.maximum(pp, EPS)) - np.log(np.maximum(qq, EPS))
    terms = np.where(pp > 0.0, pp * log_ratio, 0.0)
    return _maybe_scalar(terms.sum(axis=-1))


def kl_grad_wrt_student_logits(target, logits, beta: float):
    """Value and logit gradient of KL(target || beta*softmax(z) + (1-beta)*target).

    beta=1 is plain KL(target || softmax(z)) whose gradient is softmax(z) - target.
    Gradients flow through every occurrence of softmax(z) in the mixture; the
    target is treated as a constant. Returns (value, grad) with value per row.
    """
    t = _as_distribution(target, "target")
    z = _as_finite(logits, "logits")
    if t.shape != z.shape:
        raise InvalidInputError("target and logits must share a shape")
    if not (0.0 <= beta <= 1.0):
        raise InvalidInputError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        # Mixture collapses to the target itself: KL is 0 and so is the gradient.
        value = np.zeros(z.shape[:-1], dtype=np.float64)
        return _maybe_scalar(value), np.zeros_like(z)
    q = softmax(z)
    m = beta * q + (1.0 - beta) * t
    log_ratio = np.log(np.maximum(t, EPS)) - np.log(np.maximum(m, EPS))
    value = np.where(t > 0.0, t * log_ratio, 0.0).sum(axis=-1)
    r = t / m  # m >= beta * softmax(z) > 0
    s = (r * q).sum(axis=-1, keepdims=True)
    grad = beta * q * (s - r)
    return _maybe_scalar(value), grad


def reverse_kl_grad_wrt_student_logits(teacher_probs, logits):
    """Value and logit gradient of KL(softmax(z) || p) for fixed p.

    grad_k = q_k * (log(q_k / p_k) - KL(q || p)) with q = softmax(z).
    Returns (value, grad) with value per row.
    """
    p = _as_distribution(teacher_probs, "teacher_probs")
    z = _as_finite(logits, "logits")
    if p.shape != z.shape:
        raise InvalidInputError("teacher_probs and logits must share a shape")
    logq = log_softmax(z)
    q = np.exp(logq)
    diff = logq - np.log(np.maximum(p, EPS))
    value = (q * diff).sum(axis=-1)
    grad = q * (diff - value[..., None])
    return _maybe_scalar(value), grad
