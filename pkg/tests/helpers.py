"""Shared test utilities: finite differences and random distributions."""

import numpy as np


def central_diff(f, x, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function at x, elementwise."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(approx, exact) -> float:
    """Relative L2 error of approx against exact, floored denominator."""
    a = np.asarray(approx, dtype=np.float64).ravel()
    b = np.asarray(exact, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_dist(rng: np.random.Generator, shape) -> np.ndarray:
    """Random strictly positive probability rows."""
    x = rng.gamma(1.0, 1.0, size=shape) + 1e-4
    return x / x.sum(axis=-1, keepdims=True)
