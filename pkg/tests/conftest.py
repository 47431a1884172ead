import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def finite_difference(loss_fn, x, step=1e-5):
    """Central finite differences of a scalar-valued loss_fn wrt every entry of x.

    Independent oracle used throughout the suite: perturbs one coordinate at a
    time and never touches the analytic backward path.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn(x)
        flat[i] = orig - step
        lo = loss_fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
