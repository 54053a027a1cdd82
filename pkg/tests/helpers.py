"""Finite-difference oracle shared by the gradient tests."""
import numpy as np

GRAD_TOL = 1e-4
N_INSTANCES = 100


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        v = x[i]
        x[i] = v + h
        fp = f()
        x[i] = v - h
        fm = f()
        x[i] = v
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(num / den)
