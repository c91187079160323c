"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
REL_TOL = 1e-4
# components whose magnitude is below this fraction of the gradient's largest
# entry are compared against that scale instead of their own size
REL_FLOOR = 1e-3
# gradients that are analytically zero come out as ~1e-8 rounding noise
ABS_FLOOR = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x``.

    ``x`` is perturbed in place and restored.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    """Largest componentwise ``|a - n| / max(|a|, |n|, floor * scale, ABS_FLOOR)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, ABS_FLOOR))
    return float(np.max(np.abs(a - n) / denom))


def check(f, params: dict, analytic: dict, h: float = FD_STEP) -> dict:
    """Relative error per named parameter of ``f`` (closure over ``params``)."""
    return {name: rel_error(analytic[name], numeric_grad(f, p, h)) for name, p in params.items()}
