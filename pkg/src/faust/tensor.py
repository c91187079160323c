"""Dense linear algebra primitives and their hand-derived backward rules.

Matrices are plain 2-D numpy arrays (row-major).  Training tensors are stored
as float32; products and reductions accumulate in float64 and are cast back to
the storage dtype, so results do not depend on BLAS blocking in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-8
LAYERNORM_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _out_dtype(*arrays):
    return np.result_type(*(a.dtype for a in arrays))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Raises:
        DimensionError: if ``a.shape[-1] != b.shape[0]``.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return out.astype(_out_dtype(a, b), copy=False)


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise ``max(0, x)`` plus the 0/1 mask of positive inputs."""
    mask = (x > 0).astype(x.dtype)
    return x * mask, mask


def l2_normalize(x: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Divide each row (or a single vector) by its L2 norm plus ``eps``.

    Returns the normalized array and the norms (shape ``x.shape[:-1]``).
    """
    norm = np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=-1))
    y = x / (norm + eps)[..., None]
    return y.astype(x.dtype, copy=False), norm


def l2_normalize_backward(grad_out: np.ndarray, x: np.ndarray, eps: float = NORM_EPS,
                          norm: np.ndarray | None = None) -> np.ndarray:
    """Vector-Jacobian product of ``x -> x / (||x|| + eps)``, row-wise.

    With ``n = ||x||`` and ``s = n + eps``::

        J^T g = g / s - x (x . g) / (n s^2)

    The second term vanishes at ``x = 0``.
    """
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad {grad_out.shape} does not match input {x.shape}")
    x64 = x.astype(np.float64, copy=False)
    g64 = grad_out.astype(np.float64, copy=False)
    if norm is None:
        norm = np.sqrt(np.sum(x64 * x64, axis=-1))
    norm = np.asarray(norm, dtype=np.float64)
    s = norm + eps
    xg = np.sum(x64 * g64, axis=-1)
    safe_n = np.where(norm > 0, norm, 1.0)
    coef = np.where(norm > 0, xg / (safe_n * s * s), 0.0)
    dx = g64 / s[..., None] - x64 * coef[..., None]
    return dx.astype(_out_dtype(grad_out, x), copy=False)


def layer_norm(x: np.ndarray, eps: float = LAYERNORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-variance normalization of each row (no affine params).

    Returns the normalized rows and the per-row standard deviation
    ``sqrt(var + eps)`` needed by the backward pass.
    """
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    centered = x64 - mu
    std = np.sqrt(np.mean(centered * centered, axis=-1) + eps)
    return (centered / std[..., None]).astype(x.dtype, copy=False), std


def layer_norm_backward(grad_out: np.ndarray, y: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`layer_norm` given its output and std."""
    if grad_out.shape != y.shape:
        raise DimensionError(f"grad {grad_out.shape} does not match output {y.shape}")
    g = grad_out.astype(np.float64, copy=False)
    y64 = y.astype(np.float64, copy=False)
    dx = (g - g.mean(axis=-1, keepdims=True)
          - y64 * np.mean(g * y64, axis=-1, keepdims=True)) / np.asarray(std, np.float64)[..., None]
    return dx.astype(_out_dtype(grad_out, y), copy=False)


@dataclass
class AdamState:
    """Moment estimates for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Bias-corrected Adam update, applied to ``param`` in place.

    Returns ``param`` for convenience.  ``state`` is advanced by one step.
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError(f"param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    g = grad.astype(np.float64, copy=False)
    m = state.beta1 * state.m.astype(np.float64) + (1.0 - state.beta1) * g
    v = state.beta2 * state.v.astype(np.float64) + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** state.t)
    v_hat = v / (1.0 - state.beta2 ** state.t)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    state.m[...] = m
    state.v[...] = v
    param -= update.astype(param.dtype, copy=False)
    return param
