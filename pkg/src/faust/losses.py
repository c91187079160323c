"""Layer-local objectives with analytic gradients.

Every loss takes a batch (leading axis) and returns the batch mean together
with gradients shaped like its inputs.  Single vectors are treated as a batch
of one.  Arithmetic is float64; gradients come back in the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError

DEFAULT_ALPHA = 0.2
DEFAULT_THETA = 2.0


@dataclass
class LossResult:
    value: float
    grads: tuple


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _as_batch(*arrays):
    single = arrays[0].ndim == 1
    out = [np.atleast_2d(np.asarray(a)) for a in arrays]
    return single, out


def _cast(grads, like, single):
    grads = [g.astype(like.dtype if np.issubdtype(like.dtype, np.floating) else np.float64)
             for g in grads]
    return tuple(g[0] if single else g for g in grads)


def goodness(f: np.ndarray) -> np.ndarray:
    """Squared L2 norm along the last axis."""
    f = np.asarray(f, dtype=np.float64)
    return np.sum(f * f, axis=-1)


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance along the last axis."""
    if np.shape(a)[-1] != np.shape(b)[-1]:
        raise DimensionError(f"length mismatch: {np.shape(a)} vs {np.shape(b)}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sum(d * d, axis=-1)


def ff_loss(g_pos, g_neg, theta: float = DEFAULT_THETA) -> LossResult:
    """Mean of ``0.5 * (softplus(theta - G+) + softplus(G- - theta))``.

    Gradients are with respect to ``g_pos`` and ``g_neg``.
    """
    gp = np.atleast_1d(np.asarray(g_pos, dtype=np.float64))
    gn = np.atleast_1d(np.asarray(g_neg, dtype=np.float64))
    n = gp.size
    value = 0.5 * (np.logaddexp(0.0, theta - gp) + np.logaddexp(0.0, gn - theta))
    d_pos = -0.5 * _sigmoid(theta - gp) / n
    d_neg = 0.5 * _sigmoid(gn - theta) / n
    if np.ndim(g_pos) == 0:
        d_pos, d_neg = d_pos[0], d_neg[0]
    return LossResult(float(value.mean()), (d_pos, d_neg))


def triplet_loss(f, f_pos, f_neg, alpha: float = DEFAULT_ALPHA) -> LossResult:
    """Hinge ``max(d(f, f+) - d(f, f-) + alpha, 0)`` on squared distances.

    The hinge boundary (argument exactly zero) yields zero gradient.
    """
    if not (np.shape(f) == np.shape(f_pos) == np.shape(f_neg)):
        raise DimensionError(f"shapes {np.shape(f)}, {np.shape(f_pos)}, {np.shape(f_neg)}")
    single, (a, p, n) = _as_batch(f, f_pos, f_neg)
    a, p, n = (x.astype(np.float64) for x in (a, p, n))
    z = sq_dist(a, p) - sq_dist(a, n) + alpha
    active = (z > 0).astype(np.float64)[:, None] / len(a)
    ga = 2.0 * (n - p) * active
    gp = 2.0 * (p - a) * active
    gn = 2.0 * (a - n) * active
    return LossResult(float(np.maximum(z, 0.0).mean()), _cast((ga, gp, gn), np.asarray(f), single))


def tuplet_loss(f, f_pos, f_negs) -> LossResult:
    """``log(1 + sum_i exp(d(f, f+) - d(f, f-_i)))`` evaluated as a log-sum-exp.

    Args:
        f, f_pos: anchors and positives, ``(B, d)`` or ``(d,)``.
        f_negs: negatives, ``(B, K, d)`` or ``(K, d)`` with ``K >= 1``.
    """
    f_negs = np.asarray(f_negs)
    single = np.ndim(f) == 1
    a = np.atleast_2d(np.asarray(f, dtype=np.float64))
    p = np.atleast_2d(np.asarray(f_pos, dtype=np.float64))
    n = np.asarray(f_negs, dtype=np.float64)
    if single:
        n = n[None]
    if n.ndim != 3 or n.shape[1] == 0:
        raise ValueError("need at least one negative per anchor")
    if a.shape != p.shape or n.shape[0] != a.shape[0] or n.shape[2] != a.shape[1]:
        raise DimensionError(f"shapes {np.shape(f)}, {np.shape(f_pos)}, {f_negs.shape}")
    B = len(a)
    z = sq_dist(a, p)[:, None] - sq_dist(a[:, None, :], n)  # (B, K)
    top = np.maximum(z.max(axis=1), 0.0)
    e = np.exp(z - top[:, None])
    denom = np.exp(-top) + e.sum(axis=1)
    value = top + np.log(denom)
    w = e / denom[:, None] / B  # d loss / d z_i, batch-mean scaled
    s = w.sum(axis=1)[:, None]
    diff_p = a - p
    diff_n = a[:, None, :] - n
    ga = 2.0 * s * diff_p - 2.0 * np.einsum("bk,bkd->bd", w, diff_n)
    gp = -2.0 * s * diff_p
    gn = 2.0 * w[:, :, None] * diff_n
    like = np.asarray(f)
    grads = _cast((ga, gp), like, single) + _cast((gn,), like, single)
    return LossResult(float(value.mean()), grads)


def reference_tuplet_loss(f, labels, refs) -> LossResult:
    """Tuplet loss against a shared reference set, one reference per class.

    The anchor's own-class reference is the positive and all others are the
    negatives, so the loss is cross-entropy of ``softmax(-D)`` where ``D`` are
    squared distances to the references.  Gradients are returned for ``f``
    ``(B, d)`` and ``refs`` ``(C, d)``.
    """
    a = np.asarray(f, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or r.ndim != 2 or a.shape[1] != r.shape[1]:
        raise DimensionError(f"shapes {a.shape} vs refs {r.shape}")
    if len(r) < 2:
        raise ValueError("need at least two references")
    B = len(a)
    d = sq_dist(a[:, None, :], r[None, :, :])  # (B, C)
    u = -d
    top = u.max(axis=1, keepdims=True)
    e = np.exp(u - top)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(B)
    value = (top[:, 0] + np.log(e.sum(axis=1)) - u[rows, labels]).mean()
    # A = d loss / d D  (batch-mean), rows sum to zero
    A = -p
    A[rows, labels] += 1.0
    A /= B
    ga = -2.0 * (A @ r)
    gr = -2.0 * (A.T @ a) + 2.0 * A.sum(axis=0)[:, None] * r
    return LossResult(float(value), (ga.astype(np.asarray(f).dtype), gr.astype(np.asarray(refs).dtype)))


def cross_entropy(logits, labels) -> LossResult:
    """Mean softmax cross-entropy; gradient is ``(softmax - onehot) / B``."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = z.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must be {B} class indices in [0, {C})")
    top = z.max(axis=1, keepdims=True)
    e = np.exp(z - top)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(B)
    value = (top[:, 0] + np.log(s[:, 0]) - z[rows, labels]).mean()
    g = e / s
    g[rows, labels] -= 1.0
    return LossResult(float(value), ((g / B).astype(np.asarray(logits).dtype),))
