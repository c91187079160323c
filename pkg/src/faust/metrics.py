"""Accuracy, per-layer Fisher separability, and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import LabeledDataset, _seed
from .model import stack_embeddings

FISHER_EPS = 1e-12
FISHER_SAMPLES = 1000


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == labels))


def scatter_traces(embeddings, labels) -> tuple[float, float]:
    """Return ``(tr(S_B), tr(S_W))`` for labelled embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("Fisher score needs at least two classes")
    mu = x.mean(axis=0)
    tr_b = tr_w = 0.0
    for c in classes:
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        tr_w += float(np.sum((xc - mc) ** 2))
        tr_b += len(xc) * float(np.sum((mc - mu) ** 2))
    return tr_b, tr_w


def fisher_score(embeddings, labels, eps: float = FISHER_EPS) -> float:
    """Trace ratio ``tr(S_B) / (tr(S_W) + eps)``."""
    tr_b, tr_w = scatter_traces(embeddings, labels)
    return tr_b / (tr_w + eps)


@dataclass
class FisherReport:
    scores: list
    between: list
    within: list
    sample_count: int

    def rows(self):
        return [(i + 1, f, b, w) for i, (f, b, w)
                in enumerate(zip(self.scores, self.between, self.within))]

    def table(self) -> str:
        lines = [f"{'layer':>5} {'F':>10} {'tr(S_B)':>14} {'tr(S_W)':>14}"]
        lines += [f"{i:>5} {f:>10.4f} {b:>14.6g} {w:>14.6g}" for i, f, b, w in self.rows()]
        return "\n".join(lines)


def _sample(ds, limit, rng_seed):
    n = len(ds)
    if limit is None or limit >= n:
        return np.arange(n)
    return _seed(rng_seed).choice(n, size=limit, replace=False)


def fisher_report(model, ds: LabeledDataset, sample_limit=FISHER_SAMPLES, rng_seed=0) -> FisherReport:
    idx = _sample(ds, sample_limit, rng_seed)
    layers = getattr(model, "layers", model)
    embs = stack_embeddings(layers, ds.images[idx])
    labels = ds.labels[idx]
    scores, between, within = [], [], []
    for e in embs:
        b, w = scatter_traces(e, labels)
        scores.append(b / (w + FISHER_EPS))
        between.append(b)
        within.append(w)
    return FisherReport(scores, between, within, len(idx))


def export_embeddings(model, ds: LabeledDataset, sample_limit, rng_seed, out_path) -> Path:
    """Write ``layer,label,e_0,...`` rows for up to ``sample_limit`` seeded samples.

    Layers are numbered from 1; values use 9 significant digits, enough to
    round-trip float32 exactly.
    """
    idx = _sample(ds, sample_limit, rng_seed)
    layers = getattr(model, "layers", model)
    embs = stack_embeddings(layers, ds.images[idx])
    d = embs[0].shape[1]
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "label"] + [f"e_{j}" for j in range(d)])
        for i, e in enumerate(embs, start=1):
            for label, row in zip(ds.labels[idx], e):
                w.writerow([i, int(label)] + [format(float(v), ".9g") for v in row])
    return out_path
