"""Single-pass nearest-reference classification and the C-pass goodness baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LabeledDataset, RepresentativeSet, embed_label_ff, _seed
from .losses import goodness
from .model import stack_embeddings, stack_forward

DEFAULT_CENTROID_K = 100


@dataclass
class ReferenceSet:
    """``refs[i][c]`` is the reference embedding of class ``c`` at layer ``i``."""

    refs: list
    kind: str
    sample_count: int | None = None

    @property
    def num_layers(self):
        return len(self.refs)

    @property
    def num_classes(self):
        return len(self.refs[0])


def _layers(model):
    return getattr(model, "layers", model)


def build_centroids(model, ds: LabeledDataset, k: int = DEFAULT_CENTROID_K,
                    rng_seed=0) -> ReferenceSet:
    """Average the per-layer embeddings of ``k`` seeded samples from each class.

    Classes with fewer than ``k`` members are sampled with replacement.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ds.check_nonempty_classes()
    rng = _seed(rng_seed)
    picks = []
    for members in ds.class_index:
        replace = len(members) < k
        picks.append(rng.choice(members, size=k, replace=replace))
    idx = np.concatenate(picks)
    embs = stack_embeddings(_layers(model), ds.images[idx])
    C = ds.num_classes
    refs = [e.astype(np.float64).reshape(C, k, -1).mean(axis=1) for e in embs]
    return ReferenceSet(refs, "centroid", k)


def build_representative_refs(model, reps) -> ReferenceSet:
    """Embeddings of the representative images, stored verbatim per layer."""
    images = reps.images if isinstance(reps, RepresentativeSet) else np.asarray(reps)
    embs, _ = stack_forward(_layers(model), images)
    return ReferenceSet([e.copy() for e in embs], "representative")


def _check_subset(layer_subset, num_layers):
    subset = sorted(set(int(i) for i in layer_subset)) if layer_subset is not None \
        else list(range(1, num_layers + 1))
    if not subset:
        raise ValueError("layer subset must not be empty")
    if subset[0] < 1 or subset[-1] > num_layers:
        raise ValueError(f"layer subset {subset} outside 1..{num_layers}")
    return subset


def reference_scores(embeddings, refs: ReferenceSet, layer_subset=None, squared=False):
    """Sum over the chosen layers (1-based) of distances to every class reference.

    Returns an ``(N, C)`` score matrix.
    """
    subset = _check_subset(layer_subset, refs.num_layers)
    scores = None
    for i in subset:
        e = np.asarray(embeddings[i - 1], dtype=np.float64)
        r = np.asarray(refs.refs[i - 1], dtype=np.float64)
        diff = e[:, None, :] - r[None, :, :]
        d = np.einsum("ncd,ncd->nc", diff, diff)
        if not squared:
            d = np.sqrt(d)
        scores = d if scores is None else scores + d
    return scores


def classify(model, refs: ReferenceSet, x: np.ndarray, layer_subset=None, squared=False,
             counter=None, chunk: int = 2048, return_scores=False):
    """Predict the class whose references are nearest, summed over ``layer_subset``.

    Ties resolve to the smallest class index.
    """
    layers = _layers(model)
    subset = _check_subset(layer_subset, len(layers))
    preds, best = [], []
    for start in range(0, len(x), chunk):
        embs, _ = stack_forward(layers, x[start:start + chunk], counter)
        s = reference_scores(embs, refs, subset, squared)
        p = np.argmin(s, axis=1)
        preds.append(p)
        best.append(s[np.arange(len(p)), p])
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    if return_scores:
        return preds, np.concatenate(best) if best else np.zeros(0)
    return preds


def classify_ff(model, x: np.ndarray, num_classes: int, counter=None, chunk: int = 2048,
                return_scores=False):
    """Try every one-hot label and pick the one with the largest summed goodness.

    Goodness is taken on each layer's post-ReLU activation; ties go to the
    smallest class index.
    """
    layers = _layers(model)
    preds, best = [], []
    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk]
        total = np.zeros((len(xb), num_classes))
        for c in range(num_classes):
            labelled = embed_label_ff(xb, np.full(len(xb), c), num_classes, "pos")
            _, traces = stack_forward(layers, labelled, counter)
            total[:, c] = sum(goodness(t.activ) for t in traces)
        p = np.argmax(total, axis=1)
        preds.append(p)
        best.append(total[np.arange(len(p)), p])
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    if return_scores:
        return preds, np.concatenate(best) if best else np.zeros(0)
    return preds
