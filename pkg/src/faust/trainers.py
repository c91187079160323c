"""Epoch loops for the three similarity variants and the FF / BP baselines.

All layers learn simultaneously: within a batch, layer ``i`` runs forward,
computes its own loss on its own output, takes an Adam step, and hands its
pre-update (detached) output to layer ``i + 1``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .datasets import (LabeledDataset, RepresentativeSet, batches, embed_label_ff,
                       sample_triplets, sample_tuplets, select_representatives, _seed)
from .inference import build_centroids, build_representative_refs, classify, classify_ff
from .losses import cross_entropy, ff_loss, goodness, reference_tuplet_loss, triplet_loss, tuplet_loss
from .metrics import accuracy
from .model import (Network, PassCounter, apply_update, init_layers, layer_backward,
                    layer_forward)

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    layer_losses: list
    train_acc: float
    test_acc: float
    forward_passes: int
    seconds: float

    def row(self):
        return ([self.epoch] + [f"{v:.9g}" for v in self.layer_losses]
                + [f"{self.train_acc:.6f}", f"{self.test_acc:.6f}", self.forward_passes,
                   f"{self.seconds:.3f}"])


def csv_header(num_layers):
    return (["epoch"] + [f"loss_{i}" for i in range(1, num_layers + 1)]
            + ["train_acc", "test_acc", "forward_passes", "seconds"])


@dataclass
class TrainResult:
    network: Network
    logs: list = field(default_factory=list)
    counter: PassCounter = field(default_factory=PassCounter)
    references: object = None


def _accumulate(total, grads):
    for k, g in grads.items():
        total[k] = g if k not in total else total[k] + g
    return total


# -- per-layer objectives ---------------------------------------------------
#
# Each returns (loss, parameter gradients, detached output for the next layer)
# without touching the parameters.

def triplet_layer(layer, x, B, alpha=0.2, counter=None, index=0):
    """``x`` stacks anchors, positives, negatives (3B rows)."""
    trace, emb, nxt = layer_forward(layer, x)
    if counter is not None:
        counter.add(index, len(x))
    res = triplet_loss(emb[:B], emb[B:2 * B], emb[2 * B:], alpha)
    return res.value, layer_backward(layer, trace, np.concatenate(res.grads)), nxt


def tuplet_layer(layer, x, B, counter=None, index=0):
    """``x`` stacks B anchors, B positives, then the B*K negatives anchor-major."""
    trace, emb, nxt = layer_forward(layer, x)
    if counter is not None:
        counter.add(index, len(x))
    K = (len(x) - 2 * B) // B
    res = tuplet_loss(emb[:B], emb[B:2 * B], emb[2 * B:].reshape(B, K, -1))
    ga, gp, gn = res.grads
    grads = layer_backward(layer, trace, np.concatenate([ga, gp, gn.reshape(B * K, -1)]))
    return res.value, grads, nxt


def representative_layer(layer, x, labels, r, detach_reps=False, counter=None, index=0):
    """Score a batch against the layer's freshly cached representative embeddings.

    Returns ``(loss, grads, next_x, next_r)``.
    """
    rep_trace, rep_emb, rep_next = layer_forward(layer, r)
    trace, emb, nxt = layer_forward(layer, x)
    if counter is not None:
        counter.add(index, len(r) + len(x))
    res = reference_tuplet_loss(emb, labels, rep_emb)
    g_anchor, g_reps = res.grads
    grads = layer_backward(layer, trace, g_anchor)
    if not detach_reps:
        _accumulate(grads, layer_backward(layer, rep_trace, g_reps))
    return res.value, grads, nxt, rep_next


def ff_layer(layer, h, B, theta=2.0, counter=None, index=0):
    """``h`` stacks B positive rows then B negative rows; goodness on post-ReLU activity."""
    trace, _, nxt = layer_forward(layer, h)
    if counter is not None:
        counter.add(index, len(h))
    g = goodness(trace.activ)
    res = ff_loss(g[:B], g[B:], theta)
    dg = np.concatenate(res.grads)
    grads = layer_backward(layer, trace, grad_activ=2.0 * trace.activ * dg[:, None])
    return res.value, grads, nxt


# -- one-batch steps --------------------------------------------------------

def triplet_step(layers, ds, anchor_idx, rng, alpha=0.2, counter=None):
    """Returns the per-layer triplet losses for one batch."""
    batch = sample_triplets(ds, len(anchor_idx), rng, anchors=anchor_idx)
    B = len(anchor_idx)
    x = np.concatenate([batch.anchors, batch.positives, batch.negatives])
    losses = []
    for i, layer in enumerate(layers):
        loss, grads, x = triplet_layer(layer, x, B, alpha, counter, i)
        apply_update(layer, grads)
        losses.append(loss)
    return losses


def tuplet_step(layers, ds, anchor_idx, rng, counter=None):
    """Anchor, positive and one negative per other class; (C+1)B rows per layer."""
    batch = sample_tuplets(ds, len(anchor_idx), rng, anchors=anchor_idx)
    B, K = batch.negative_idx.shape
    x = np.concatenate([batch.anchors, batch.positives, batch.negatives.reshape(B * K, -1)])
    losses = []
    for i, layer in enumerate(layers):
        loss, grads, x = tuplet_layer(layer, x, B, counter, i)
        apply_update(layer, grads)
        losses.append(loss)
    return losses


def representative_step(layers, x, labels, reps, counter=None, detach_reps=False):
    """One batch of representative-tuplet training (B + C rows per layer).

    Per layer the C representatives are forwarded once and their embeddings
    cached; every anchor is scored against that cache (own class positive,
    other classes negative).  Unless ``detach_reps`` is set, the loss gradient
    also flows through the representatives' forward pass.
    """
    r = reps.images if isinstance(reps, RepresentativeSet) else reps
    losses = []
    for i, layer in enumerate(layers):
        loss, grads, x, r = representative_layer(layer, x, labels, r, detach_reps, counter, i)
        apply_update(layer, grads)
        losses.append(loss)
    return losses


def ff_step(layers, x, labels, num_classes, rng, theta=2.0, counter=None):
    """Positive (true label) and negative (wrong label) copies; 2B rows per layer."""
    B = len(x)
    pos = embed_label_ff(x, labels, num_classes, "pos")
    neg = embed_label_ff(x, labels, num_classes, "neg", rng)
    h = np.concatenate([pos, neg])
    losses = []
    for i, layer in enumerate(layers):
        loss, grads, h = ff_layer(layer, h, B, theta, counter, i)
        apply_update(layer, grads)
        losses.append(loss)
    return losses


@dataclass
class Head:
    """Linear classifier on top of the BP trunk."""

    W: np.ndarray
    b: np.ndarray
    adam: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, d_in, num_classes, rng, lr=1e-3, dtype=T.DEFAULT_DTYPE):
        bound = np.sqrt(1.0 / d_in)
        head = cls(rng.uniform(-bound, bound, size=(num_classes, d_in)).astype(dtype),
                   np.zeros(num_classes, dtype=dtype))
        head.adam = {"W": T.AdamState.like(head.W, lr=lr), "b": T.AdamState.like(head.b, lr=lr)}
        return head


def bp_logits(layers, head, x, counter=None):
    traces = []
    for i, layer in enumerate(layers):
        trace, _, x = layer_forward(layer, x)
        if counter is not None:
            counter.add(i, len(x))
        traces.append(trace)
    return T.matmul(x, head.W.T) + head.b, traces


def bp_gradients(layers, head, x, labels, counter=None):
    """End-to-end cross-entropy gradients: ``(loss, head_grads, [layer_grads...])``."""
    logits, traces = bp_logits(layers, head, x, counter)
    res = cross_entropy(logits, labels)
    dlogits, = res.grads
    top = traces[-1].normed
    head_grads = {"W": T.matmul(dlogits.T, top), "b": dlogits.sum(axis=0).astype(head.b.dtype)}
    g = T.matmul(dlogits, head.W)
    layer_grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        grads = layer_backward(layers[i], traces[i], grad_normed=g, input_grad=True)
        g = grads.pop("x")
        layer_grads[i] = grads
    return res.value, head_grads, layer_grads


def bp_step(layers, head, x, labels, counter=None):
    loss, head_grads, layer_grads = bp_gradients(layers, head, x, labels, counter)
    for layer, grads in zip(layers, layer_grads):
        apply_update(layer, grads)
    T.adam_step(head.W, head_grads["W"], head.adam["W"])
    T.adam_step(head.b, head_grads["b"], head.adam["b"])
    return [loss]


def bp_predict(layers, head, x, chunk=4096):
    out = []
    for s in range(0, len(x), chunk):
        logits, _ = bp_logits(layers, head, x[s:s + chunk])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- evaluation -------------------------------------------------------------

def evaluate(net: Network, train_ds: LabeledDataset, eval_sets, cfg: RunConfig, refs=None):
    """Accuracy on each dataset in ``eval_sets`` using the variant's own inference.

    Returns ``(accuracies, references)``.
    """
    layers = net.layers
    if net.variant in ("faust_triplet", "faust_tuplet") and refs is None:
        refs = build_centroids(layers, train_ds, cfg.centroid_k, cfg.seeds.eval)
    elif net.variant == "faust_representative" and refs is None:
        refs = build_representative_refs(layers, net.representatives)
    accs = []
    for ds in eval_sets:
        if ds is None or len(ds) == 0:
            accs.append(float("nan"))
            continue
        if net.variant == "ff":
            preds = classify_ff(layers, ds.images, net.num_classes)
        elif net.variant == "bp":
            preds = bp_predict(layers, Head(net.head_W, net.head_b), ds.images)
        else:
            preds = classify(layers, refs, ds.images, squared=cfg.squared_inference)
        accs.append(accuracy(preds, ds.labels))
    return accs, refs


def _train_subset(ds, limit, seed):
    if limit is None or limit >= len(ds):
        return ds
    idx = np.sort(_seed(seed).choice(len(ds), size=limit, replace=False))
    return ds.subset(idx)


# -- epoch loop -------------------------------------------------------------

def train(cfg: RunConfig, ds: LabeledDataset, test_ds: LabeledDataset | None = None,
          log_path=None, evaluate_every_epoch: bool = True) -> TrainResult:
    """Train ``cfg.variant`` on ``ds``; optionally stream EpochLog rows to ``log_path``."""
    C = ds.num_classes
    if C < 2:
        raise ValueError("training needs at least two classes")
    ds.check_nonempty_classes()
    variant = cfg.variant
    similarity = variant.startswith("faust")
    d_emb = cfg.d_emb if similarity else None
    if variant == "ff" and ds.input_dim < C:
        raise ValueError(f"FF needs input width >= {C}")
    layers = init_layers([ds.input_dim] + list(cfg.arch), d_emb, cfg.seeds.init,
                         cfg.norm_mode, cfg.forward_source, lr=cfg.lr)
    net = Network(variant, layers, C, meta={"seeds": vars(cfg.seeds).copy()})
    head = None
    if variant == "bp":
        head = Head.init(layers[-1].d_next, C, np.random.default_rng([cfg.seeds.init, 1]), lr=cfg.lr)
        net.head_W, net.head_b = head.W, head.b
    reps = None
    if variant == "faust_representative":
        reps = select_representatives(ds, cfg.representative_strategy, cfg.seeds.representatives)
        net.representatives = reps.images
        net.meta["representative_indices"] = [int(i) for i in reps.indices]

    counter = PassCounter(len(layers))
    result = TrainResult(net, [], counter)
    train_eval = _train_subset(ds, cfg.eval_train_limit, cfg.seeds.eval)
    writer = f = None
    if log_path is not None:
        f = open(log_path, "w", newline="")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(csv_header(len(layers)))
        f.flush()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            totals = np.zeros(len(layers) if variant != "bp" else 1)
            order = batches(len(ds), cfg.batch_size, [cfg.seeds.sampling, epoch])
            for b, idx in enumerate(order):
                rng = np.random.default_rng([cfg.seeds.sampling, epoch, b])
                if variant == "faust_triplet":
                    losses = triplet_step(layers, ds, idx, rng, cfg.alpha, counter)
                elif variant == "faust_tuplet":
                    losses = tuplet_step(layers, ds, idx, rng, counter)
                elif variant == "faust_representative":
                    losses = representative_step(layers, ds.images[idx], ds.labels[idx], reps,
                                                 counter, cfg.detach_representatives)
                elif variant == "ff":
                    losses = ff_step(layers, ds.images[idx], ds.labels[idx], C, rng, cfg.theta, counter)
                else:
                    losses = bp_step(layers, head, ds.images[idx], ds.labels[idx], counter)
                totals += losses
            mean_losses = list(totals / max(len(order), 1))
            if evaluate_every_epoch or epoch == cfg.epochs:
                (train_acc, test_acc), refs = evaluate(net, ds, [train_eval, test_ds], cfg)
                result.references = refs
            else:
                train_acc = test_acc = float("nan")
            seconds = time.perf_counter() - t0 if cfg.log_wallclock else 0.0
            entry = EpochLog(epoch, mean_losses, train_acc, test_acc, counter.network_passes, seconds)
            result.logs.append(entry)
            log.info("epoch %d losses %s train %.4f test %.4f (%.1fs)", epoch,
                     " ".join(f"{v:.4f}" for v in mean_losses), train_acc, test_acc, seconds)
            if writer is not None:
                writer.writerow(entry.row())
                f.flush()
    finally:
        if f is not None:
            f.close()
    if result.references is None and variant.startswith("faust"):
        _, result.references = evaluate(net, ds, [], cfg)
    return result


def train_faust_triplet(cfg, ds, test_ds=None, log_path=None):
    return train(_as_variant(cfg, "faust_triplet"), ds, test_ds, log_path)


def train_faust_tuplet(cfg, ds, test_ds=None, log_path=None):
    return train(_as_variant(cfg, "faust_tuplet"), ds, test_ds, log_path)


def train_faust_representative(cfg, ds, test_ds=None, log_path=None):
    return train(_as_variant(cfg, "faust_representative"), ds, test_ds, log_path)


def train_ff(cfg, ds, test_ds=None, log_path=None):
    return train(_as_variant(cfg, "ff"), ds, test_ds, log_path)


def train_bp(cfg, ds, test_ds=None, log_path=None):
    return train(_as_variant(cfg, "bp"), ds, test_ds, log_path)


def _as_variant(cfg, variant):
    if cfg.variant == variant:
        return cfg
    return dataclasses.replace(cfg, variant=variant)
