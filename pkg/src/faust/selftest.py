"""Built-in property suite: gradient checks, loss identities, pass-count audits
and synthetic convergence.  Needs no dataset files."""

from __future__ import annotations

import math
import time
import types
from dataclasses import dataclass

import numpy as np

from . import losses as _losses
from . import tensor as T
from .config import RunConfig
from .datasets import gaussian_blobs, embed_label_ff
from .gradcheck import REL_TOL, check, numeric_grad, rel_error
from .model import PassCounter, init_layers, layer_forward
from . import trainers

KINK = 1e-4
MIN_ROW_NORM = 0.05  # keep length normalization away from its singularity at 0


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _impl(impl):
    return impl if impl is not None else _losses


# -- tensor-core ------------------------------------------------------------

def normalize_backward_fd(n=100, impl=None):
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 7))
        g = rng.normal(size=(3, 7))
        y, norm = T.l2_normalize(x)
        worst = max(worst, rel_error(T.l2_normalize_backward(g, x, norm=norm),
                                     numeric_grad(lambda: float(np.sum(g * T.l2_normalize(x)[0])), x)))
        y, std = T.layer_norm(x)
        worst = max(worst, rel_error(T.layer_norm_backward(g, y, std),
                                     numeric_grad(lambda: float(np.sum(g * T.layer_norm(x)[0])), x)))
    return worst <= REL_TOL, f"max rel err {worst:.2e} over {n} seeds"


# -- losses -------------------------------------------------------------------

def _loss_fd(n, make, fn, names):
    """``names`` marks which inputs are differentiable (``None`` = constant);
    the loss returns one gradient per differentiable input, in order."""
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        inputs = make(rng)
        res = fn(*inputs)
        diff = [k for k, name in enumerate(names) if name is not None]
        for g, k in zip(res.grads, diff):
            x = inputs[k]
            num = numeric_grad(lambda: fn(*inputs).value, x)
            worst = max(worst, rel_error(g, num))
    return worst <= REL_TOL, f"max rel err {worst:.2e} over {n} instances"


def ff_loss_fd(n=100, impl=None):
    L = _impl(impl)

    def make(rng):
        return [rng.normal(2, 2, size=5), rng.normal(2, 2, size=5), float(rng.uniform(0.5, 4))]

    return _loss_fd(n, make, L.ff_loss, ["g_pos", "g_neg", None])


def triplet_loss_fd(n=100, impl=None):
    L = _impl(impl)

    def make(rng):
        while True:
            f, p, q = (rng.normal(size=(4, 5)) for _ in range(3))
            z = L.sq_dist(f, p) - L.sq_dist(f, q) + 0.2
            if np.all(np.abs(z) > 1e-3) and np.any(z > 0):
                return [f, p, q, 0.2]

    return _loss_fd(n, make, L.triplet_loss, ["f", "f_pos", "f_neg", None])


def tuplet_loss_fd(n=100, impl=None):
    L = _impl(impl)

    def make(rng):
        return [rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), rng.normal(size=(3, 4, 5))]

    return _loss_fd(n, make, L.tuplet_loss, ["f", "f_pos", "f_negs"])


def reference_tuplet_fd(n=100, impl=None):
    L = _impl(impl)

    def make(rng):
        return [rng.normal(size=(6, 5)), rng.integers(4, size=6), rng.normal(size=(4, 5))]

    return _loss_fd(n, make, L.reference_tuplet_loss, ["f", None, "refs"])


def cross_entropy_fd(n=100, impl=None):
    L = _impl(impl)

    def make(rng):
        return [rng.normal(scale=2, size=(5, 4)), rng.integers(4, size=5)]

    return _loss_fd(n, make, L.cross_entropy, ["logits", None])


def loss_identities(impl=None):
    L = _impl(impl)
    checks = {
        "ff symmetric": abs(L.ff_loss(2.0, 2.0, 2.0).value - math.log(2)) < 1e-12,
        "ff saturated": L.ff_loss(52.0, -48.0, 2.0).value < 1e-20,
        "triplet equal": abs(L.triplet_loss(np.ones(3), np.ones(3), np.ones(3), 0.2).value - 0.2) < 1e-12,
        "tuplet log10": abs(L.tuplet_loss(np.zeros(4), np.ones(4), np.ones((9, 4))).value
                            - math.log(10)) < 1e-12,
        "tuplet log2": abs(L.tuplet_loss(np.zeros(4), np.ones(4), np.ones((1, 4))).value
                           - math.log(2)) < 1e-12,
        "cross-entropy uniform": abs(L.cross_entropy(np.zeros((3, 10)), [0, 4, 9]).value
                                     - math.log(10)) < 1e-12,
    }
    bad = [k for k, ok in checks.items() if not ok]
    return not bad, "all hold" if not bad else f"failed: {', '.join(bad)}"


# -- layer-local backward -----------------------------------------------------

def _clean_layer(rng, d_in, d_out, d_emb, norm_mode, x_rows):
    """A float64 layer whose pre-activations stay away from the ReLU kink."""
    while True:
        layer = init_layers([d_in, d_out], d_emb, int(rng.integers(2**31)), norm_mode,
                            dtype=np.float64)[0]
        layer.b1[:] = rng.normal(scale=0.3, size=d_out)
        trace, _, _ = layer_forward(layer, x_rows)
        if (np.min(np.abs(trace.preact)) > KINK
                and np.min(np.linalg.norm(trace.activ, axis=1)) > MIN_ROW_NORM):
            return layer


def _emb(layer, x):
    return layer_forward(layer, x)[1]


def layer_objectives():
    """(name, builder) pairs; each builder returns ``(loss_fn, layer, analytic)``.

    ``loss_fn`` recomputes only the forward value; ``analytic`` comes from the
    trainer's per-layer function, so the two paths share no backward code.
    """

    def triplet(rng, norm_mode):
        B = 3
        x = rng.uniform(size=(3 * B, 5))
        layer = _clean_layer(rng, 5, 6, 3, norm_mode, x)

        def f():
            e = _emb(layer, x)
            return _losses.triplet_loss(e[:B], e[B:2 * B], e[2 * B:], 1.0).value
        return f, layer, trainers.triplet_layer(layer, x, B, alpha=1.0)[1]

    def tuplet(rng, norm_mode):
        B, K = 3, 2
        x = rng.uniform(size=((K + 2) * B, 5))
        layer = _clean_layer(rng, 5, 6, 3, norm_mode, x)

        def f():
            e = _emb(layer, x)
            return _losses.tuplet_loss(e[:B], e[B:2 * B], e[2 * B:].reshape(B, K, -1)).value
        return f, layer, trainers.tuplet_layer(layer, x, B)[1]

    def representative(rng, norm_mode):
        x = rng.uniform(size=(5, 5))
        r = rng.uniform(size=(3, 5))
        labels = rng.integers(3, size=5)
        layer = _clean_layer(rng, 5, 6, 3, norm_mode, np.concatenate([x, r]))

        def f():
            return _losses.reference_tuplet_loss(_emb(layer, x), labels, _emb(layer, r)).value
        return f, layer, trainers.representative_layer(layer, x, labels, r)[1]

    def ff(rng, norm_mode):
        B = 4
        x = rng.uniform(size=(B, 6))
        y = rng.integers(3, size=B)
        h = np.concatenate([embed_label_ff(x, y, 3, "pos"), embed_label_ff(x, y, 3, "neg", rng)])
        layer = _clean_layer(rng, 6, 6, None, norm_mode, h)

        def f():
            g = _losses.goodness(layer_forward(layer, h)[0].activ)
            return _losses.ff_loss(g[:B], g[B:], 0.5).value
        return f, layer, trainers.ff_layer(layer, h, B, theta=0.5)[1]

    return [("triplet", triplet), ("tuplet", tuplet), ("representative", representative), ("ff", ff)]


def layer_backward_fd(n=100, impl=None):
    worst, where = 0.0, ""
    for name, build in layer_objectives():
        for norm_mode in ("length", "layernorm"):
            for seed in range(n):
                f, layer, analytic = build(np.random.default_rng([seed, len(name)]), norm_mode)
                errs = check(f, layer.params(), analytic)
                e = max(errs.values())
                if e > worst:
                    worst, where = e, f"{name}/{norm_mode}"
    return worst <= REL_TOL, f"max rel err {worst:.2e} ({where}) over {n} seeds x 8 objectives"


def bp_end_to_end_fd(n=100, impl=None):
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(6, 4))
        labels = rng.integers(3, size=6)
        while True:
            layers = init_layers([4, 5], None, int(rng.integers(2**31)), dtype=np.float64)
            layers[0].b1[:] = rng.normal(scale=0.3, size=5)
            pre = layer_forward(layers[0], x)[0].preact
            if (np.min(np.abs(pre)) > KINK and np.all((pre > 0).sum(axis=1) >= 2)
                    and np.min(np.linalg.norm(np.maximum(pre, 0), axis=1)) > MIN_ROW_NORM):
                break
        head = trainers.Head.init(5, 3, rng, dtype=np.float64)
        _, head_g, layer_g = trainers.bp_gradients(layers, head, x, labels)
        f = lambda: trainers.bp_gradients(layers, head, x, labels)[0]
        errs = check(f, {**layers[0].params(), "W": head.W, "b": head.b},
                     {**layer_g[0], **head_g})
        worst = max(worst, max(errs.values()))
    return worst <= REL_TOL, f"max rel err {worst:.2e} over {n} seeds"


# -- complexity audit ---------------------------------------------------------

def measure_passes(variant, B=8, C=3, layers=2):
    """Per-layer sample evaluations for one training batch of ``variant``."""
    ds = gaussian_blobs(max(60, 2 * B), 12, C, rng_seed=0)
    d_emb = None if variant in ("ff", "bp") else 4
    net = init_layers([ds.input_dim] + [6] * layers, d_emb, 0)
    counter = PassCounter(layers)
    idx = np.arange(B)
    rng = np.random.default_rng(0)
    if variant == "faust_triplet":
        trainers.triplet_step(net, ds, idx, rng, counter=counter)
    elif variant == "faust_tuplet":
        trainers.tuplet_step(net, ds, idx, rng, counter=counter)
    elif variant == "faust_representative":
        reps = ds.images[[m[0] for m in ds.class_index]]
        trainers.representative_step(net, ds.images[idx], ds.labels[idx], reps, counter)
    elif variant == "ff":
        trainers.ff_step(net, ds.images[idx], ds.labels[idx], C, rng, counter=counter)
    else:
        head = trainers.Head.init(net[-1].d_next, C, rng)
        trainers.bp_step(net, head, ds.images[idx], ds.labels[idx], counter)
    return counter.per_layer


def expected_passes(variant, B, C):
    return {"ff": 2 * B, "faust_triplet": 3 * B, "faust_tuplet": (C + 1) * B,
            "faust_representative": B + C, "bp": B}[variant]


def pass_count_audit(impl=None):
    bad = []
    for variant in ("ff", "faust_triplet", "faust_tuplet", "faust_representative"):
        for B, C in ((8, 3), (5, 4)):
            got = measure_passes(variant, B, C)
            if any(g != expected_passes(variant, B, C) for g in got):
                bad.append(f"{variant} B={B} C={C}: {got}")
    return not bad, "2B / 3B / (C+1)B / B+C exact" if not bad else "; ".join(bad)


# -- convergence --------------------------------------------------------------

def blob_convergence(impl=None, epochs=50):
    ds = gaussian_blobs(400, 20, 2, rng_seed=0)
    reached = {}
    for variant in ("faust_triplet", "faust_tuplet", "faust_representative", "ff", "bp"):
        cfg = RunConfig(variant=variant, arch=[16, 16, 16], d_emb=8, epochs=epochs,
                        batch_size=32, log_wallclock=False)
        logs = trainers.train(cfg, ds, None).logs
        hit = [l.epoch for l in logs if l.train_acc >= 0.99]
        reached[variant] = hit[0] if hit else None
    bad = [v for v, e in reached.items() if e is None]
    detail = ", ".join(f"{v}@{e}" for v, e in reached.items())
    return not bad, f"epoch reaching 99% train acc: {detail}"


PROPERTIES = [
    ("normalization backward matches finite differences", normalize_backward_fd),
    ("ff_loss gradient matches finite differences", ff_loss_fd),
    ("triplet_loss gradient matches finite differences", triplet_loss_fd),
    ("tuplet_loss gradient matches finite differences", tuplet_loss_fd),
    ("reference tuplet gradient matches finite differences", reference_tuplet_fd),
    ("cross_entropy gradient matches finite differences", cross_entropy_fd),
    ("loss identities", loss_identities),
    ("layer-local backward matches finite differences", layer_backward_fd),
    ("end-to-end BP gradient matches finite differences", bp_end_to_end_fd),
    ("forward-pass counts per layer per batch", pass_count_audit),
    ("2-class blobs reach 99% train accuracy within 50 epochs", blob_convergence),
]


def run(impl=None, names=None, quick=False, stream=None):
    """Run the property suite; returns a list of :class:`PropertyResult`."""
    results = []
    for name, fn in PROPERTIES:
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        kwargs = {"impl": impl}
        if quick and "n" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
            kwargs["n"] = 10
        try:
            ok, detail = fn(**kwargs)
        except Exception as exc:  # a crashing property is a failing property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = PropertyResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if stream is not None:
            print(f"[{'PASS' if res.passed else 'FAIL'}] {name}: {detail} ({res.seconds:.1f}s)",
                  file=stream, flush=True)
    return results


def mutated_losses(**overrides):
    """A copy of the loss module with some functions replaced (for mutation tests)."""
    ns = types.SimpleNamespace(**{k: getattr(_losses, k) for k in dir(_losses) if not k.startswith("__")})
    for k, v in overrides.items():
        setattr(ns, k, v)
    return ns
