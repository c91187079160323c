"""Stack of independently trained layers.

Each layer is ``x -> ReLU(W1 x + b1) -> normalize -> W2 (.)`` and owns its
optimizer state.  The next layer receives the normalized activation (or, with
``forward_source="embedding"``, the embedding) as a plain array, so no
gradient ever crosses a layer boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import AdamState, DimensionError

CHECKPOINT_VERSION = 1
NORM_MODES = ("length", "layernorm")
FORWARD_SOURCES = ("activation", "embedding")


class CheckpointError(Exception):
    pass


@dataclass
class LocalLayer:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None
    norm_mode: str = "length"
    forward_source: str = "activation"
    adam: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.forward_source not in FORWARD_SOURCES:
            raise ValueError(f"forward_source must be one of {FORWARD_SOURCES}")
        if self.forward_source == "embedding" and self.W2 is None:
            raise ValueError("forward_source='embedding' needs an embedding projection")

    @property
    def d_in(self):
        return self.W1.shape[1]

    @property
    def d_out(self):
        return self.W1.shape[0]

    @property
    def d_emb(self):
        return None if self.W2 is None else self.W2.shape[0]

    @property
    def d_next(self):
        return self.d_emb if self.forward_source == "embedding" else self.d_out

    def params(self) -> dict:
        p = {"W1": self.W1, "b1": self.b1}
        if self.W2 is not None:
            p["W2"] = self.W2
        return p

    def reset_optimizer(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.adam = {k: AdamState.like(v, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
                     for k, v in self.params().items()}

    def copy(self) -> "LocalLayer":
        return LocalLayer(self.W1.copy(), self.b1.copy(),
                          None if self.W2 is None else self.W2.copy(),
                          self.norm_mode, self.forward_source)


@dataclass
class LayerForwardTrace:
    input: np.ndarray
    preact: np.ndarray
    relu_mask: np.ndarray
    activ: np.ndarray
    normed: np.ndarray
    norm: np.ndarray  # row L2 norms (length mode) or row std (layernorm mode)
    embedding: np.ndarray | None


def _normalize(layer, activ):
    if layer.norm_mode == "length":
        return T.l2_normalize(activ)
    return T.layer_norm(activ)


def _normalize_backward(layer, grad, trace):
    if layer.norm_mode == "length":
        return T.l2_normalize_backward(grad, trace.activ, norm=trace.norm)
    return T.layer_norm_backward(grad, trace.normed, trace.norm)


def layer_forward(layer: LocalLayer, x: np.ndarray):
    """Run one layer on a batch.

    Returns ``(trace, embedding, next_input)``; ``embedding`` is ``None`` for
    layers without a projection.
    """
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise DimensionError(f"layer expects width {layer.d_in}, got input {x.shape}")
    preact = T.matmul(x, layer.W1.T) + layer.b1
    activ, mask = T.relu(preact)
    normed, norm = _normalize(layer, activ)
    emb = None if layer.W2 is None else T.matmul(normed, layer.W2.T)
    trace = LayerForwardTrace(x, preact, mask, activ, normed, norm, emb)
    nxt = emb if layer.forward_source == "embedding" else normed
    return trace, emb, nxt


def layer_backward(layer: LocalLayer, trace: LayerForwardTrace, grad_embedding=None,
                   grad_activ=None, grad_normed=None, input_grad=False) -> dict:
    """Chain rule from a local loss back to this layer's parameters.

    The loss gradient may arrive on the embedding, the post-ReLU activation
    (goodness objectives) or the normalized output (end-to-end training).
    Returns ``{"W1", "b1", "W2"}`` gradients, plus ``"x"`` when ``input_grad``.
    """
    n = len(trace.input)
    grads = {}
    g_norm = None if grad_normed is None else np.asarray(grad_normed, dtype=np.float64)
    if grad_embedding is not None:
        if layer.W2 is None:
            raise ValueError("layer has no embedding projection")
        if grad_embedding.shape != (n, layer.d_emb):
            raise DimensionError(f"embedding grad {grad_embedding.shape} vs batch {n}x{layer.d_emb}")
        grads["W2"] = T.matmul(grad_embedding.T, trace.normed)
        g = T.matmul(grad_embedding, layer.W2)
        g_norm = g if g_norm is None else g_norm + g
    elif layer.W2 is not None:
        grads["W2"] = np.zeros_like(layer.W2)
    g_activ = np.zeros_like(trace.activ, dtype=np.float64)
    if g_norm is not None:
        if g_norm.shape != trace.normed.shape:
            raise DimensionError(f"grad {g_norm.shape} vs normalized output {trace.normed.shape}")
        g_activ = g_activ + _normalize_backward(layer, g_norm, trace)
    if grad_activ is not None:
        if grad_activ.shape != trace.activ.shape:
            raise DimensionError(f"activation grad {grad_activ.shape} vs {trace.activ.shape}")
        g_activ = g_activ + grad_activ
    g_pre = (g_activ * trace.relu_mask).astype(layer.W1.dtype)
    grads["W1"] = T.matmul(g_pre.T, trace.input)
    grads["b1"] = g_pre.sum(axis=0, dtype=np.float64).astype(layer.b1.dtype)
    if input_grad:
        grads["x"] = T.matmul(g_pre, layer.W1)
    return grads


def apply_update(layer: LocalLayer, grads: dict):
    """Adam step on every parameter of ``layer`` that has a gradient."""
    if not layer.adam:
        layer.reset_optimizer()
    for name, param in layer.params().items():
        if name in grads:
            T.adam_step(param, grads[name], layer.adam[name])


class PassCounter:
    """Per-layer count of sample evaluations (one row through one layer = 1)."""

    def __init__(self, num_layers: int = 0):
        self.per_layer = [0] * num_layers

    def add(self, layer_index: int, n: int):
        while len(self.per_layer) <= layer_index:
            self.per_layer.append(0)
        self.per_layer[layer_index] += int(n)

    @property
    def network_passes(self) -> int:
        """Samples pushed through the whole stack (the first layer's count)."""
        return self.per_layer[0] if self.per_layer else 0

    def reset(self):
        self.per_layer = [0] * len(self.per_layer)


def stack_forward(layers, x: np.ndarray, counter: PassCounter | None = None):
    """Forward a batch through every layer.

    Returns ``(embeddings, traces)``, one entry per layer.
    """
    embeddings, traces = [], []
    for i, layer in enumerate(layers):
        trace, emb, x = layer_forward(layer, x)
        if counter is not None:
            counter.add(i, len(trace.input))
        embeddings.append(emb)
        traces.append(trace)
    return embeddings, traces


def stack_embeddings(layers, x: np.ndarray, counter=None, chunk: int = 4096):
    """Per-layer embeddings for a possibly large input, computed in chunks."""
    if any(l.W2 is None for l in layers):
        raise ValueError("layers without an embedding projection have no embeddings")
    parts = [[] for _ in layers]
    for start in range(0, len(x), chunk):
        embs, _ = stack_forward(layers, x[start:start + chunk], counter)
        for store, e in zip(parts, embs):
            store.append(e)
    return [np.concatenate(p) if p else np.zeros((0, l.d_emb or 0)) for p, l in zip(parts, layers)]


def init_layers(arch, d_emb, rng_seed, norm_mode="length", forward_source="activation",
                lr=1e-3, dtype=T.DEFAULT_DTYPE) -> list[LocalLayer]:
    """Uniform fan-in initialization: ``U(-sqrt(1/fan_in), sqrt(1/fan_in))``, zero bias.

    Args:
        arch: ``[d_in, d_1, ..., d_L]``.
        d_emb: embedding width, or ``None`` for layers without a projection.
    """
    if len(arch) < 2 or any(int(d) <= 0 for d in arch) or (d_emb is not None and d_emb <= 0):
        raise ValueError(f"invalid architecture {arch} / d_emb {d_emb}")
    rng = np.random.default_rng(rng_seed)
    layers = []
    d_in = int(arch[0])
    for d_out in arch[1:]:
        d_out = int(d_out)
        bound = np.sqrt(1.0 / d_in)
        W1 = rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype)
        W2 = None
        if d_emb is not None:
            b2 = np.sqrt(1.0 / d_out)
            W2 = rng.uniform(-b2, b2, size=(d_emb, d_out)).astype(dtype)
        layer = LocalLayer(W1, np.zeros(d_out, dtype=dtype), W2, norm_mode, forward_source)
        layer.reset_optimizer(lr=lr)
        layers.append(layer)
        d_in = layer.d_next
    return layers


@dataclass
class Network:
    """Trained artifact: layer stack plus whatever the variant needs at inference."""

    variant: str
    layers: list
    num_classes: int
    head_W: np.ndarray | None = None  # BP classifier head (C x d_L)
    head_b: np.ndarray | None = None
    representatives: np.ndarray | None = None  # (C x input_dim), representative variant
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.layers[0].d_in

    @property
    def num_layers(self):
        return len(self.layers)


def save_checkpoint(net: Network, path):
    """Write ``net`` to an ``.npz`` container (weights stored bit-exactly)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "variant": net.variant,
        "num_classes": net.num_classes,
        "arch": [net.layers[0].d_in] + [l.d_out for l in net.layers],
        "d_emb": net.layers[0].d_emb,
        "norm_mode": net.layers[0].norm_mode,
        "forward_source": net.layers[0].forward_source,
        "meta": net.meta,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, layer in enumerate(net.layers):
        for name, p in layer.params().items():
            arrays[f"layer{i}.{name}"] = p
    for name in ("head_W", "head_b", "representatives"):
        if getattr(net, name) is not None:
            arrays[name] = getattr(net, name)
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path) -> Network:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in data:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(data.pop("meta").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    layers = []
    for i in range(len(meta["arch"]) - 1):
        W2 = data.get(f"layer{i}.W2")
        layers.append(LocalLayer(data[f"layer{i}.W1"], data[f"layer{i}.b1"], W2,
                                 meta["norm_mode"], meta["forward_source"]))
    return Network(meta["variant"], layers, meta["num_classes"],
                   data.get("head_W"), data.get("head_b"), data.get("representatives"),
                   meta.get("meta", {}))
