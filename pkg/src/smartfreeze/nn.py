"""Minimal differentiable network substrate.

Layer vocabulary: dense, conv2d, relu, maxpool2x2, flatten.  Everything is
float64, NCHW for images.  The backward pass honours a per-layer trainable
mask and stops at the first trainable layer, so frozen prefixes cost a
forward pass only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, InputError
from .kernels import conv2d_backward, conv2d_forward

KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten")
PARAMETERIZED = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  dims: dense -> (in, out); conv2d -> (in_ch, out_ch, kernel,
    stride, pad); relu/maxpool2x2/flatten -> ()."""

    kind: str
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        want = {"dense": 2, "conv2d": 5, "relu": 0, "maxpool2x2": 0, "flatten": 0}
        if len(self.dims) != want[self.kind]:
            raise ConfigurationError(
                f"{self.kind} expects {want[self.kind]} dims, got {self.dims}"
            )

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED


def out_shape(layer: LayerSpec, in_shape: tuple, index: int = -1) -> tuple:
    """Per-sample output shape of one layer given its per-sample input shape."""
    k = layer.kind
    if k == "dense":
        fin, fout = layer.dims
        if in_shape != (fin,):
            raise ConfigurationError(
                f"layer {index}: dense expects ({fin},), got {in_shape}"
            )
        return (fout,)
    if k == "conv2d":
        c_in, c_out, ker, stride, pad = layer.dims
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ConfigurationError(
                f"layer {index}: conv2d expects ({c_in},H,W), got {in_shape}"
            )
        _, h, w = in_shape
        ho = (h + 2 * pad - ker) // stride + 1
        wo = (w + 2 * pad - ker) // stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"layer {index}: conv2d output collapses on {in_shape}")
        return (c_out, ho, wo)
    if k == "maxpool2x2":
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ConfigurationError(
                f"layer {index}: maxpool2x2 needs even (C,H,W), got {in_shape}"
            )
        c, h, w = in_shape
        return (c, h // 2, w // 2)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    return in_shape  # relu


def infer_shapes(layers: list[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Per-sample output shape of every layer; raises if shapes don't compose."""
    shapes = []
    cur = tuple(input_shape)
    for i, layer in enumerate(layers):
        cur = out_shape(layer, cur, i)
        shapes.append(cur)
    return shapes


def param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    if layer.kind == "dense":
        fin, fout = layer.dims
        return {"W": (fin, fout), "b": (fout,)}
    if layer.kind == "conv2d":
        c_in, c_out, ker, _, _ = layer.dims
        return {"W": (c_out, c_in, ker, ker), "b": (c_out,)}
    return {}


def param_count(layer: LayerSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(layer).values())


def init_params(layers: list[LayerSpec], rng: np.random.Generator) -> list[dict | None]:
    """He-uniform weights, zero biases; one dict per layer (None if stateless)."""
    params: list[dict | None] = []
    for layer in layers:
        if not layer.parameterized:
            params.append(None)
            continue
        shapes = param_shapes(layer)
        if layer.kind == "dense":
            fan_in = layer.dims[0]
        else:
            c_in, _, ker, _, _ = layer.dims
            fan_in = c_in * ker * ker
        limit = np.sqrt(6.0 / fan_in)
        params.append(
            {
                "W": rng.uniform(-limit, limit, size=shapes["W"]),
                "b": np.zeros(shapes["b"]),
            }
        )
    return params


def forward(layers, params, x, caches=None):
    """Run the network; returns one activation per layer (last is logits).

    ``caches``, when a list is passed, receives per-layer backward caches
    (padded conv inputs, pool argmax masks).
    """
    acts = []
    cur = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            p = params[i]
            if cur.ndim != 2 or cur.shape[1] != p["W"].shape[0]:
                raise ConfigurationError(
                    f"layer {i}: dense got input shape {cur.shape[1:]}"
                )
            cur = cur @ p["W"] + p["b"]
            cache = None
        elif k == "conv2d":
            _, _, ker, stride, pad = layer.dims
            if cur.ndim != 4 or cur.shape[1] != layer.dims[0]:
                raise ConfigurationError(
                    f"layer {i}: conv2d got input shape {cur.shape[1:]}"
                )
            cur, xp = conv2d_forward(cur, params[i]["W"], params[i]["b"], stride, pad)
            cache = xp
        elif k == "relu":
            cur = np.maximum(cur, 0.0)
            cache = None
        elif k == "maxpool2x2":
            n, c, h, w = cur.shape
            if h % 2 or w % 2:
                raise ConfigurationError(f"layer {i}: maxpool2x2 on odd shape {cur.shape}")
            win = cur.reshape(n, c, h // 2, 2, w // 2, 2)
            out = win.max(axis=(3, 5))
            mask = win == out[:, :, :, None, :, None]
            # break ties toward the first max so gradient is not duplicated
            flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            first = np.argmax(flat, axis=-1)
            onehot = np.zeros_like(flat, dtype=bool)
            np.put_along_axis(onehot, first[..., None], True, axis=-1)
            cache = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            cur = out
        else:  # flatten
            cur = cur.reshape(cur.shape[0], -1)
            cache = None
        acts.append(cur)
        if caches is not None:
            caches.append(cache)
    return acts


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_ce(logits, labels) -> float:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(n), labels].mean())


def per_sample_losses(logits, labels) -> np.ndarray:
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(labels)), labels]


@dataclass
class BackwardStats:
    """Instrumentation: how many activation-gradient tensors were computed."""

    act_grads: int = 0


def backward(layers, params, acts, x, labels, mask, caches, stats: BackwardStats | None = None):
    """Gradients of mean CE loss w.r.t. trainable parameters.

    ``mask`` is a per-layer boolean; True is only legal on parameterized
    layers.  The pass walks from the loss back to the first trainable layer
    and stops there.  Returns {(layer_index, name): array}.
    """
    if len(mask) != len(layers):
        raise ContractError("mask length does not match layer count")
    for i, m in enumerate(mask):
        if m and not layers[i].parameterized:
            raise ConfigurationError(f"layer {i} ({layers[i].kind}) cannot be trainable")
    trainable = [i for i, m in enumerate(mask) if m]
    if not trainable:
        return {}
    first = min(trainable)
    labels = np.asarray(labels)
    n = len(labels)

    probs = softmax(acts[-1])
    dy = probs.copy()
    dy[np.arange(n), labels] -= 1.0
    dy /= n
    if stats is not None:
        stats.act_grads += 1  # gradient at the logits

    grads = {}
    for i in range(len(layers) - 1, first - 1, -1):
        layer = layers[i]
        inp = x if i == 0 else acts[i - 1]
        k = layer.kind
        need_dx = i > first
        if k == "dense":
            if mask[i]:
                grads[(i, "W")] = inp.T @ dy
                grads[(i, "b")] = dy.sum(axis=0)
            if need_dx:
                dy = dy @ params[i]["W"].T
        elif k == "conv2d":
            _, _, ker, stride, pad = layer.dims
            dw, db, dx = conv2d_backward(caches[i], params[i]["W"], dy, stride, pad)
            if mask[i]:
                grads[(i, "W")] = dw
                grads[(i, "b")] = db
            if need_dx:
                dy = dx
        elif k == "relu":
            if need_dx:
                dy = dy * (acts[i] > 0)
        elif k == "maxpool2x2":
            if need_dx:
                nb, c, ho, wo = dy.shape
                up = caches[i] * dy[:, :, :, None, :, None]
                dy = up.reshape(nb, c, ho * 2, wo * 2)
        else:  # flatten
            if need_dx:
                dy = dy.reshape(inp.shape)
        if need_dx and stats is not None:
            stats.act_grads += 1
    return grads


@dataclass
class OptimizerState:
    """SGD with momentum; one velocity buffer per trainable parameter tensor."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)

    @classmethod
    def for_mask(cls, layers, mask, *, lr=0.01, momentum=0.9, weight_decay=5e-4):
        buffers = {}
        for i, m in enumerate(mask):
            if not m:
                continue
            for name, shape in param_shapes(layers[i]).items():
                buffers[(i, name)] = np.zeros(shape)
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, buffers=buffers)


def sgd_step(params, grads, opt: OptimizerState):
    """v <- momentum*v + g + wd*w;  w <- w - lr*v.  Mutates params and opt."""
    for key, g in grads.items():
        if key not in opt.buffers:
            raise ContractError(f"gradient for non-trainable parameter {key}")
        i, name = key
        w = params[i][name]
        if g.shape != w.shape:
            raise ContractError(f"gradient shape mismatch at {key}")
        v = opt.buffers[key]
        v *= opt.momentum
        v += g + opt.weight_decay * w
        w -= opt.lr * v
