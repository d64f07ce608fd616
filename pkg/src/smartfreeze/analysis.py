"""Offline analysis: linear CKA between layer activations of a training run
and a centrally trained reference model, plus stabilization-round detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, UndefinedCKAError


def cka_linear(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two activation matrices (N x p, N x q): squared
    Frobenius norm of the cross-covariance over the product of the
    self-covariance norms.  Invariant to orthogonal maps and isotropic scale."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ConfigurationError(f"CKA needs matching N >= 2, got {x.shape} vs {y.shape}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0.0:
        raise UndefinedCKAError("zero-variance activations")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / denom)


def layer_activations(layers, params, x, layer_indices):
    """Flattened (N, features) activation matrix per requested layer."""
    acts = nn.forward(layers, params, x)
    out = {}
    for i in layer_indices:
        if not (0 <= i < len(layers)):
            raise ConfigurationError(f"layer index {i} outside the model")
        out[i] = acts[i].reshape(acts[i].shape[0], -1)
    return out


def cka_trace(layers, checkpoints, reference_params, probe_x, layer_indices):
    """Per-layer CKA series across checkpoints against the reference model.

    ``checkpoints`` is an ordered list of parameter lists for the same
    architecture.  Returns {layer_index: [cka per checkpoint]}.
    """
    ref = layer_activations(layers, reference_params, probe_x, layer_indices)
    series = {i: [] for i in layer_indices}
    for params in checkpoints:
        cur = layer_activations(layers, params, probe_x, layer_indices)
        for i in layer_indices:
            series[i].append(cka_linear(cur[i], ref[i]))
    return series


def stabilization_round(series, tol: float = 0.05) -> int:
    """First 1-based round after which the series stays within ``tol`` of its
    final value; len(series) if it never settles earlier."""
    values = np.asarray(series, dtype=np.float64)
    final = values[-1]
    settled = np.abs(values - final) <= tol
    for r in range(len(values)):
        if settled[r:].all():
            return r + 1
    return len(values)


def train_centralized(layers, x, y, *, epochs, batch_size, opt_cfg, seed):
    """Plain centralized SGD on the full dataset; the CKA reference model."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(layers, rng)
    mask = [l.parameterized for l in layers]
    opt = nn.OptimizerState.for_mask(
        layers, mask, lr=opt_cfg.lr, momentum=opt_cfg.momentum,
        weight_decay=opt_cfg.weight_decay,
    )
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), batch_size):
            idx = order[s : s + batch_size]
            caches: list = []
            acts = nn.forward(layers, params, x[idx], caches)
            grads = nn.backward(layers, params, acts, x[idx], y[idx], mask, caches)
            nn.sgd_step(params, grads, opt)
    return params
