"""Analytic memory, FLOPs and wall-clock models for stage-based training.

All memory numbers are bytes at 8 bytes per real.  Activation terms scale
with batch size; parameter and optimizer terms do not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .blocks import StageModel
from .errors import ConfigurationError, ContractError

BYTES_PER_REAL = 8


@dataclass(frozen=True)
class MemoryBreakdown:
    activation_bytes: int
    parameter_bytes: int
    optimizer_bytes: int
    forward_peak_bytes: int

    @property
    def total(self) -> int:
        return (
            self.activation_bytes
            + self.parameter_bytes
            + self.optimizer_bytes
            + self.forward_peak_bytes
        )


def _act_counts(layers, input_shape) -> list[int]:
    """Per-sample output element count of every layer."""
    return [int(np.prod(s)) for s in nn.infer_shapes(layers, input_shape)]


def stage_memory(stage: StageModel, batch_size: int, input_shape=None) -> MemoryBreakdown:
    """Training memory of one stage: trainable-region activations twice
    (values + their gradients), all resident parameters, momentum buffers for
    the trainable tensors, plus the single largest forward activation."""
    input_shape = tuple(input_shape) if input_shape is not None else stage.input_shape
    acts = _act_counts(stage.layers, input_shape)
    train_act = sum(acts[stage.trainable_start :])
    params_total = sum(nn.param_count(l) for l in stage.layers)
    opt_total = sum(
        nn.param_count(stage.layers[i]) for i, m in enumerate(stage.mask) if m
    )
    return MemoryBreakdown(
        activation_bytes=2 * train_act * batch_size * BYTES_PER_REAL,
        parameter_bytes=params_total * BYTES_PER_REAL,
        optimizer_bytes=opt_total * BYTES_PER_REAL,
        forward_peak_bytes=max(acts) * batch_size * BYTES_PER_REAL,
    )


def full_training_memory(layers, input_shape, batch_size: int) -> int:
    """Memory of conventional full-model training: every activation twice,
    all parameters, and a momentum buffer per parameter."""
    acts = sum(_act_counts(layers, input_shape))
    params = sum(nn.param_count(l) for l in layers)
    return (2 * acts * batch_size + 2 * params) * BYTES_PER_REAL


def layer_fp_flops(layer: nn.LayerSpec, in_shape) -> int:
    """Per-sample forward FLOPs; only parameterized layers are counted."""
    if layer.kind == "dense":
        fin, fout = layer.dims
        return 2 * fin * fout
    if layer.kind == "conv2d":
        c_in, c_out, k, _, _ = layer.dims
        _, ho, wo = nn.out_shape(layer, tuple(in_shape))
        return 2 * k * k * c_in * c_out * ho * wo
    return 0


def stage_flops(stage: StageModel, input_shape=None) -> int:
    """Per-sample FLOPs of one training step at this stage: forward through
    everything, backward (2x forward) only through the trainable layers."""
    input_shape = tuple(input_shape) if input_shape is not None else stage.input_shape
    total = 0
    shape = input_shape
    for i, layer in enumerate(stage.layers):
        fp = layer_fp_flops(layer, shape)
        total += fp
        if stage.mask[i]:
            total += 2 * fp
        shape = nn.out_shape(layer, shape)
    return total


def full_model_flops(layers, input_shape) -> int:
    """Per-sample FLOPs of full-model training (forward + backward everywhere)."""
    total = 0
    shape = tuple(input_shape)
    for layer in layers:
        fp = layer_fp_flops(layer, shape)
        total += fp
        if layer.parameterized:
            total += 2 * fp
        shape = nn.out_shape(layer, shape)
    return total


def client_time(flops: int, dataset_size: int, rho: float, c_i: float, local_epochs: int) -> float:
    """Simulated seconds for one client to finish a round at this stage."""
    if c_i <= 0:
        raise ConfigurationError(f"compute rate must be positive, got {c_i}")
    return local_epochs * rho * flops * dataset_size / c_i


def round_time(times: dict[int, float] | list[float]) -> float:
    """Synchronous round time: the slowest selected client."""
    values = list(times.values()) if isinstance(times, dict) else list(times)
    if not values:
        raise ContractError("round_time of an empty selection")
    return max(values)
