"""Block partitioning, per-stage output modules, stage assembly and growth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, ContractError
from .nn import LayerSpec


@dataclass(frozen=True)
class ModelSpec:
    """A full architecture: feature layers, classifier head, input geometry."""

    features: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...]
    input_shape: tuple
    num_classes: int

    @property
    def layers(self) -> list[LayerSpec]:
        return list(self.features) + list(self.head)


@dataclass(frozen=True)
class BlockPartition:
    """The feature stack split into T contiguous blocks plus the original head."""

    blocks: tuple[tuple[LayerSpec, ...], ...]
    head: tuple[LayerSpec, ...]
    input_shape: tuple
    num_classes: int

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class OutputModule:
    """Stand-in tail for a partial model: one conv (+relu) per remaining block,
    then flatten + dense classifier."""

    stage: int
    layers: list[LayerSpec]
    params: list[dict | None]


@dataclass
class StageModel:
    """The sub-model trained at stage t: frozen prefix blocks, the current
    block, and its output module (the original head at t == T)."""

    stage: int
    layers: list[LayerSpec]
    params: list[dict | None]
    mask: list[bool]
    trainable_start: int  # first layer index of the current block
    op_start: int  # first layer index of the output module / head
    input_shape: tuple

    def trainable_keys(self) -> list[tuple[int, str]]:
        keys = []
        for i, m in enumerate(self.mask):
            if m:
                for name in nn.param_shapes(self.layers[i]):
                    keys.append((i, name))
        return keys

    def block_param_vector(self) -> np.ndarray:
        """Flattened parameters of the current block only (pace controller input)."""
        parts = []
        for i in range(self.trainable_start, self.op_start):
            if self.params[i] is not None:
                parts.append(self.params[i]["W"].ravel())
                parts.append(self.params[i]["b"].ravel())
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)


def _atomic_violation(features, boundary: int) -> bool:
    # a relu belongs to the layer it follows; never cut between them
    return features[boundary].kind == "relu" and features[boundary - 1].parameterized


def partition_model(model: ModelSpec, boundaries) -> BlockPartition:
    """Split ``model.features`` at the given indices into T = len+1 blocks."""
    boundaries = list(boundaries)
    n = len(model.features)
    if not boundaries:
        raise ConfigurationError("at least one boundary required (T >= 2)")
    prev = 0
    for b in boundaries:
        if not (0 < b < n):
            raise ConfigurationError(f"boundary {b} outside (0, {n})")
        if b <= prev:
            raise ConfigurationError(f"boundary {b} not strictly increasing")
        if _atomic_violation(model.features, b):
            raise ConfigurationError(f"boundary {b} splits an atomic conv+relu unit")
        prev = b
    cuts = [0] + boundaries + [n]
    blocks = tuple(
        tuple(model.features[a:b]) for a, b in zip(cuts[:-1], cuts[1:])
    )
    return BlockPartition(
        blocks=blocks,
        head=tuple(model.head),
        input_shape=tuple(model.input_shape),
        num_classes=model.num_classes,
    )


def reassemble(partition: BlockPartition) -> list[LayerSpec]:
    layers = []
    for block in partition.blocks:
        layers.extend(block)
    layers.extend(partition.head)
    return layers


def _block_io(partition: BlockPartition):
    """(input shape, output shape, net spatial stride) for every block."""
    info = []
    shape = partition.input_shape
    for block in partition.blocks:
        in_shape = shape
        stride = 1
        for layer in block:
            if layer.kind == "conv2d":
                stride *= layer.dims[3]
            elif layer.kind == "maxpool2x2":
                stride *= 2
            shape = nn.out_shape(layer, shape)
        info.append((in_shape, shape, stride))
    return info


def build_output_module(
    partition: BlockPartition, t: int, num_classes: int, rng: np.random.Generator
) -> OutputModule:
    """One stand-in layer (+relu) per remaining block, then flatten + dense.

    Conv blocks get a kernel-3 conv mirroring the replaced block's channel
    trajectory and net spatial stride; dense blocks get a dense stand-in of
    the same width.
    """
    T = partition.num_blocks
    if not (1 <= t < T):
        raise ContractError(f"output module only defined for 1 <= t < T, got t={t}")
    io = _block_io(partition)
    layers: list[LayerSpec] = []
    for j in range(t, T):
        in_shape, out_shp, stride = io[j]
        if len(in_shape) == 3 and len(out_shp) == 3:
            layers.append(LayerSpec("conv2d", (in_shape[0], out_shp[0], 3, stride, 1)))
        elif len(in_shape) == 1 and len(out_shp) == 1:
            layers.append(LayerSpec("dense", (in_shape[0], out_shp[0])))
        else:
            raise ContractError(f"block {j + 1} mixes spatial and flat shapes")
        layers.append(LayerSpec("relu"))
    prefix = [l for b in partition.blocks[:t] for l in b]
    shapes = nn.infer_shapes(prefix + layers, partition.input_shape)
    feat = int(np.prod(shapes[-1]))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", (feat, num_classes)))
    return OutputModule(stage=t, layers=layers, params=nn.init_params(layers, rng))


def assemble_stage_model(
    partition: BlockPartition,
    t: int,
    op_module: OutputModule | None,
    block_params: list[list[dict | None]],
    rng: np.random.Generator | None = None,
) -> StageModel:
    """Build the stage-t model from carried block parameters.

    ``block_params`` supplies parameters for blocks 1..t-1 (and optionally t);
    any missing block is freshly initialized from ``rng``.  For t == T the
    original head is used and ``op_module`` must be None.
    """
    T = partition.num_blocks
    if not (1 <= t <= T):
        raise ContractError(f"stage {t} outside [1, {T}]")
    if t < T:
        if op_module is None or op_module.stage != t:
            raise ContractError(f"output module missing or built for wrong stage ({t})")
        tail_layers = list(op_module.layers)
        tail_params = op_module.params
    else:
        if op_module is not None:
            raise ContractError("stage T uses the original head, not an output module")
        tail_layers = list(partition.head)
        tail_params = None

    layers: list[LayerSpec] = []
    params: list[dict | None] = []
    trainable_start = 0
    for j in range(t):
        if j == t - 1:
            trainable_start = len(layers)
        block = partition.blocks[j]
        layers.extend(block)
        if j < len(block_params) and block_params[j] is not None:
            bp = block_params[j]
            if len(bp) != len(block):
                raise ContractError(f"block {j + 1} params do not match its layers")
            params.extend(bp)
        else:
            if rng is None:
                raise ContractError(f"no parameters and no rng for block {j + 1}")
            params.extend(nn.init_params(list(block), rng))
    op_start = len(layers)
    layers.extend(tail_layers)
    if tail_params is None:
        if rng is None:
            raise ContractError("no rng to initialize the head")
        tail_params = nn.init_params(tail_layers, rng)
    params.extend(tail_params)

    mask = [False] * len(layers)
    for i in range(trainable_start, len(layers)):
        if layers[i].parameterized:
            mask[i] = True
    nn.infer_shapes(layers, partition.input_shape)  # validate composition
    return StageModel(
        stage=t,
        layers=layers,
        params=params,
        mask=mask,
        trainable_start=trainable_start,
        op_start=op_start,
        input_shape=tuple(partition.input_shape),
    )


def extract_block_params(stage: StageModel, partition: BlockPartition) -> list[list[dict | None]]:
    """Per-block parameter lists for blocks 1..t of a stage model."""
    out = []
    pos = 0
    for j in range(stage.stage):
        block = partition.blocks[j]
        out.append(stage.params[pos : pos + len(block)])
        pos += len(block)
    return out


def grow(
    prev: StageModel, partition: BlockPartition, rng: np.random.Generator
) -> StageModel:
    """Freeze the converged stage and assemble stage t+1.

    Converged block parameters are carried over by reference (bit-identical);
    the next block and a fresh output module are initialized from ``rng``.
    The previous output module is discarded.
    """
    T = partition.num_blocks
    if prev.stage >= T:
        raise ContractError("model is complete; cannot grow past stage T")
    t_next = prev.stage + 1
    carried = extract_block_params(prev, partition)
    op = build_output_module(partition, t_next, partition.num_classes, rng) if t_next < T else None
    return assemble_stage_model(partition, t_next, op, carried, rng)
