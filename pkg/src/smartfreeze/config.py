"""Experiment configuration: JSON file -> validated dataclasses.

Validation collects every problem (with a dotted path to the offending
entry) before raising, and rejects unknown keys.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .blocks import ModelSpec
from .errors import ConfigError
from .nn import LayerSpec

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "block_cnn"  # block_cnn | mlp
    channels: tuple = (8, 16, 32, 64)
    convs_per_block: int = 2
    input_shape: tuple = (1, 8, 8)
    num_classes: int = 4
    hidden: tuple = (32, 32)  # mlp widths, one block per entry


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    train_size: int = 2000
    test_size: int = 500
    noise: float = 1.0
    alpha: float = 1.0  # Dirichlet concentration


@dataclass(frozen=True)
class FleetSettings:
    num_clients: int = 40
    # (capacity_bytes, fraction) tiers; fractions must sum to 1
    memory_tiers: tuple = ((2_000_000, 0.5), (8_000_000, 0.3), (64_000_000, 0.2))
    # (instructions_per_second, fraction) tiers
    compute_tiers: tuple = ((2e9, 0.4), (8e9, 0.4), (3.2e10, 0.2))


@dataclass(frozen=True)
class PaceConfig:
    Q: int = 5
    H: int = 5
    threshold: float = 1e-3
    patience: int = 3
    decay_ratio: float = 0.5
    stage_round_cap: int = 200


@dataclass(frozen=True)
class SelectorConfig:
    lam: float | str = "auto"  # auto -> mean(I)/mean(t) at stage start
    epsilon: float = 0.1
    phi: int | str = "auto"  # auto -> ceil(0.05 * N)
    gamma: int = 0
    cohort_size: int = 10
    delta: float = 2.0  # RL-CD gap dominance: split when gap > delta * rest


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class TrainingConfig:
    local_epochs: int = 5
    batch_size: int = 32
    rho: float = 1.0  # instructions per FLOP
    baseline_rounds: int = 60


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fleet: FleetSettings = field(default_factory=FleetSettings)
    pace: PaceConfig = field(default_factory=PaceConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)


_SECTIONS = {
    "model": ModelConfig,
    "dataset": DatasetConfig,
    "fleet": FleetSettings,
    "pace": PaceConfig,
    "selector": SelectorConfig,
    "optimizer": OptimizerConfig,
    "training": TrainingConfig,
}

_LIST_FIELDS = {"channels", "input_shape", "hidden", "memory_tiers", "compute_tiers"}


def _coerce(name, value):
    if name in _LIST_FIELDS and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    problems: list[str] = []
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            if not isinstance(value, int):
                problems.append("seed: must be an integer")
            else:
                kwargs["seed"] = value
            continue
        if key not in _SECTIONS:
            problems.append(f"{key}: unknown section")
            continue
        cls = _SECTIONS[key]
        if not isinstance(value, dict):
            problems.append(f"{key}: must be an object")
            continue
        fields = cls.__dataclass_fields__
        sec_kwargs = {}
        for k, v in value.items():
            if k not in fields:
                problems.append(f"{key}.{k}: unknown key")
            else:
                sec_kwargs[k] = _coerce(k, v)
        try:
            kwargs[key] = cls(**sec_kwargs)
        except (TypeError, ValueError) as exc:
            problems.append(f"{key}: {exc}")

    cfg = ExperimentConfig(**kwargs) if not problems else None
    if cfg is not None:
        problems.extend(_validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg: ExperimentConfig) -> list[str]:
    p = []
    sel = cfg.selector
    if not (0.0 <= sel.epsilon <= 1.0):
        p.append(f"selector.epsilon: {sel.epsilon} outside [0, 1]")
    if sel.lam != "auto" and not isinstance(sel.lam, (int, float)):
        p.append("selector.lam: must be a number or 'auto'")
    if sel.phi != "auto" and (not isinstance(sel.phi, int) or sel.phi < 1):
        p.append("selector.phi: must be a positive integer or 'auto'")
    if sel.cohort_size < 1:
        p.append("selector.cohort_size: must be >= 1")
    if cfg.dataset.alpha <= 0:
        p.append("dataset.alpha: must be > 0")
    if cfg.fleet.num_clients < 1:
        p.append("fleet.num_clients: must be >= 1")
    for tier_field in ("memory_tiers", "compute_tiers"):
        tiers = getattr(cfg.fleet, tier_field)
        total = sum(frac for _, frac in tiers)
        if abs(total - 1.0) > 1e-9:
            p.append(f"fleet.{tier_field}: fractions sum to {total}, expected 1")
    if cfg.pace.Q < 1 or cfg.pace.H < 1:
        p.append("pace.Q/pace.H: must be >= 1")
    if cfg.pace.patience < 1:
        p.append("pace.patience: must be >= 1")
    if cfg.model.preset not in ("block_cnn", "mlp"):
        p.append(f"model.preset: unknown preset {cfg.model.preset!r}")
    if cfg.training.batch_size < 1:
        p.append("training.batch_size: must be >= 1")
    return p


def parse_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return config_from_dict(raw)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)


def build_model(mc: ModelConfig) -> tuple[ModelSpec, list[int]]:
    """Materialize a preset into (ModelSpec, block boundaries)."""
    if mc.preset == "block_cnn":
        return _build_block_cnn(mc)
    if mc.preset == "mlp":
        return _build_mlp(mc)
    raise ConfigError([f"model.preset: unknown preset {mc.preset!r}"])


def _build_block_cnn(mc: ModelConfig) -> tuple[ModelSpec, list[int]]:
    c, h, w = mc.input_shape
    features: list[LayerSpec] = []
    boundaries: list[int] = []
    in_ch = c
    for bi, out_ch in enumerate(mc.channels):
        if bi > 0:
            boundaries.append(len(features))
            if h >= 4 and h % 2 == 0 and w % 2 == 0:
                features.append(LayerSpec("maxpool2x2"))
                h, w = h // 2, w // 2
        for ci in range(mc.convs_per_block):
            features.append(LayerSpec("conv2d", (in_ch, out_ch, 3, 1, 1)))
            features.append(LayerSpec("relu"))
            in_ch = out_ch
    head = [LayerSpec("flatten"), LayerSpec("dense", (in_ch * h * w, mc.num_classes))]
    return (
        ModelSpec(
            features=tuple(features),
            head=tuple(head),
            input_shape=tuple(mc.input_shape),
            num_classes=mc.num_classes,
        ),
        boundaries,
    )


def _build_mlp(mc: ModelConfig) -> tuple[ModelSpec, list[int]]:
    (d,) = mc.input_shape
    features: list[LayerSpec] = []
    boundaries: list[int] = []
    fin = d
    for bi, width in enumerate(mc.hidden):
        if bi > 0:
            boundaries.append(len(features))
        features.append(LayerSpec("dense", (fin, width)))
        features.append(LayerSpec("relu"))
        fin = width
    head = [LayerSpec("dense", (fin, mc.num_classes))]
    return (
        ModelSpec(
            features=tuple(features),
            head=tuple(head),
            input_shape=tuple(mc.input_shape),
            num_classes=mc.num_classes,
        ),
        boundaries,
    )
