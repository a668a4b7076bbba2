"""Canned experiment configs for the standard evaluation scenarios.

Each preset yields one or more labelled config variants; ablation presets
differ in exactly one knob so comparisons are attributable.
"""

from __future__ import annotations

from .config import (
    AggregationConfig,
    CorruptionConfig,
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    NodeConfig,
)
from .errors import ConfigError

PRESET_NAMES = ("align_ablation", "precision_vs_uniform", "dora_vs_lora", "comm_audit")


def _two_modality_nodes(n_samples: int = 96) -> list[NodeConfig]:
    return [
        NodeConfig(modality="image", n_samples=n_samples),
        NodeConfig(modality="text", n_samples=n_samples),
        NodeConfig(modality="image", n_samples=n_samples),
        NodeConfig(modality="text", n_samples=n_samples),
    ]


def _align_ablation() -> list[tuple[str, ExperimentConfig]]:
    base = dict(
        seed=0,
        rounds=30,
        local_steps=5,
        learning_rate=0.08,
        batch_size=8,
        aggregation=AggregationConfig(method="geolora", weighting="uniform"),
        nodes=_two_modality_nodes(),
    )
    on = ExperimentConfig(name="align_ablation.aligned", alignment_weight=1.0, **base)
    off = ExperimentConfig(name="align_ablation.unaligned", alignment_weight=0.0, **base)
    return [("aligned", on), ("unaligned", off)]


def _precision_vs_uniform() -> list[tuple[str, ExperimentConfig]]:
    nodes = _two_modality_nodes()
    nodes[3] = NodeConfig(modality="text", n_samples=96, corruption=CorruptionConfig(kind="pure_noise"))
    base = dict(
        seed=0,
        rounds=20,
        local_steps=5,
        learning_rate=0.08,
        batch_size=8,
        alignment_weight=1.0,
        nodes=nodes,
    )
    precision = ExperimentConfig(
        name="precision_vs_uniform.precision",
        aggregation=AggregationConfig(method="geolora", weighting="precision"),
        **base,
    )
    uniform = ExperimentConfig(
        name="precision_vs_uniform.uniform",
        aggregation=AggregationConfig(method="geolora", weighting="uniform"),
        **base,
    )
    return [("precision", precision), ("uniform", uniform)]


def _dora_vs_lora() -> list[tuple[str, ExperimentConfig]]:
    base = dict(
        seed=0,
        rounds=20,
        local_steps=5,
        learning_rate=0.08,
        batch_size=8,
        alignment_weight=1.0,
        nodes=_two_modality_nodes(),
    )
    dora = ExperimentConfig(
        name="dora_vs_lora.dora", aggregation=AggregationConfig(method="geodora", weighting="uniform"), **base
    )
    lora = ExperimentConfig(
        name="dora_vs_lora.lora", aggregation=AggregationConfig(method="geolora", weighting="uniform"), **base
    )
    return [("dora", dora), ("lora", lora)]


def _comm_audit() -> list[tuple[str, ExperimentConfig]]:
    cfg = ExperimentConfig(
        name="comm_audit",
        rounds=0,
        alignment_weight=1.0,
        comm_audit=True,
        model=ModelConfig(d_model=4096, n_blocks=24, n_heads=32, mlp_hidden=16384, rank=4),
        data=DataConfig(),
        nodes=_two_modality_nodes(),
    )
    return [("audit", cfg)]


_BUILDERS = {
    "align_ablation": _align_ablation,
    "precision_vs_uniform": _precision_vs_uniform,
    "dora_vs_lora": _dora_vs_lora,
    "comm_audit": _comm_audit,
}


def preset(name: str) -> list[tuple[str, ExperimentConfig]]:
    """Labelled config variants for a named scenario."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    return _BUILDERS[name]()
