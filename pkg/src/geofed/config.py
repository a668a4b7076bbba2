"""Experiment configuration: the single schema behind config files, the
service API, and presets.

Unknown keys are rejected everywhere (a typo in a hyperparameter must fail
loudly, not silently fall back to a default), and `alignment_weight` has no
default: an experiment must say where it stands on alignment.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .model import DEFAULT_MODALITIES, ModalitySpec, TransformerConfig

MODALITY_NAMES = tuple(DEFAULT_MODALITIES)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorruptionConfig(StrictModel):
    kind: Literal["none", "label_noise", "embedding_shift", "pure_noise"] = "none"
    rho: float = Field(0.0, ge=0.0, le=1.0)
    shift: float = Field(0.0, ge=0.0)


class NodeConfig(StrictModel):
    modality: Literal["image", "text", "genetics", "tabular"]
    n_samples: int = Field(256, ge=2)
    corruption: CorruptionConfig = Field(default_factory=CorruptionConfig)
    seed: int | None = None


class ModelConfig(StrictModel):
    d_model: int = Field(32, ge=2)
    n_blocks: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    mlp_hidden: int = Field(64, ge=1)
    rank: int = Field(4, ge=1)
    lora_targets: list[Literal["wq", "wk", "wv", "wo"]] = Field(default_factory=lambda: ["wq", "wv"])


class ModalityOverride(StrictModel):
    token_dim: int | None = Field(None, ge=1)
    seq_len: int | None = Field(None, ge=1)
    raw_dim: int | None = Field(None, ge=1)


class DataConfig(StrictModel):
    n_concepts: int = Field(8, ge=2)
    latent_dim: int = Field(16, ge=2)
    sigma: float = Field(0.3, gt=0.0)
    anchors_per_concept: int = Field(2, ge=1)
    synthetic_anchor_modalities: list[Literal["image", "text", "genetics", "tabular"]] = Field(default_factory=list)
    synthetic_anchor_offset: float = Field(0.5, ge=0.0)
    eval_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    modalities: dict[Literal["image", "text", "genetics", "tabular"], ModalityOverride] = Field(default_factory=dict)


class AggregationConfig(StrictModel):
    method: Literal["fedavg_full", "geolora", "geodora"] = "geolora"
    weighting: Literal["uniform", "precision"] = "uniform"


class ExperimentConfig(StrictModel):
    """Full description of one federation run; a pure function of this + nothing."""

    name: str = "experiment"
    seed: int = 0
    rounds: int = Field(ge=0)
    local_steps: int = Field(10, ge=1)
    # lr=0 is allowed so a no-op round is expressible (useful for protocol tests)
    learning_rate: float = Field(0.05, ge=0.0)
    batch_size: int = Field(8, ge=1)
    alignment_weight: float = Field(ge=0.0)  # no default on purpose
    u_min: float = Field(1e-3, gt=0.0)
    weight_mode: Literal["mean_inv_u", "sum_inv_u"] = "mean_inv_u"
    center_kernels: bool = False
    lap_subsample: int = Field(256, ge=1)
    comm_audit: bool = False
    aggregation: AggregationConfig = Field(default_factory=AggregationConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    nodes: list[NodeConfig] = Field(min_length=1)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.model.d_model % self.model.n_heads != 0:
            raise ValueError(f"model.d_model={self.model.d_model} not divisible by n_heads={self.model.n_heads}")
        if self.model.rank >= self.model.d_model:
            raise ValueError(f"model.rank={self.model.rank} must be < d_model={self.model.d_model}")
        if not self.model.lora_targets:
            raise ValueError("model.lora_targets must not be empty")
        return self

    @property
    def k(self) -> int:
        return len(self.nodes)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(
            d_model=self.model.d_model,
            n_blocks=self.model.n_blocks,
            n_heads=self.model.n_heads,
            mlp_hidden=self.model.mlp_hidden,
            n_classes=self.data.n_concepts,
            rank=self.model.rank,
            lora_targets=tuple(self.model.lora_targets),
        )

    def modality_spec(self, name: str) -> ModalitySpec:
        base = DEFAULT_MODALITIES[name]
        ov = self.data.modalities.get(name)
        if ov is None:
            return base
        return ModalitySpec(
            name,
            token_dim=ov.token_dim or base.token_dim,
            seq_len=ov.seq_len or base.seq_len,
            raw_dim=ov.raw_dim or base.raw_dim,
        )

    def used_modalities(self) -> list[str]:
        seen: list[str] = []
        for node in self.nodes:
            if node.modality not in seen:
                seen.append(node.modality)
        return seen

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for issue in err.errors():
        loc = ".".join(str(p) for p in issue["loc"]) or "<root>"
        lines.append(f"{loc}: {issue['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a JSON config file with field-level diagnostics."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {path}: {e}")
    return validate_config(raw)


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{format_validation_error(e)}")


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
