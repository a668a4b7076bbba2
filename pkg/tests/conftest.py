from __future__ import annotations

import numpy as np
import pytest

from geofed.config import AggregationConfig, ExperimentConfig, NodeConfig
from geofed.model import (
    DEFAULT_MODALITIES,
    Adapter,
    ModelStack,
    TokenizerStub,
    TransformerConfig,
    TransformerParams,
    make_attachments,
)
from geofed.rng import Rng


def make_stack(seed: int = 0, mode: str = "lora", modality: str = "text", cfg: TransformerConfig | None = None):
    """A complete single-node model stack with deterministic init."""
    g = Rng(seed, "stack")
    cfg = cfg or TransformerConfig()
    params = TransformerParams(cfg, g.child("theta"))
    atts = make_attachments(cfg, params, g.child("basis"), mode)
    spec = DEFAULT_MODALITIES[modality]
    stub = TokenizerStub(spec, g.child("tokenizer"))
    adapter = Adapter(spec, cfg.d_model, g.child("adapter"))
    return ModelStack(params, atts, stub, adapter)


def tiny_experiment(**overrides) -> ExperimentConfig:
    """Small, fast two-node experiment used across protocol tests."""
    base = dict(
        name="tiny",
        seed=0,
        rounds=2,
        local_steps=2,
        learning_rate=0.05,
        batch_size=4,
        alignment_weight=1.0,
        aggregation=AggregationConfig(method="geolora", weighting="uniform"),
        nodes=[
            NodeConfig(modality="image", n_samples=24),
            NodeConfig(modality="text", n_samples=24),
        ],
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def rng() -> Rng:
    return Rng(0, "test")


@pytest.fixture
def any_matrix():
    def make(rows: int, cols: int, seed: int = 0) -> np.ndarray:
        return Rng(seed, f"m{rows}x{cols}").uniform(rows, cols) * 4.0 - 2.0

    return make
