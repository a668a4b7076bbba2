"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import ExperimentConfig


class HealthResponse(BaseModel):
    status: str
    version: str


class RunRequest(BaseModel):
    config: ExperimentConfig
    out_dir: str
    seed: int | None = None


class RunResponse(BaseModel):
    run_dir: str
    name: str
    seed: int
    config_sha256: str
    summary: dict
    comm_report: dict | None = None


class CompareRequest(BaseModel):
    run_a: str
    run_b: str


class CompareRowModel(BaseModel):
    metric: str
    run_a: float | None = None
    run_b: float | None = None
    delta: float | None = None


class CompareResponse(BaseModel):
    run_a: str
    run_b: str
    rows: list[CompareRowModel]
    text: str


class PresetVariant(BaseModel):
    label: str
    config: ExperimentConfig


class PresetResponse(BaseModel):
    name: str
    variants: list[PresetVariant]


class PresetListResponse(BaseModel):
    presets: list[str]


class CommSavingsRequest(BaseModel):
    d_model: int = Field(ge=2)
    rank: int = Field(ge=1)
    mode: str = "b_only"
    dora: bool = False


class CommSavingsResponse(BaseModel):
    d_model: int
    rank: int
    mode: str
    dora: bool
    per_matrix_dense_bytes: int
    per_matrix_update_bytes: int
    per_matrix_fraction: float
    per_matrix_savings: float
