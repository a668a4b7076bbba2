"""FastAPI service exposing the experiment runner.

The CLI is a thin client of these endpoints; remote deployments get the same
surface via uvicorn. Runs execute synchronously (desk scale) and write their
artifacts under the requested output directory on the server's filesystem.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import ComparisonError, ConfigError, GeofedError
from ..federation import comm_savings_report
from ..presets import PRESET_NAMES, preset
from ..runner import compare_runs, execute_run
from .schemas import (
    CommSavingsRequest,
    CommSavingsResponse,
    CompareRequest,
    CompareResponse,
    CompareRowModel,
    HealthResponse,
    PresetListResponse,
    PresetResponse,
    PresetVariant,
    RunRequest,
    RunResponse,
)


def create_app() -> FastAPI:
    app = FastAPI(title="geofed", version=__version__)

    @app.exception_handler(GeofedError)
    async def _geofed_error(request, exc: GeofedError):
        status = 404 if isinstance(exc, ConfigError) and "unknown preset" in str(exc) else 400
        if isinstance(exc, ComparisonError):
            status = 409
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.get("/presets", response_model=PresetListResponse)
    def list_presets() -> PresetListResponse:
        return PresetListResponse(presets=list(PRESET_NAMES))

    @app.get("/presets/{name}", response_model=PresetResponse)
    def get_preset(name: str) -> PresetResponse:
        variants = preset(name)
        return PresetResponse(name=name, variants=[PresetVariant(label=l, config=c) for l, c in variants])

    @app.post("/runs", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        artifacts = execute_run(req.config, req.out_dir, seed=req.seed)
        return RunResponse(
            run_dir=artifacts.run_dir,
            name=artifacts.config.name,
            seed=artifacts.config.seed,
            config_sha256=artifacts.config.digest(),
            summary=artifacts.summary,
            comm_report=artifacts.comm_report,
        )

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest) -> CompareResponse:
        report = compare_runs(req.run_a, req.run_b)
        rows = [CompareRowModel(metric=r.metric, run_a=r.run_a, run_b=r.run_b, delta=r.delta) for r in report.rows]
        return CompareResponse(run_a=report.run_a, run_b=report.run_b, rows=rows, text=report.render_text())

    @app.post("/comm/savings", response_model=CommSavingsResponse)
    def comm(req: CommSavingsRequest) -> CommSavingsResponse:
        report = comm_savings_report(req.d_model, req.rank, mode=req.mode, dora=req.dora)
        return CommSavingsResponse(
            d_model=report.d_model,
            rank=report.rank,
            mode=report.mode,
            dora=report.dora,
            per_matrix_dense_bytes=report.per_matrix_dense_bytes,
            per_matrix_update_bytes=report.per_matrix_update_bytes,
            per_matrix_fraction=report.per_matrix_fraction,
            per_matrix_savings=report.per_matrix_savings,
        )

    return app


app = create_app()
