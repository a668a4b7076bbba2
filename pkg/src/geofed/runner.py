"""Experiment execution with self-describing output directories.

A run directory contains the exact resolved config that produced it, a
manifest with content hashes, per-round-per-node metrics as JSON lines, a
run-level summary, and the exported global checkpoint. Directories are
append-only: the runner refuses to write into a non-empty target.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, dump_config, load_config
from .errors import ComparisonError, ConfigError
from .federation import ExperimentRecord, ServerState, comm_savings_report, run_federation
from .tensorio import save_tensors

METRIC_KEYS = ("round", "node", "task_loss", "geo_loss", "cka_to_consensus", "p_k", "uplink_bytes")


def source_digest() -> str:
    """Content hash of the installed package sources (manifest provenance)."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode("utf-8"))
        h.update(path.read_bytes())
    return h.hexdigest()


def _require_fresh_dir(out_dir: Path) -> None:
    if out_dir.exists():
        if not out_dir.is_dir():
            raise ConfigError(f"output path {out_dir} exists and is not a directory")
        if any(out_dir.iterdir()):
            raise ConfigError(f"output directory {out_dir} is not empty (runs are append-only)")
    out_dir.mkdir(parents=True, exist_ok=True)


def _metrics_lines(record: ExperimentRecord) -> str:
    lines = []
    for m in record.node_metrics:
        row = {
            "round": m.round,
            "node": m.node,
            "task_loss": m.task_loss,
            "geo_loss": m.geo_loss,
            "cka_to_consensus": m.cka_to_consensus,
            "p_k": m.p_k,
            "uplink_bytes": m.uplink_bytes,
        }
        lines.append(json.dumps(row))
    return "\n".join(lines) + ("\n" if lines else "")


def _summary_dict(record: ExperimentRecord) -> dict:
    return {
        "name": record.config.name,
        "seed": record.config.seed,
        "config_sha256": record.config.digest(),
        "rounds": [
            {
                "round": s.round,
                "cross_modal_cka": s.cross_modal_cka,
                "retrieval_top1": s.retrieval_top1,
                "retrieval_concept": s.retrieval_concept,
                "federation_geo_penalty": s.federation_geo_penalty,
                "downlink_bytes_per_node": s.downlink_bytes_per_node,
            }
            for s in record.server_metrics
        ],
        "initial": {"cross_modal_cka": record.initial_cross_modal_cka},
        "final": {
            "accuracy_per_node": {str(k): v for k, v in sorted(record.final.accuracy_per_node.items())},
            "accuracy_mean": record.final.accuracy_mean,
            "cross_modal_cka": record.final.cross_modal_cka,
            "retrieval_top1": record.final.retrieval_top1,
            "retrieval_concept": record.final.retrieval_concept,
            "weights": {str(k): v for k, v in sorted(record.final.weights.items())},
            "mean_u_per_node": {str(k): v for k, v in sorted(record.final.mean_u_per_node.items())},
        },
        "ledger": record.ledger.to_dict(),
    }


@dataclass
class RunArtifacts:
    run_dir: str
    config: ExperimentConfig
    summary: dict
    manifest: dict
    comm_report: dict | None = None


def execute_run(cfg: ExperimentConfig, out_dir: str | Path, seed: int | None = None) -> RunArtifacts:
    """Run (or audit) an experiment and persist all artifacts under out_dir."""
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
        cfg = ExperimentConfig.model_validate(cfg.model_dump(mode="json"))
    out = Path(out_dir)
    _require_fresh_dir(out)
    dump_config(cfg, out / "config.json")
    manifest = {
        "name": cfg.name,
        "seed": cfg.seed,
        "config_path": "config.json",
        "config_sha256": cfg.digest(),
        "source_sha256": source_digest(),
        "package_version": __version__,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }

    comm_report = None
    if cfg.comm_audit:
        report = comm_savings_report(
            cfg.model.d_model,
            cfg.model.rank,
            mode="b_only",
            dora=cfg.aggregation.method == "geodora",
            cfg=cfg,
        )
        comm_report = report.to_dict()
        (out / "comm_report.json").write_text(json.dumps(comm_report, indent=2, sort_keys=True) + "\n")
        manifest["artifacts"] = ["config.json", "comm_report.json", "manifest.json"]
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return RunArtifacts(str(out), cfg, {}, manifest, comm_report)

    record = run_federation(cfg)
    (out / "metrics.jsonl").write_text(_metrics_lines(record))
    summary = _summary_dict(record)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(record.server, out / "checkpoint.bin")
    manifest["artifacts"] = ["config.json", "metrics.jsonl", "summary.json", "checkpoint.bin", "manifest.json"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(str(out), cfg, summary, manifest)


def save_checkpoint(server: ServerState, path: Path) -> None:
    """Export raw server state plus the materialized effective model."""
    tensors: dict = {}
    for name, p in server.params.named_params():
        if name != "head":
            tensors[f"theta.{name}"] = p.value.array()
    for t in sorted(server.atts):
        tensors[f"basis.{t}.a"] = server.atts[t].a_fixed.array()
        tensors[f"agg.{t}.b"] = server.b_agg[t]
        if server.kind == "dora":
            tensors[f"agg.{t}.m"] = server.m_agg[t]
    tensors["head"] = server.head
    for name, m in server.materialize().items():
        tensors[f"effective.{name}"] = m.array()
    save_tensors(path, tensors)


# ---------------------------------------------------------------------------
# Run comparison.
# ---------------------------------------------------------------------------


@dataclass
class CompareRow:
    metric: str
    run_a: float | None
    run_b: float | None
    delta: float | None


@dataclass
class CompareReport:
    run_a: str
    run_b: str
    rows: list[CompareRow]

    def render_text(self) -> str:
        header = f"{'metric':<28}{'run_a':>16}{'run_b':>16}{'delta':>16}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            fa = "-" if row.run_a is None else f"{row.run_a:.6g}"
            fb = "-" if row.run_b is None else f"{row.run_b:.6g}"
            fd = "-" if row.delta is None else f"{row.delta:+.6g}"
            lines.append(f"{row.metric:<28}{fa:>16}{fb:>16}{fd:>16}")
        return "\n".join(lines)


def _load_run(run_dir: str | Path) -> tuple[ExperimentConfig, dict]:
    run_dir = Path(run_dir)
    if not (run_dir / "summary.json").exists():
        raise ComparisonError(f"{run_dir} is not a completed run (no summary.json)")
    cfg = load_config(run_dir / "config.json")
    summary = json.loads((run_dir / "summary.json").read_text())
    return cfg, summary


def compare_runs(dir_a: str | Path, dir_b: str | Path) -> CompareReport:
    """Per-metric deltas between two completed runs of compatible shape."""
    cfg_a, sum_a = _load_run(dir_a)
    cfg_b, sum_b = _load_run(dir_b)
    shape_keys = [
        ("k", cfg_a.k, cfg_b.k),
        ("rounds", cfg_a.rounds, cfg_b.rounds),
        ("d_model", cfg_a.model.d_model, cfg_b.model.d_model),
        ("n_concepts", cfg_a.data.n_concepts, cfg_b.data.n_concepts),
    ]
    for name, a, b in shape_keys:
        if a != b:
            raise ComparisonError(f"runs are not comparable: {name} differs ({a} vs {b})")

    def pick(summary: dict, *path):
        cur = summary
        for p in path:
            if cur is None:
                return None
            cur = cur.get(p)
        return cur

    metrics = [
        ("final_cross_modal_cka", ("final", "cross_modal_cka")),
        ("final_retrieval_top1", ("final", "retrieval_top1")),
        ("final_accuracy_mean", ("final", "accuracy_mean")),
        ("uplink_total_bytes", ("ledger", "uplink_total")),
        ("downlink_total_bytes", ("ledger", "downlink_total")),
    ]
    rows = []
    for name, path in metrics:
        va, vb = pick(sum_a, *path), pick(sum_b, *path)
        delta = None if va is None or vb is None else vb - va
        rows.append(CompareRow(name, va, vb, delta))
    ua, ub = pick(sum_a, "ledger", "uplink_total"), pick(sum_b, "ledger", "uplink_total")
    ratio = None if not ua or not ub else ua / ub
    rows.append(CompareRow("uplink_ratio_a_over_b", ratio, None, None))
    return CompareReport(str(dir_a), str(dir_b), rows)
