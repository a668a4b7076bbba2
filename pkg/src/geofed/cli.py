"""Command-line client for the experiment service.

By default commands run against an in-process instance of the FastAPI app
(no network, same filesystem); `--server` points them at a remote service
instead. The CLI itself stays thin: it ships configs and renders responses.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())  # in-process ASGI bridge, no network


def _fail(resp: httpx.Response) -> None:
    try:
        detail = resp.json().get("detail", resp.text)
    except (ValueError, AttributeError):
        detail = resp.text
    if isinstance(detail, list):  # pydantic validation issues
        click.echo("invalid request:", err=True)
        for issue in detail:
            loc = ".".join(str(p) for p in issue.get("loc", [])) or "<root>"
            click.echo(f"  {loc}: {issue.get('msg')}", err=True)
    else:
        click.echo(f"error: {detail}", err=True)
    sys.exit(2 if resp.status_code == 422 else 1)


@click.group()
@click.option("--server", default=None, envvar="GEOFED_SERVER", help="Remote service URL (default: in-process).")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Federated alignment experiments: run, compare, presets."""
    ctx.obj = server


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, help="Output directory (must be empty or absent).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.pass_obj
def run(server: str | None, config_path: str, out_dir: str | None, seed: int | None) -> None:
    """Execute one experiment from a JSON config file."""
    try:
        raw = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as e:
        click.echo(f"error: config is not valid JSON: {e}", err=True)
        sys.exit(2)
    if out_dir is None:
        name = raw.get("name", "experiment") if isinstance(raw, dict) else "experiment"
        eff_seed = seed if seed is not None else (raw.get("seed", 0) if isinstance(raw, dict) else 0)
        out_dir = str(Path("runs") / f"{name}-seed{eff_seed}")
    with _client(server) as client:
        resp = client.post("/runs", json={"config": raw, "out_dir": out_dir, "seed": seed})
        if resp.status_code != 200:
            _fail(resp)
        body = resp.json()
    click.echo(f"run: {body['name']} (seed {body['seed']})")
    click.echo(f"dir: {body['run_dir']}")
    if body.get("comm_report"):
        rep = body["comm_report"]
        click.echo(f"comm audit: per-matrix savings {rep['per_matrix_savings']:.6%}")
        if rep.get("message_savings") is not None:
            click.echo(f"comm audit: full-message savings {rep['message_savings']:.6%}")
        return
    final = body["summary"]["final"]
    ledger = body["summary"]["ledger"]
    click.echo(f"final accuracy (mean over nodes): {final['accuracy_mean']:.4f}")
    if final["cross_modal_cka"] is not None:
        click.echo(f"final cross-modal alignment:    {final['cross_modal_cka']:.4f}")
        click.echo(f"final anchor retrieval top-1:   {final['retrieval_top1']:.4f}")
    click.echo(f"uplink total bytes:             {ledger['uplink_total']}")


@main.command()
@click.argument("run_a", type=click.Path(exists=True, file_okay=False))
@click.argument("run_b", type=click.Path(exists=True, file_okay=False))
@click.pass_obj
def compare(server: str | None, run_a: str, run_b: str) -> None:
    """Per-metric deltas between two completed runs."""
    with _client(server) as client:
        resp = client.post("/compare", json={"run_a": run_a, "run_b": run_b})
        if resp.status_code != 200:
            _fail(resp)
        click.echo(resp.json()["text"])


@main.command()
@click.argument("name")
@click.option("--emit", "emit_path", default=None, help="Write config JSON file(s) instead of printing.")
@click.pass_obj
def preset(server: str | None, name: str, emit_path: str | None) -> None:
    """Emit the config(s) for a named scenario."""
    with _client(server) as client:
        resp = client.get(f"/presets/{name}")
        if resp.status_code != 200:
            _fail(resp)
        body = resp.json()
    variants = body["variants"]
    if emit_path is None:
        click.echo(json.dumps(variants, indent=2))
        return
    out = Path(emit_path)
    if len(variants) == 1:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(variants[0]["config"], indent=2) + "\n")
        click.echo(str(out))
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    for variant in variants:
        path = out.with_name(f"{out.stem}.{variant['label']}{out.suffix or '.json'}")
        path.write_text(json.dumps(variant["config"], indent=2) + "\n")
        click.echo(str(path))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host: str, port: int) -> None:
    """Start the experiment service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
