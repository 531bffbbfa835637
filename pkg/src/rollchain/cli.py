"""Thin command-line client for the experiment service.

Each subcommand reads a TOML config, validates it fully, sends it to the
service (an in-process instance by default, or a remote one via --server),
and writes the returned manifest and artifacts under --out. Validation
failures exit with status 2 before anything is written.
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx

from . import __version__
from .experiments import ParseError, ValidationError, decode_artifact, parse_config


def _format_validation_error(exc: ValidationError) -> str:
    lines = [f"invalid config ({exc.error_count()} problem(s)):"]
    for err in exc.errors():
        location = ".".join(str(p) for p in err["loc"]) or "<config>"
        lines.append(f"  - {location}: {err['msg']}")
    return "\n".join(lines)


async def _post(server: str | None, path: str, payload: dict) -> httpx.Response:
    if server:
        async with httpx.AsyncClient(base_url=server, timeout=600.0) as client:
            return await client.post(path, json=payload)
    from .service import app  # imported lazily; pulls in FastAPI

    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(
        transport=transport, base_url="http://rollchain.internal", timeout=None
    ) as client:
        return await client.post(path, json=payload)


def _run_command(kind: str, config_path: str, out: str, seed, threads, fmt, server):
    try:
        text = Path(config_path).read_text()
    except OSError as exc:
        click.echo(f"cannot read config: {exc}", err=True)
        sys.exit(2)
    try:
        config = parse_config(text, kind=kind, seed=seed, threads=threads, fmt=fmt)
    except ParseError as exc:
        click.echo(f"config parse error: {exc}", err=True)
        sys.exit(2)
    except ValidationError as exc:
        click.echo(_format_validation_error(exc), err=True)
        sys.exit(2)
    if config.kind != kind:
        click.echo(
            f"config declares kind {config.kind!r} but the subcommand is {kind!r}",
            err=True,
        )
        sys.exit(2)

    payload = {
        "seed": config.seed,
        "threads": config.threads,
        "format": config.format,
        "params": config.params_for_kind().model_dump(mode="json"),
    }
    try:
        response = asyncio.run(_post(server, f"/experiments/{kind}", payload))
    except httpx.HTTPError as exc:
        click.echo(f"service unreachable: {exc}", err=True)
        sys.exit(1)
    if response.status_code != 200:
        click.echo(f"service error {response.status_code}: {response.text}", err=True)
        sys.exit(1)

    body = response.json()
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(body["manifest"], sort_keys=True, indent=2) + "\n"
    )
    written = [manifest_path]
    for entry in body["artifacts"]:
        artifact = decode_artifact(entry)
        path = out_dir / artifact.name
        path.write_bytes(artifact.content)
        written.append(path)
    for path in written:
        click.echo(f"wrote {path}")
    click.echo(f"summary: {json.dumps(body['summary'], sort_keys=True)}")


def _run_options(fn):
    fn = click.option(
        "--config", "config_path", required=True,
        type=click.Path(exists=False, dir_okay=False),
        help="TOML experiment config.",
    )(fn)
    fn = click.option("--out", required=True, type=click.Path(file_okay=False),
                      help="Output directory for manifest and reports.")(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--threads", type=click.IntRange(min=1), default=None,
                      help="Cap trial parallelism (results are identical at "
                           "any setting).")(fn)
    fn = click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
                      default=None, help="Report format.")(fn)
    fn = click.option("--server", default=None, metavar="URL",
                      help="Base URL of a running service; in-process when "
                           "omitted.")(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="rollchain")
def main() -> None:
    """Rolling blockchain experiment client."""


@main.command("connectivity")
@_run_options
def connectivity(config_path, out, seed, threads, fmt, server):
    """Path-probability sweep over random graphs (nodes x edge budget)."""
    _run_command("connectivity", config_path, out, seed, threads, fmt, server)


@main.command("attack-sweep")
@_run_options
def attack_sweep_cmd(config_path, out, seed, threads, fmt, server):
    """Link-removal resilience sweep over linear deployments."""
    _run_command("attack-sweep", config_path, out, seed, threads, fmt, server)


@main.command("chain-replay")
@_run_options
def chain_replay(config_path, out, seed, threads, fmt, server):
    """Consensus replay on an explicit small topology."""
    _run_command("chain-replay", config_path, out, seed, threads, fmt, server)


@main.command("protocol")
@_run_options
def protocol(config_path, out, seed, threads, fmt, server):
    """Consensus run on a generated (segmented or random) topology."""
    _run_command("protocol", config_path, out, seed, threads, fmt, server)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the experiment service."""
    import uvicorn

    uvicorn.run("rollchain.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
