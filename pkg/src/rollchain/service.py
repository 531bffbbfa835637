"""HTTP facade over the experiment runner.

One POST endpoint per experiment kind. Requests carry the seed, the thread
cap, the report format, and the kind-specific parameter block; responses
return the run manifest plus every rendered artifact (text inline, binary
chain files base64-encoded) so clients can persist results byte-exactly.
"""

from __future__ import annotations

from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .experiments import (
    AttackParams,
    ChainReplayParams,
    ConnectivityParams,
    ExperimentConfig,
    ProtocolParams,
    RunManifest,
    encode_artifact,
    execute_experiment,
)

app = FastAPI(
    title="rollchain",
    version=__version__,
    description=(
        "Rolling blockchain experiment service: bounded-memory chain replays, "
        "round-robin consensus runs, and network resilience sweeps."
    ),
)


class ExperimentRequest(BaseModel):
    seed: int = Field(ge=0)
    threads: int = Field(default=1, ge=1)
    format: Literal["csv", "json"] = "csv"


class ConnectivityRequest(ExperimentRequest):
    params: ConnectivityParams


class AttackSweepRequest(ExperimentRequest):
    params: AttackParams


class ChainReplayRequest(ExperimentRequest):
    params: ChainReplayParams


class ProtocolRequest(ExperimentRequest):
    params: ProtocolParams


class ArtifactPayload(BaseModel):
    name: str
    content_type: str
    encoding: Literal["text", "base64"]
    content: str


class RunResponse(BaseModel):
    manifest: RunManifest
    summary: dict
    artifacts: list[ArtifactPayload]


class HealthResponse(BaseModel):
    status: str
    version: str


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


def _run(config: ExperimentConfig) -> RunResponse:
    try:
        output = execute_experiment(config)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return RunResponse(
        manifest=output.manifest,
        summary=output.summary,
        artifacts=[ArtifactPayload(**encode_artifact(a)) for a in output.artifacts],
    )


@app.post("/experiments/connectivity", response_model=RunResponse)
def run_connectivity(request: ConnectivityRequest) -> RunResponse:
    return _run(
        ExperimentConfig(
            kind="connectivity",
            seed=request.seed,
            threads=request.threads,
            format=request.format,
            connectivity=request.params,
        )
    )


@app.post("/experiments/attack-sweep", response_model=RunResponse)
def run_attack_sweep(request: AttackSweepRequest) -> RunResponse:
    return _run(
        ExperimentConfig(
            kind="attack-sweep",
            seed=request.seed,
            threads=request.threads,
            format=request.format,
            **{"attack-sweep": request.params},
        )
    )


@app.post("/experiments/chain-replay", response_model=RunResponse)
def run_chain_replay(request: ChainReplayRequest) -> RunResponse:
    return _run(
        ExperimentConfig(
            kind="chain-replay",
            seed=request.seed,
            threads=request.threads,
            format=request.format,
            **{"chain-replay": request.params},
        )
    )


@app.post("/experiments/protocol", response_model=RunResponse)
def run_protocol_experiment(request: ProtocolRequest) -> RunResponse:
    return _run(
        ExperimentConfig(
            kind="protocol",
            seed=request.seed,
            threads=request.threads,
            format=request.format,
            protocol=request.params,
        )
    )
