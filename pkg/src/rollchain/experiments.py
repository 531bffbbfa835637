"""Configuration-driven experiment runner.

Configs are TOML: top-level ``kind`` and ``seed`` plus one section named after
the experiment kind. Every run writes a manifest before any result file, and
(config, seed) determines every output byte except the manifest timestamp.
Floats are rounded to 6 significant digits before serialization so CSV and
JSON renderings carry identical values.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Literal, Optional, Sequence

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .chain import chain_to_bytes
from .consensus import (
    FailurePlan,
    Variant,
    full_mesh,
    line,
    ring,
    run_protocol,
)
from .netsim import (
    DeploymentSpec,
    attack_sweep,
    gen_random_graph,
    gen_segmented_topology,
    max_edge_count,
    mc_path_probability,
    trial_rng,
)

__all__ = [
    "AttackParams",
    "Artifact",
    "ChainReplayParams",
    "ConnectivityParams",
    "ExperimentConfig",
    "ExperimentOutput",
    "ParseError",
    "ProtocolParams",
    "RunManifest",
    "ValidationError",
    "emit_report",
    "execute_experiment",
    "parse_config",
    "run_experiment",
]

KINDS = ("chain-replay", "connectivity", "attack-sweep", "protocol")

_KIND_ALIASES = {
    "connectivity-sweep": "connectivity",
    "protocol-on-topology": "protocol",
}


class ParseError(ValueError):
    """Config text is not valid TOML (message carries line/column)."""


def fmt6(value):
    """Round floats to 6 significant digits; NaN/inf become None."""
    if isinstance(value, bool) or not isinstance(value, float):
        return value
    if math.isnan(value) or math.isinf(value):
        return None
    return float(f"{value:.6g}")


class ConnectivityParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_values: list[int] = Field(min_length=1)
    trials: int = Field(ge=1)
    l_min: int = Field(default=1, ge=0)
    l_max: Optional[int] = Field(default=None, ge=0)
    graph_model: Literal["exact", "bernoulli"] = "exact"
    threshold_fraction: float = Field(default=0.7, gt=0.0, lt=1.0)

    @field_validator("n_values")
    @classmethod
    def _nodes_at_least_two(cls, values):
        for n in values:
            if n < 2:
                raise ValueError("every n must be >= 2 (two probe endpoints)")
        return values

    @model_validator(mode="after")
    def _edge_budget_within_bound(self):
        if self.l_max is not None:
            for n in self.n_values:
                cap = max_edge_count(n)
                if self.l_max > cap:
                    raise ValueError(
                        f"l_max={self.l_max} exceeds the maximum edge count "
                        f"n*(n-1)/2 = {cap} for n={n}"
                    )
        return self


class AttackParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    line_node_count: int = Field(ge=2)
    spacing: float = Field(gt=0.0)
    radius: float = Field(gt=0.0)
    area: tuple[float, float]
    densities: list[float] = Field(min_length=1)
    fractions: list[float] = Field(min_length=1)
    trials: int = Field(ge=1)

    @field_validator("area")
    @classmethod
    def _area_positive(cls, area):
        if area[0] <= 0 or area[1] <= 0:
            raise ValueError("area width and height must be positive")
        return area

    @field_validator("densities")
    @classmethod
    def _densities_nonnegative(cls, values):
        if any(d < 0 for d in values):
            raise ValueError("densities must be nonnegative")
        return values

    @field_validator("fractions")
    @classmethod
    def _fractions_sorted(cls, values):
        if any(not 0 <= f <= 1 for f in values):
            raise ValueError("fractions must lie within [0, 1]")
        if values != sorted(values):
            raise ValueError("fractions must be sorted ascending")
        return values


class FailuresSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    failed: dict[int, list[int]] = Field(default_factory=dict)
    isolated: dict[int, list[int]] = Field(default_factory=dict)

    def to_plan(self) -> FailurePlan:
        return FailurePlan.from_dicts(self.failed, self.isolated)


class _ReplayCommon(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: str = "single-block"
    cycles: int = Field(default=1, ge=1)
    turns: Optional[int] = Field(default=None, ge=1)
    capacity: Optional[int] = Field(default=None, ge=1)
    pruning: Literal["reset", "sliding"] = "reset"
    failures: FailuresSpec = Field(default_factory=FailuresSpec)
    genesis_created_at: int = Field(default=0, ge=0)

    @field_validator("variant")
    @classmethod
    def _normalize_variant(cls, value):
        return Variant.parse(value).value


class ChainReplayParams(_ReplayCommon):
    node_count: int = Field(ge=1)
    topology: Literal["full", "ring", "path", "custom"] = "full"
    edges: Optional[list[tuple[int, int]]] = None

    @model_validator(mode="after")
    def _custom_needs_edges(self):
        if self.topology == "custom" and not self.edges:
            raise ValueError("custom topology needs an explicit edges list")
        if self.topology != "custom" and self.edges:
            raise ValueError("edges are only allowed with topology = 'custom'")
        return self


class ProtocolParams(_ReplayCommon):
    generator: Literal["segmented", "random"] = "segmented"
    hub_count: int = Field(default=4, ge=1)
    mobiles_per_segment: int = Field(default=3, ge=1)
    overlap_count: int = Field(default=1, ge=0)
    node_count: int = Field(default=10, ge=2)
    edge_count: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _random_within_bound(self):
        if self.generator == "random":
            cap = max_edge_count(self.node_count)
            if self.edge_count is None:
                raise ValueError("random generator needs edge_count")
            if self.edge_count > cap:
                raise ValueError(
                    f"edge_count={self.edge_count} exceeds the maximum edge "
                    f"count n*(n-1)/2 = {cap} for n={self.node_count}"
                )
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: Literal["chain-replay", "connectivity", "attack-sweep", "protocol"]
    seed: int = Field(ge=0)
    threads: int = Field(default=1, ge=1)
    format: Literal["csv", "json"] = "csv"
    connectivity: Optional[ConnectivityParams] = None
    attack_sweep: Optional[AttackParams] = Field(default=None, alias="attack-sweep")
    chain_replay: Optional[ChainReplayParams] = Field(
        default=None, alias="chain-replay"
    )
    protocol: Optional[ProtocolParams] = None

    @field_validator("kind", mode="before")
    @classmethod
    def _canonical_kind(cls, value):
        if isinstance(value, str):
            return _KIND_ALIASES.get(value, value)
        return value

    @model_validator(mode="after")
    def _exactly_matching_section(self):
        problems = []
        if self.params_for_kind() is None:
            problems.append(f"missing [{self.kind}] section")
        for name, value in (
            ("connectivity", self.connectivity),
            ("attack-sweep", self.attack_sweep),
            ("chain-replay", self.chain_replay),
            ("protocol", self.protocol),
        ):
            if value is not None and name != self.kind:
                problems.append(f"[{name}] section does not match kind {self.kind!r}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def params_for_kind(self):
        return {
            "connectivity": self.connectivity,
            "attack-sweep": self.attack_sweep,
            "chain-replay": self.chain_replay,
            "protocol": self.protocol,
        }[self.kind]

    def config_hash(self) -> str:
        identity = {
            "kind": self.kind,
            "seed": self.seed,
            "format": self.format,
            "parameters": self.params_for_kind().model_dump(),
        }
        canonical = json.dumps(identity, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def parse_config(
    text: str,
    kind: str | None = None,
    seed: int | None = None,
    threads: int | None = None,
    fmt: str | None = None,
) -> ExperimentConfig:
    """Parse and fully validate a TOML config; keyword arguments are
    command-line overrides. Raises ParseError for syntax problems and
    pydantic.ValidationError (listing every violation) for bad content."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if kind is not None and "kind" not in data:
        data["kind"] = kind
    if seed is not None:
        data["seed"] = seed
    if threads is not None:
        data["threads"] = threads
    if fmt is not None:
        data["format"] = fmt
    return ExperimentConfig.model_validate(data)


class RunManifest(BaseModel):
    """Written before any result file; everything except created_at is a pure
    function of (config, seed)."""

    config_hash: str
    tool_version: str
    kind: str
    seed: int
    format: str
    parameters: dict
    outputs: list[str]
    created_at: str

    def to_bytes(self) -> bytes:
        return (
            json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"
        ).encode()


@dataclass(frozen=True)
class Artifact:
    name: str
    content: bytes
    content_type: str


@dataclass
class ExperimentOutput:
    manifest: RunManifest
    artifacts: list[Artifact]
    summary: dict


def emit_report(rows: Sequence[dict], columns: Sequence[str], fmt: str) -> bytes:
    """Render rows as CSV (stable column order) or JSON; identical values
    either way. An empty sweep yields a header-only CSV."""
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for col in columns:
                v = row.get(col)
                cells.append("" if v is None else str(v))
            buf.write(",".join(cells) + "\n")
        return buf.getvalue().encode()
    if fmt == "json":
        payload = {"rows": [dict(r) for r in rows]}
        return (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")


CONNECTIVITY_COLUMNS = ("n", "L", "trials", "p_hat", "stderr", "seed", "l_marker")
ATTACK_COLUMNS = (
    "density",
    "fraction",
    "trials",
    "p_hat",
    "stderr",
    "mean_spl",
    "mean_stretch",
    "seed",
)
RESULTANT_COLUMNS = (
    "global_index",
    "creator_id",
    "status",
    "confirmations",
    "live_count",
    "hash",
)
COUNTER_COLUMNS = ("node_id", "bytes_sent", "bytes_received", "messages_sent")


def _threshold_edge_count(n: int, threshold_fraction: float) -> float:
    # Exact rational arithmetic keeps e.g. 0.7 * 45 at exactly 31.5.
    return float(Fraction(str(threshold_fraction)) * max_edge_count(n))


def _connectivity_rows(config: ExperimentConfig) -> list[dict]:
    params = config.connectivity
    cells = []
    for n in params.n_values:
        cap = max_edge_count(n)
        hi = cap if params.l_max is None else min(params.l_max, cap)
        marker = fmt6(_threshold_edge_count(n, params.threshold_fraction))
        for edge_count in range(max(params.l_min, 0), hi + 1):
            cells.append((n, edge_count, marker))

    def run_cell(cell):
        n, edge_count, marker = cell
        est = mc_path_probability(
            n,
            edge_count,
            params.trials,
            seed=(config.seed, n, edge_count),
            model=params.graph_model,
        )
        return {
            "n": n,
            "L": edge_count,
            "trials": est.trials,
            "p_hat": fmt6(est.p_hat),
            "stderr": fmt6(est.stderr),
            "seed": config.seed,
            "l_marker": marker,
        }

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(run_cell, cells))
    return [run_cell(c) for c in cells]


def _run_connectivity(config: ExperimentConfig, tag: str):
    rows = _connectivity_rows(config)
    name = f"connectivity_{tag}.{config.format}"
    artifacts = [
        Artifact(
            name,
            emit_report(rows, CONNECTIVITY_COLUMNS, config.format),
            "text/csv" if config.format == "csv" else "application/json",
        )
    ]
    summary = {"rows": len(rows), "n_values": config.connectivity.n_values}
    return artifacts, summary


def _run_attack(config: ExperimentConfig, tag: str):
    params = config.attack_sweep
    report = attack_sweep(
        DeploymentSpec(
            params.line_node_count, params.spacing, params.radius, params.area
        ),
        params.densities,
        params.fractions,
        params.trials,
        seed=config.seed,
        threads=config.threads,
    )
    rows = [
        {
            "density": fmt6(c.density),
            "fraction": fmt6(c.fraction),
            "trials": c.trials,
            "p_hat": fmt6(c.p_hat),
            "stderr": fmt6(c.stderr),
            "mean_spl": fmt6(c.mean_spl) if c.mean_spl is not None else None,
            "mean_stretch": fmt6(c.mean_stretch) if c.mean_stretch is not None else None,
            "seed": config.seed,
        }
        for c in report.cells
    ]
    name = f"attack_{tag}.{config.format}"
    artifacts = [
        Artifact(
            name,
            emit_report(rows, ATTACK_COLUMNS, config.format),
            "text/csv" if config.format == "csv" else "application/json",
        )
    ]
    summary = {
        "rows": len(rows),
        "breakdown_fractions": {
            str(fmt6(d)): report.breakdown_fraction(d) for d in report.densities
        },
    }
    return artifacts, summary


def _replay_adjacency(params: ChainReplayParams) -> dict[int, list[int]]:
    ids = list(range(1, params.node_count + 1))
    if params.topology == "full":
        return full_mesh(ids)
    if params.topology == "ring":
        return ring(ids)
    if params.topology == "path":
        return line(ids)
    adjacency: dict[int, list[int]] = {i: [] for i in ids}
    for u, v in params.edges:
        if u not in adjacency or v not in adjacency:
            raise ValueError(f"edge ({u}, {v}) references an unknown node id")
        adjacency[u].append(v)
        adjacency[v].append(u)
    return adjacency


def _protocol_adjacency(params: ProtocolParams, seed: int):
    if params.generator == "segmented":
        topo = gen_segmented_topology(
            params.hub_count,
            params.mobiles_per_segment,
            params.overlap_count,
            trial_rng(seed),
        )
        graph = topo.to_graph()
        info = {
            "generator": "segmented",
            "hubs": list(topo.hub_ids),
            "boundary_nodes": list(topo.boundary_ids),
            "node_count": graph.n,
        }
    else:
        graph = gen_random_graph(params.node_count, params.edge_count, trial_rng(seed))
        info = {
            "generator": "random",
            "node_count": graph.n,
            "edge_count": graph.edge_count,
        }
    return graph.adjacency_map(), info


def _run_replay(config: ExperimentConfig, tag: str):
    if config.kind == "chain-replay":
        params = config.chain_replay
        adjacency = _replay_adjacency(params)
        info = {"topology": params.topology, "node_count": params.node_count}
    else:
        params = config.protocol
        adjacency, info = _protocol_adjacency(params, config.seed)

    result = run_protocol(
        adjacency,
        variant=params.variant,
        cycles=params.cycles,
        capacity=params.capacity,
        pruning=params.pruning,
        turns=params.turns,
        failure_plan=params.failures.to_plan(),
        seed=config.seed,
        genesis_created_at=params.genesis_created_at,
    )

    resultant = result.resultant
    rows = [
        {
            "global_index": b.header.global_index,
            "creator_id": b.header.creator_id,
            "status": "accepted",
            "confirmations": resultant.confirmation_counts.get(
                (b.header.global_index, b.header.hash.hex())
            ),
            "live_count": resultant.live_count,
            "hash": b.header.hash.hex(),
        }
        for b in resultant.accepted
    ]
    rows.extend(
        {
            "global_index": g,
            "creator_id": creator,
            "status": "lost",
            "confirmations": None,
            "live_count": resultant.live_count,
            "hash": None,
        }
        for g, creator in resultant.lost
    )
    rows.sort(key=lambda r: (r["global_index"], r["status"]))

    counter_rows = [
        {"node_id": nid, **counts} for nid, counts in sorted(result.counters.items())
    ]
    report_type = "text/csv" if config.format == "csv" else "application/json"
    events_text = "".join(
        json.dumps(e, sort_keys=True) + "\n" for e in result.events
    )
    artifacts = [
        Artifact(
            f"resultant_{tag}.{config.format}",
            emit_report(rows, RESULTANT_COLUMNS, config.format),
            report_type,
        ),
        Artifact(
            f"counters_{tag}.{config.format}",
            emit_report(counter_rows, COUNTER_COLUMNS, config.format),
            report_type,
        ),
        Artifact(f"events_{tag}.ndjson", events_text.encode(), "application/x-ndjson"),
        Artifact(
            f"chain_{tag}.rbc",
            chain_to_bytes(resultant.accepted),
            "application/octet-stream",
        ),
    ]
    summary = {
        **info,
        "turns": result.turns,
        "accepted_blocks": len(resultant.accepted),
        "lost_blocks": [[g, c] for g, c in resultant.lost],
        "live_count": resultant.live_count,
        "total_bytes_sent": sum(c["bytes_sent"] for c in result.counters.values()),
    }
    return artifacts, summary


def execute_experiment(config: ExperimentConfig) -> ExperimentOutput:
    """Run the configured experiment entirely in memory."""
    tag = config.config_hash()[:8]
    if config.kind == "connectivity":
        artifacts, summary = _run_connectivity(config, tag)
    elif config.kind == "attack-sweep":
        artifacts, summary = _run_attack(config, tag)
    else:
        artifacts, summary = _run_replay(config, tag)
    manifest = RunManifest(
        config_hash=config.config_hash(),
        tool_version=__version__,
        kind=config.kind,
        seed=config.seed,
        format=config.format,
        parameters=config.params_for_kind().model_dump(),
        outputs=[a.name for a in artifacts],
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    return ExperimentOutput(manifest, artifacts, summary)


def write_output(output: ExperimentOutput, out_dir: Path) -> list[Path]:
    """Persist a finished run: manifest.json first, then every artifact."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "manifest.json"]
    paths[0].write_bytes(output.manifest.to_bytes())
    for artifact in output.artifacts:
        path = out_dir / artifact.name
        path.write_bytes(artifact.content)
        paths.append(path)
    return paths


def run_experiment(config: ExperimentConfig, out_dir: Path) -> RunManifest:
    """Execute and persist; returns the manifest describing the run."""
    output = execute_experiment(config)
    write_output(output, out_dir)
    return output.manifest


def encode_artifact(artifact: Artifact) -> dict:
    """Wire form of an artifact: text stays text, binaries go base64."""
    if artifact.content_type == "application/octet-stream":
        return {
            "name": artifact.name,
            "content_type": artifact.content_type,
            "encoding": "base64",
            "content": base64.b64encode(artifact.content).decode(),
        }
    return {
        "name": artifact.name,
        "content_type": artifact.content_type,
        "encoding": "text",
        "content": artifact.content.decode(),
    }


def decode_artifact(payload: dict) -> Artifact:
    if payload["encoding"] == "base64":
        content = base64.b64decode(payload["content"])
    else:
        content = payload["content"].encode()
    return Artifact(payload["name"], content, payload["content_type"])
