import csv
import io
import json

import pytest

from rollchain.chain import chain_from_bytes, validate_chain
from rollchain.experiments import (
    ATTACK_COLUMNS,
    CONNECTIVITY_COLUMNS,
    ParseError,
    ValidationError,
    emit_report,
    execute_experiment,
    fmt6,
    parse_config,
    run_experiment,
)

CONNECTIVITY_TOML = """
kind = "connectivity"
seed = 21

[connectivity]
n_values = [5]
trials = 200
"""

REPLAY_TOML = """
kind = "chain-replay"
seed = 3

[chain-replay]
node_count = 6
variant = "b"
cycles = 1
"""

ATTACK_TOML = """
kind = "attack-sweep"
seed = 4

[attack-sweep]
line_node_count = 5
spacing = 5.0
radius = 6.0
area = [20.0, 10.0]
densities = [0.02]
fractions = [0.0, 0.5, 1.0]
trials = 30
"""


class TestParseConfig:
    def test_minimal_connectivity(self):
        cfg = parse_config(CONNECTIVITY_TOML)
        assert cfg.kind == "connectivity"
        assert cfg.seed == 21
        assert cfg.connectivity.trials == 200

    def test_missing_seed_names_seed(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config("kind = 'connectivity'\n[connectivity]\nn_values=[4]\ntrials=10\n")
        assert any(err["loc"] == ("seed",) for err in excinfo.value.errors())

    def test_edge_budget_over_bound_cites_bound(self):
        text = CONNECTIVITY_TOML.replace("trials = 200", "trials = 200\nl_max = 99")
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "n*(n-1)/2 = 10" in str(excinfo.value)

    def test_bad_toml_reports_position(self):
        with pytest.raises(ParseError) as excinfo:
            parse_config("kind = @nope")
        assert "line" in str(excinfo.value)

    def test_kind_aliases(self):
        cfg = parse_config(CONNECTIVITY_TOML.replace(
            'kind = "connectivity"', 'kind = "connectivity-sweep"'))
        assert cfg.kind == "connectivity"

    def test_mismatched_section_rejected(self):
        text = CONNECTIVITY_TOML + "\n[protocol]\ngenerator = 'segmented'\n"
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "does not match kind" in str(excinfo.value)

    def test_missing_section_rejected(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config("kind = 'protocol'\nseed = 1\n")
        assert "missing [protocol] section" in str(excinfo.value)

    def test_all_violations_reported(self):
        text = """
[connectivity]
n_values = [1]
trials = 0
"""
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text, kind="connectivity")
        locs = {err["loc"][0] for err in excinfo.value.errors()}
        assert "seed" in locs
        assert "connectivity" in locs
        assert excinfo.value.error_count() >= 3

    def test_overrides(self):
        cfg = parse_config(CONNECTIVITY_TOML, seed=99, threads=4, fmt="json")
        assert (cfg.seed, cfg.threads, cfg.format) == (99, 4, "json")

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            parse_config(CONNECTIVITY_TOML + "\nbogus = 1\n")


class TestEmitReport:
    def test_empty_sweep_header_only(self):
        out = emit_report([], CONNECTIVITY_COLUMNS, "csv")
        assert out.decode() == ",".join(CONNECTIVITY_COLUMNS) + "\n"

    def test_connectivity_schema(self):
        cfg = parse_config(CONNECTIVITY_TOML)
        output = execute_experiment(cfg)
        header = output.artifacts[0].content.decode().splitlines()[0]
        assert header.split(",")[:6] == ["n", "L", "trials", "p_hat", "stderr", "seed"]

    def test_csv_and_json_values_identical(self):
        rows = [
            {"density": 0.02, "fraction": 0.5, "trials": 9, "p_hat": 1 / 3,
             "stderr": 0.157135, "mean_spl": None, "mean_stretch": None, "seed": 4},
        ]
        rows = [{k: fmt6(v) for k, v in r.items()} for r in rows]
        as_csv = emit_report(rows, ATTACK_COLUMNS, "csv").decode()
        as_json = json.loads(emit_report(rows, ATTACK_COLUMNS, "json"))
        parsed = next(csv.DictReader(io.StringIO(as_csv)))
        for col in ATTACK_COLUMNS:
            json_value = as_json["rows"][0][col]
            cell = parsed[col]
            if json_value is None:
                assert cell == ""
            elif isinstance(json_value, str):
                assert cell == json_value
            else:
                assert float(cell) == float(json_value)

    def test_fmt6_rounds_to_six_significant_digits(self):
        assert fmt6(0.12345678) == 0.123457
        assert fmt6(1 / 3) == 0.333333
        assert fmt6(31.499999999999996) == 31.5
        assert fmt6(float("nan")) is None
        assert fmt6(7) == 7


class TestRunExperiment:
    def test_replay_outputs(self, tmp_path):
        cfg = parse_config(REPLAY_TOML)
        manifest = run_experiment(cfg, tmp_path)
        assert (tmp_path / "manifest.json").exists()
        for name in manifest.outputs:
            assert (tmp_path / name).exists()
        tag = manifest.config_hash[:8]
        assert f"resultant_{tag}.csv" in manifest.outputs
        rows = list(csv.DictReader((tmp_path / f"resultant_{tag}.csv").open()))
        accepted = [r for r in rows if r["status"] == "accepted"]
        assert len(accepted) == 7  # genesis + six blocks
        assert all(r["confirmations"] == "6" for r in accepted)

    def test_chain_artifact_revalidates(self, tmp_path):
        cfg = parse_config(REPLAY_TOML)
        manifest = run_experiment(cfg, tmp_path)
        tag = manifest.config_hash[:8]
        blocks = chain_from_bytes((tmp_path / f"chain_{tag}.rbc").read_bytes())
        assert len(blocks) == 7
        assert validate_chain(blocks, capacity=6) == []

    def test_event_log_is_ndjson(self, tmp_path):
        cfg = parse_config(REPLAY_TOML)
        manifest = run_experiment(cfg, tmp_path)
        tag = manifest.config_hash[:8]
        lines = (tmp_path / f"events_{tag}.ndjson").read_text().splitlines()
        events = [json.loads(line) for line in lines]
        assert all(
            {"iteration", "actor", "action", "outcome", "bytes"} <= set(e) for e in events
        )
        assert [e["action"] for e in events[:2]] == ["create", "send"]

    def test_rerun_byte_identical_except_timestamp(self, tmp_path):
        cfg = parse_config(REPLAY_TOML)
        m1 = run_experiment(cfg, tmp_path / "one")
        m2 = run_experiment(cfg, tmp_path / "two")
        for name in m1.outputs:
            assert (tmp_path / "one" / name).read_bytes() == (
                tmp_path / "two" / name
            ).read_bytes()
        a = json.loads((tmp_path / "one" / "manifest.json").read_text())
        b = json.loads((tmp_path / "two" / "manifest.json").read_text())
        a.pop("created_at"), b.pop("created_at")
        assert a == b

    def test_thread_count_does_not_change_bytes(self, tmp_path):
        base = parse_config(CONNECTIVITY_TOML)
        threaded = parse_config(CONNECTIVITY_TOML, threads=3)
        m1 = run_experiment(base, tmp_path / "t1")
        m2 = run_experiment(threaded, tmp_path / "t3")
        assert m1.outputs == m2.outputs
        for name in m1.outputs:
            assert (tmp_path / "t1" / name).read_bytes() == (
                tmp_path / "t3" / name
            ).read_bytes()

    def test_seed_changes_config_hash(self):
        a = parse_config(CONNECTIVITY_TOML)
        b = parse_config(CONNECTIVITY_TOML, seed=77)
        assert a.config_hash() != b.config_hash()

    def test_attack_rows(self):
        cfg = parse_config(ATTACK_TOML)
        output = execute_experiment(cfg)
        rows = list(csv.DictReader(io.StringIO(output.artifacts[0].content.decode())))
        assert [r["fraction"] for r in rows] == ["0.0", "0.5", "1.0"]
        assert float(rows[0]["p_hat"]) == 1.0
        assert float(rows[-1]["p_hat"]) == 0.0
        assert output.summary["breakdown_fractions"] == {"0.02": 0.5} or (
            "0.02" in output.summary["breakdown_fractions"]
        )

    def test_json_format(self):
        cfg = parse_config(ATTACK_TOML, fmt="json")
        output = execute_experiment(cfg)
        body = json.loads(output.artifacts[0].content)
        assert len(body["rows"]) == 3
        assert body["rows"][0]["p_hat"] == 1.0

    def test_protocol_segmented(self):
        cfg = parse_config(
            """
kind = "protocol"
seed = 9

[protocol]
generator = "segmented"
hub_count = 4
mobiles_per_segment = 3
overlap_count = 1
variant = "a"
cycles = 1
"""
        )
        output = execute_experiment(cfg)
        assert output.summary["generator"] == "segmented"
        assert len(output.summary["boundary_nodes"]) == 3
        # Segment-local replication cannot clear the global majority bar, so
        # every turn's block is recorded as lost; only genesis is certain.
        assert output.summary["accepted_blocks"] >= 1
        assert len(output.summary["lost_blocks"]) == output.summary["turns"]

    def test_protocol_random_graph(self):
        cfg = parse_config(
            """
kind = "protocol"
seed = 9

[protocol]
generator = "random"
node_count = 8
edge_count = 20
variant = "b"
cycles = 1
"""
        )
        output = execute_experiment(cfg)
        assert output.summary["generator"] == "random"
        assert output.summary["accepted_blocks"] >= 1

    def test_protocol_random_requires_feasible_edges(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config(
                """
kind = "protocol"
seed = 9

[protocol]
generator = "random"
node_count = 5
edge_count = 11
"""
            )
        assert "n*(n-1)/2 = 10" in str(excinfo.value)

    def test_replay_failure_plan_round_trip(self, tmp_path):
        cfg = parse_config(
            REPLAY_TOML + "\n[chain-replay.failures]\nisolated = {3 = [3]}\n"
        )
        manifest = run_experiment(cfg, tmp_path)
        tag = manifest.config_hash[:8]
        rows = list(csv.DictReader((tmp_path / f"resultant_{tag}.csv").open()))
        lost = [r for r in rows if r["status"] == "lost"]
        assert [(r["global_index"], r["creator_id"]) for r in lost] == [("3", "3")]
