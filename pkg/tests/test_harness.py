import json
import shutil
from dataclasses import replace
from pathlib import Path

import pytest

from policy_dialogue.cli import main
from policy_dialogue.domain import COMPONENTS, AgentState, RuleTemplate, WeightVector
from policy_dialogue.engine import config_hash
from policy_dialogue.harness import (
    ablation_grid,
    build_cells,
    grid_policies,
    load_manifest,
    parse_grid,
    parse_masks,
    weight_grid,
)
from policy_dialogue.policy import build_action
from policy_dialogue.scenario import load_scenario, parse_scenario

from conftest import FIXTURES

ONES = WeightVector(1.0, 1.0, 1.0)


def test_weight_grid():
    policies = weight_grid(ONES, "D", [0.5, 1.5])
    assert [p.weights for p in policies] == [WeightVector(1, 1, 0.5), WeightVector(1, 1, 1.5)]
    assert weight_grid(ONES, "T", []) == []
    with pytest.raises(ValueError):
        weight_grid(ONES, "D", [2.5])
    with pytest.raises(ValueError):
        weight_grid(ONES, "X", [1.0])


def test_ablation_grid_has_every_subset():
    masks = [p.mask for p in ablation_grid(COMPONENTS)]
    assert len(masks) == 8 and len(set(masks)) == 8
    assert masks[0] == frozenset("TMD") and masks[-1] == frozenset()


def test_ablation_prompts():
    state = AgentState("a", "You are a.", "Why?")
    full = build_action(state, RuleTemplate(), ONES)
    assert build_action(state, RuleTemplate(), ONES, mask=frozenset("TMD")).rendered_text == full.rendered_text
    dt = build_action(state, RuleTemplate(), ONES, mask=frozenset("DT"))
    assert "[M] " not in dt.rendered_text
    empty = build_action(state, RuleTemplate.parse("light"), ONES, mask=frozenset())
    assert [b.label for b in empty.blocks] == ["Q", "R"]


def test_parse_grid_and_masks():
    assert parse_grid("D=0.5,1.5; w_T=1.5") == [("D", [0.5, 1.5]), ("T", [1.5])]
    with pytest.raises(ValueError):
        parse_grid("Z=1")
    assert parse_masks("TMD,DT,none") == [frozenset("TMD"), frozenset("DT"), frozenset()]
    assert len(parse_masks("all")) == 8
    with pytest.raises(ValueError):
        parse_masks("TQ")


def test_grid_cardinality(land):
    cells = build_cells([land], runs=2, rules=["none", "light"], grid="D=0.5,1.5", queries=["Q1", "Q3"])
    assert len(cells) == 2 * 2 * 2 * 2
    assert len({c.run_id for c in cells}) == len(cells)
    assert len(grid_policies(land.base_policy, masks="all")) == 8
    with pytest.raises(ValueError):
        build_cells([land], runs=0)


def test_scenario_parsing_errors(tmp_path):
    from policy_dialogue.scenario import ScenarioFileError

    with pytest.raises(ScenarioFileError) as err:
        parse_scenario({"agents": [{"id": "a", "colour": "red"}], "rounds": 3})
    v = err.value.violations
    assert "agents[0]: unknown key 'colour'" in v
    assert "agents[0]: missing 'persona_task'" in v
    assert "scenario needs 'query' or 'queries'" in v


def test_builtin_scenarios_valid(land, education):
    for sc in (land, education):
        assert sc.violations() == []
        assert len(sc.agents) == 3 and len(sc.queries) == 5 and sc.rounds == 10


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--scenario", "builtin:land"]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nrounds: 0\nquery: q\nagents:\n  - id: a\n    persona_task: p\n    knowledge_ref: a\n")
    assert main(["validate", "--scenario", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "rounds must be ≥ 1" in err
    broken = tmp_path / "broken.yaml"
    broken.write_text("name: [unclosed\n")
    assert main(["validate", "--scenario", str(broken)]) == 2
    assert "malformed YAML" in capsys.readouterr().err


def test_cli_run_evaluate_report(tmp_path, capsys):
    out = tmp_path / "out"
    code = main([
        "run", "--scenario", "builtin:land", "--out", str(out), "--runs", "2", "--rounds", "3",
        "--rules", "none,light", "--queries", "Q1", "--stub", "--workers", "2", "--evaluate",
    ])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifests", "metrics", "reports", "transcripts"]
    manifest = load_manifest(out)
    assert len(manifest["cells"]) == 4 and manifest["failed"] == 0
    land = load_scenario("builtin:land")
    for entry in manifest["cells"]:
        lines = (out / entry["transcript"]).read_text().splitlines()
        assert len(lines) == 3 * 3
        # report inputs trace back to the configuration that produced them
        rules = {json.loads(line)["rule"] for line in lines}
        (rule,) = rules
        policy = next(p for p in grid_policies(land.base_policy, [rule]))
        cfg = land.config("Q1", policy, entry["seed"])
        assert entry["config_hash"] == config_hash(replace(cfg, rounds=3))
    report = (out / "reports" / "report.csv").read_text().splitlines()
    assert report[0] == "scenario,policy,query,rule,Resp.,Rebuttal,Non-rep.,Evid.,Stance"
    assert len(report) == 1 + 4

    # evaluate and report again from the saved transcripts alone
    assert main(["evaluate", "--out", str(out), "--stub"]) == 0
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "reports" / "report.csv").read_text().splitlines() == report


def test_cli_report_on_synthetic_fixture(tmp_path):
    (tmp_path / "metrics").mkdir()
    shutil.copy(FIXTURES / "synthetic_metrics.csv", tmp_path / "metrics" / "metrics.csv")
    assert main(["report", "--out", str(tmp_path)]) == 0
    got = (tmp_path / "reports" / "report.csv").read_bytes()
    assert got == (FIXTURES / "expected_report.csv").read_bytes()
    summary = json.loads((tmp_path / "reports" / "report.json").read_text())
    assert summary["records"] == 16 and summary["missing_values"] == 4 * 3 + 4 * 3 + 1


def test_cli_run_reports_failed_cells(tmp_path):
    scenario = Path(tmp_path / "live.yaml")
    corpora = Path(load_scenario("builtin:land").corpora_dir)
    scenario.write_text(
        f"""
name: live
query: Should paths open?
rounds: 1
corpora_dir: {corpora}
backends:
  down:
    kind: chat
    endpoint: http://127.0.0.1:9/v1
    model: m
    max_retries: 0
    timeout: 2
agents:
  - id: farmer
    persona_task: You are a farmer.
    knowledge_ref: farmer
    backend_ref: down
"""
    )
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(scenario), "--out", str(out), "--runs", "1"]) == 1
    manifest = load_manifest(out)
    assert manifest["failed"] == 1 and manifest["cells"][0]["status"] == "failed"
