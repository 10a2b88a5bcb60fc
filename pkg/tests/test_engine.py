import json
from dataclasses import replace

import httpx
import pytest

from policy_dialogue.backends import BackendBinding, BackendRegistry
from policy_dialogue.domain import (
    NO_PRIOR_DISCUSSION,
    AdaptiveConfig,
    BehaviorFeedback,
    PolicySpec,
    RuleTemplate,
    WeightVector,
    serialize_utterances,
)
from policy_dialogue.engine import (
    ScenarioError,
    read_transcript,
    record_to_utterance,
    replay_prompt,
    run_batch,
    run_dialogue,
    text_hash,
)
from policy_dialogue.scheduler import weights_for_round

from conftest import make_config, make_kb


def scripted_registry(**extra):
    script = {f"{a}:{k}": f"{a} says point {k}." for a in "abc" for k in range(1, 11)}
    bindings = {"stub-chat": BackendBinding("stub-chat", "chat", mode="script", script=script)}
    bindings.update(extra)
    return BackendRegistry(bindings)


def test_two_agents_two_rounds():
    cfg = make_config(("a", "b"), rounds=2)
    t = run_dialogue(cfg, scripted_registry(), make_kb("ab"))
    assert t.status == "ok"
    assert [(r["round"], r["agent_id"]) for r in t.records] == [(1, "a"), (1, "b"), (2, "a"), (2, "b")]
    for r in t.records[2:]:
        assert "a: a says point 1.\nb: b says point 1." in r["prompt"]


def test_single_round_has_empty_memory_and_uses_query():
    cfg = make_config(("a", "b"), rounds=1)
    t = run_dialogue(cfg, scripted_registry(), make_kb("ab"))
    for r in t.records:
        assert NO_PRIOR_DISCUSSION in r["prompt"]
        assert r["retrieval_query_source"] == "query"
        assert r["retrieval_query_sha"] == text_hash(cfg.query)


def test_later_rounds_query_with_full_memory():
    cfg = make_config(("a", "b"), rounds=3, memory_window=1)
    t = run_dialogue(cfg, scripted_registry(), make_kb("ab"))
    utts = [record_to_utterance(r) for r in t.records]
    r = t.records[4]
    assert r["retrieval_query_source"] == "memory"
    # the full pool, not just the one-utterance window
    assert r["retrieval_query_sha"] == text_hash(serialize_utterances(utts[:4]))


def test_long_memory_query_is_truncated():
    emb = BackendRegistry({"stub-embed": BackendBinding("stub-embed", "embedding", max_input_chars=30)})
    cfg = make_config(("a", "b"), rounds=2)
    kb = make_kb("ab", embedder=emb.embedder("stub-embed"))
    t = run_dialogue(cfg, scripted_registry(), kb)
    assert [r["retrieval_query_truncated"] for r in t.records] == [True, True, True, True]


def test_shared_pool_same_memory_text_for_all_agents():
    echo = {"stub-chat": BackendBinding("stub-chat", "chat", mode="echo")}
    cfg = make_config(("a", "b", "c"), rounds=10)
    t = run_dialogue(cfg, BackendRegistry(echo), make_kb("abc"))
    for k in range(1, 11):
        bodies = {r["prompt"].split("[M] Recent discussion\n", 1)[1].split("\n\n[D]")[0] for r in t.records if r["round"] == k}
        assert len(bodies) == 1


def test_simultaneous_rounds_hide_same_round_outputs():
    t = run_dialogue(make_config(("a", "b", "c"), rounds=4), scripted_registry(), make_kb("abc"))
    for r in t.records:
        same_round = [x["output"] for x in t.records if x["round"] == r["round"]]
        assert not any(o in r["prompt"] for o in same_round)


def test_sequential_mode_sees_predecessors():
    cfg = make_config(("a", "b"), rounds=1, sequential=True)
    t = run_dialogue(cfg, scripted_registry(), make_kb("ab"))
    assert "a: a says point 1." in t.records[1]["prompt"]
    assert all(replay_prompt(t.records, i) == r["prompt"] for i, r in enumerate(t.records))


def test_evidence_length_and_replay():
    cfg = make_config(("a", "b"), rounds=3, retrieval_n=2, policy=PolicySpec(rule=RuleTemplate.parse("light:3")))
    t = run_dialogue(cfg, BackendRegistry(), make_kb("ab"))
    assert all(len(r["evidence"]) == 2 for r in t.records)
    assert all(replay_prompt(t.records, i) == r["prompt"] for i, r in enumerate(t.records))


def test_adaptive_weights_follow_recorded_feedback():
    adaptive = AdaptiveConfig(enabled=True)
    policy = PolicySpec(weights=WeightVector(1.0, 0.8, 1.2), adaptive=adaptive)
    cfg = make_config(("a", "b"), rounds=6, policy=policy)
    t = run_dialogue(cfg, BackendRegistry(), make_kb("ab"))
    for r in t.records:
        fb = r["feedback"]
        applied = BehaviorFeedback(fb["used_evidence"], fb["responded_to_memory"]) if fb else None
        expected = weights_for_round(policy.weights, r["round"], applied, adaptive)
        assert r["weights"] == expected.as_dict()
        assert "observed" in r
    # feedback applied in round k is what was observed in round k-1
    by_agent = {}
    for r in t.records:
        if r["agent_id"] in by_agent:
            assert r["feedback"] == by_agent[r["agent_id"]]
        by_agent[r["agent_id"]] = r["observed"]


def test_transcript_write_and_read(tmp_path):
    t = run_dialogue(make_config(rounds=2), BackendRegistry(), make_kb("ab"), run_id="demo")
    t.write(tmp_path / "t.jsonl", tmp_path / "m.json")
    assert read_transcript(tmp_path / "t.jsonl") == json.loads("[" + ",".join(t.to_jsonl().splitlines()) + "]")
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["run_id"] == "demo" and manifest["status"] == "ok" and manifest["config_hash"] == t.config_hash


def test_invalid_config_raises():
    with pytest.raises(ScenarioError) as err:
        run_dialogue(make_config(rounds=0), BackendRegistry(), make_kb("ab"))
    assert "rounds must be ≥ 1" in err.value.violations
    with pytest.raises(ScenarioError):
        run_dialogue(make_config(("a", "z")), BackendRegistry(), make_kb("ab"))


def test_backend_failure_marks_partial_transcript():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            return httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})
        return httpx.Response(500)

    live = BackendBinding("live", "chat", endpoint="http://llm.test/v1", model="m", max_retries=0, backoff=0)
    reg = BackendRegistry({"live": live}, transport=httpx.MockTransport(handler))
    cfg = make_config(("a", "b"), rounds=2)
    cfg = replace(cfg, agents=(cfg.agents[0], replace(cfg.agents[1], backend_ref="live")))
    t = run_dialogue(cfg, reg, make_kb("ab"))
    assert t.status == "failed" and "HTTP 500" in t.error
    # round 1 completed and is kept; round 2 is dropped
    assert [(r["round"], r["agent_id"]) for r in t.records] == [(1, "a"), (1, "b")]


def test_run_batch_seeds():
    cfg = make_config(("a", "b"), rounds=3)
    kb = make_kb("ab")
    same = run_batch(cfg, 3, BackendRegistry(), kb, seeds=[4, 4, 4])
    assert len({t.to_jsonl().replace(t.run_id, "") for t in same}) == 1
    distinct = run_batch(cfg, 5, BackendRegistry(), kb)
    outputs = [tuple(r["output"] for r in t.records) for t in distinct]
    assert len(set(outputs)) == 5
    assert [t.seed for t in distinct] == [0, 1, 2, 3, 4]
    with pytest.raises(ScenarioError):
        run_batch(cfg, 0, BackendRegistry(), kb)
