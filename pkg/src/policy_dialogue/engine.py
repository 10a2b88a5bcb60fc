"""Multi-round dialogue loop over a shared message pool."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .backends import BackendError, BackendRegistry
from .domain import (
    AgentSpec,
    AgentState,
    BehaviorFeedback,
    DialogueMemory,
    RetrievedEvidence,
    RuleTemplate,
    ScenarioConfig,
    Utterance,
    WeightVector,
    serialize_utterances,
    validate_scenario,
)
from .knowledge import KnowledgeBase, fit_query
from .metrics import behavior_feedback
from .policy import DEFAULT_TEXTS, PromptTexts, build_action, tier_of
from .scheduler import weights_for_round

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    def __init__(self, violations: Sequence[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = list(violations)


def _jsonable(obj: Any) -> Any:
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_jsonable(v) for v in obj)
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    return obj


def config_hash(config: ScenarioConfig) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class Transcript:
    run_id: str
    seed: int
    config_hash: str
    records: list[dict] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in self.records)

    def manifest(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "utterances": len(self.records),
        }

    def write(self, transcript_path: Path, manifest_path: Path) -> None:
        transcript_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        transcript_path.write_text(self.to_jsonl(), encoding="utf-8")
        manifest_path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def utterances(self) -> list[Utterance]:
        return [record_to_utterance(r) for r in self.records]


def record_to_utterance(r: Mapping) -> Utterance:
    w = r["weights"]
    return Utterance(
        round=r["round"],
        agent_id=r["agent_id"],
        text=r["output"],
        prompt_snapshot=r["prompt"],
        weights_snapshot=WeightVector(w["t"], w["m"], w["d"]),
        evidence_ids=tuple(cid for cid, _ in r["evidence"]),
    )


def read_transcript(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class _Turn:
    utterance: Utterance
    record: dict
    evidence: RetrievedEvidence


def _retrieval_query(config: ScenarioConfig, k: int, visible: Sequence[Utterance]) -> tuple[str, str]:
    if k == 1 or not visible:
        return config.query, "query"
    return serialize_utterances(visible), "memory"


def run_dialogue(
    config: ScenarioConfig,
    backends: BackendRegistry,
    knowledge: KnowledgeBase,
    *,
    texts: PromptTexts = DEFAULT_TEXTS,
    run_id: str | None = None,
    judge_backend: str = "stub-judge",
    workers: int = 1,
) -> Transcript:
    """Run ``config.rounds`` rounds; every agent speaks once per round.

    In the default simultaneous mode all agents of round k see only the memory
    accumulated before round k; their outputs join the memory together at the
    end of the round. A backend failure stops the run and returns the partial
    transcript with status ``failed``.
    """
    problems = validate_scenario(config)
    missing = [a.knowledge_ref for a in config.agents if a.knowledge_ref not in knowledge.indexes]
    problems += [f"corpus {ref!r} not ingested" for ref in missing]
    if problems:
        raise ScenarioError(problems)

    run_id = run_id or f"{config.name}-{config.query_id}-s{config.seed}"
    transcript = Transcript(run_id, config.seed, config_hash(config))
    memory = DialogueMemory()
    feedback: dict[str, BehaviorFeedback | None] = {a.agent_id: None for a in config.agents}
    embed_limit = knowledge.embedder.binding.max_input_chars
    judge = backends.judge(judge_backend) if config.feedback_mode == "judge" else None

    def turn(agent: AgentSpec, k: int, visible: tuple[Utterance, ...]) -> _Turn:
        policy = config.policy_for(agent.agent_id)
        applied = feedback[agent.agent_id]
        weights = weights_for_round(policy.weights, k, applied, policy.adaptive)

        query_text, source = _retrieval_query(config, k, visible)
        query_text, truncated = fit_query(query_text, embed_limit)
        flags = []
        try:
            items = knowledge.retrieve(agent.knowledge_ref, query_text, config.retrieval_n)
        except BackendError as exc:
            log.warning("retrieval failed for %s round %d: %s", agent.agent_id, k, exc)
            items, flags = [], ["retrieval_failed"]
        index = knowledge.index(agent.knowledge_ref)
        evidence = RetrievedEvidence(k, agent.agent_id, tuple(items), {cid: index.texts[cid] for cid, _ in items})

        state = AgentState(
            agent.agent_id,
            agent.persona_task,
            config.query,
            tuple(visible[-config.window :]) if visible else (),
            evidence,
        )
        action = build_action(state, policy.rule, weights, texts, policy.mask)
        prompt = action.rendered_text
        result = backends.chat(agent.backend_ref).complete(
            prompt, agent_id=agent.agent_id, round=k, seed=config.seed
        )
        utterance = Utterance(k, agent.agent_id, result.text, prompt, weights, tuple(evidence.chunk_ids))
        record = {
            "run_id": run_id,
            "scenario": config.name,
            "query_id": config.query_id,
            "query": config.query,
            "round": k,
            "agent_id": agent.agent_id,
            "persona": agent.persona_task,
            "policy": policy.label(),
            "rule": policy.rule.name,
            "sentence_limit": policy.rule.sentence_limit,
            "mask": "".join(c for c in "TMD" if c in policy.mask),
            "weights": weights.as_dict(),
            "tiers": {c.lower(): tier_of(weights.get(c)).value for c in "TMD"},
            "feedback": applied.as_dict() if applied else None,
            "evidence": [[cid, score] for cid, score in items],
            "evidence_text": evidence.texts,
            "retrieval_query_source": source,
            "retrieval_query_sha": text_hash(query_text),
            "retrieval_query_truncated": truncated,
            "memory_window": config.window,
            "sequential": config.sequential,
            "prompt": prompt,
            "output": result.text,
            "backend": agent.backend_ref,
            "latency_ms": round(result.latency_ms, 3),
            "flags": flags,
        }
        return _Turn(utterance, record, evidence)

    try:
        for k in range(1, config.rounds + 1):
            snapshot = memory.utterances
            turns: list[_Turn] = []
            if config.sequential:
                for agent in config.agents:
                    t = turn(agent, k, snapshot + tuple(x.utterance for x in turns))
                    turns.append(t)
            elif workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    turns = list(pool.map(lambda a: turn(a, k, snapshot), config.agents))
            else:
                turns = [turn(a, k, snapshot) for a in config.agents]

            prev = snapshot[-1] if snapshot else None
            for i, t in enumerate(turns):
                transcript.records.append(t.record)
                policy = config.policy_for(t.utterance.agent_id)
                if policy.adaptive.enabled:
                    seen = prev
                    if config.sequential:
                        seen = turns[i - 1].utterance if i else prev
                    fb = behavior_feedback(
                        t.utterance, t.evidence.texts.values(), seen, config.feedback_mode, judge
                    )
                    t.record["observed"] = fb.as_dict()
                    feedback[t.utterance.agent_id] = fb
            memory.extend(t.utterance for t in turns)
    except BackendError as exc:
        log.error("run %s failed: %s", run_id, exc)
        transcript.status = "failed"
        transcript.error = str(exc)
    return transcript


def replay_prompt(
    records: Sequence[Mapping], index: int, texts: PromptTexts = DEFAULT_TEXTS
) -> str:
    """Rebuild ``records[index]``'s prompt from transcript data alone."""
    rec = records[index]
    k = rec["round"]
    if rec.get("sequential"):
        visible = [record_to_utterance(r) for r in records[:index]]
    else:
        visible = [record_to_utterance(r) for r in records[:index] if r["round"] < k]
    evidence = RetrievedEvidence(
        k, rec["agent_id"], tuple((cid, s) for cid, s in rec["evidence"]), dict(rec["evidence_text"])
    )
    window = rec["memory_window"]
    state = AgentState(rec["agent_id"], rec["persona"], rec["query"], tuple(visible[-window:]), evidence)
    w = rec["weights"]
    rule = RuleTemplate.parse({"kind": rec["rule"], "sentence_limit": rec["sentence_limit"]})
    action = build_action(state, rule, WeightVector(w["t"], w["m"], w["d"]), texts, frozenset(rec["mask"]))
    return action.rendered_text


def run_batch(
    config: ScenarioConfig,
    runs: int,
    backends: BackendRegistry,
    knowledge: KnowledgeBase,
    seeds: Sequence[int] | None = None,
    **kwargs: Any,
) -> list[Transcript]:
    """Independent dialogues, one per seed (default: ``config.seed + i``)."""
    if runs < 1:
        raise ScenarioError(["runs must be ≥ 1"])
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(runs)]
    if len(seeds) != runs:
        raise ScenarioError([f"expected {runs} seeds, got {len(seeds)}"])
    out = []
    for i, seed in enumerate(seeds):
        cfg = replace(config, seed=seed)
        run_id = f"{config.name}-{config.query_id}-r{i}-s{seed}"
        try:
            out.append(run_dialogue(cfg, backends, knowledge, run_id=run_id, **kwargs))
        except Exception as exc:  # one bad run must not sink the batch
            log.error("run %s crashed: %s", run_id, exc)
            t = Transcript(run_id, seed, config_hash(cfg), status="failed", error=str(exc))
            out.append(t)
    return out

