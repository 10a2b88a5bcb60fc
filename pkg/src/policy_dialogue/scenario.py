"""Scenario files (YAML): agents, queries, policy, backends, corpora."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backends import BackendBinding, BackendRegistry
from .domain import (
    AdaptiveConfig,
    AgentSpec,
    PolicySpec,
    RuleTemplate,
    ScenarioConfig,
    WeightVector,
    validate_scenario,
)
from .knowledge import Corpus, EmbeddingCache, KnowledgeBase, load_corpus_dir
from .policy import DEFAULT_TEXTS, PromptTexts

BUILTIN_PREFIX = "builtin:"
BUILTIN_SCENARIOS = ("land", "education")

TOP_KEYS = {
    "name", "query", "queries", "rounds", "retrieval_n", "memory_window", "seed", "sequential",
    "feedback_mode", "max_chunk_chars", "corpora_dir", "agents", "policy", "backends",
    "judge_backend", "embed_backend", "prompt_texts", "judge_show_speakers", "responsiveness_scope",
}
AGENT_KEYS = {"id", "persona_task", "knowledge_ref", "backend_ref", "policy"}
POLICY_KEYS = {"rule", "sentence_limit", "w_T", "w_M", "w_D", "adaptive", "mask"}
ADAPTIVE_KEYS = {"enabled", "alpha", "trend", "trend_step", "m_cap", "d_floor", "trend_offset"}


class ScenarioFileError(ValueError):
    def __init__(self, violations: list[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = violations


def _unknown(data: Mapping, allowed: set[str], where: str) -> list[str]:
    return [f"{where}: unknown key {k!r}" for k in sorted(set(data) - allowed)]


def parse_policy(data: Mapping[str, Any] | None, base: PolicySpec | None = None) -> PolicySpec:
    base = base or PolicySpec()
    if not data:
        return base
    problems = _unknown(data, POLICY_KEYS, "policy")
    adaptive_raw = data.get("adaptive") or {}
    problems += _unknown(adaptive_raw, ADAPTIVE_KEYS, "policy.adaptive")
    if problems:
        raise ScenarioFileError(problems)
    rule = base.rule
    if "rule" in data:
        rule = RuleTemplate.parse(data["rule"])
    if "sentence_limit" in data:
        rule = RuleTemplate(rule.kind, int(data["sentence_limit"]))
    w = base.weights
    weights = WeightVector(
        float(data.get("w_T", w.w_T)), float(data.get("w_M", w.w_M)), float(data.get("w_D", w.w_D))
    )
    a = base.adaptive
    adaptive = AdaptiveConfig(
        enabled=bool(adaptive_raw.get("enabled", a.enabled)),
        alpha=float(adaptive_raw.get("alpha", a.alpha)),
        trend_enabled=bool(adaptive_raw.get("trend", a.trend_enabled)),
        trend_step=float(adaptive_raw.get("trend_step", a.trend_step)),
        m_cap=float(adaptive_raw.get("m_cap", a.m_cap)),
        d_floor=float(adaptive_raw.get("d_floor", a.d_floor)),
        trend_offset=int(adaptive_raw.get("trend_offset", a.trend_offset)),
    )
    mask = base.mask
    if "mask" in data:
        raw = data["mask"]
        mask = frozenset(raw if isinstance(raw, (list, tuple)) else str(raw).upper().replace("NONE", ""))
    return PolicySpec(rule, weights, adaptive, mask)


@dataclass
class Scenario:
    """A parsed scenario file: one agent roster, several queries, shared settings."""

    name: str
    queries: list[tuple[str, str]]
    agents: tuple[AgentSpec, ...]
    policies: dict[str, PolicySpec]
    rounds: int = 10
    retrieval_n: int = 3
    memory_window: int | None = None
    seed: int = 0
    sequential: bool = False
    feedback_mode: str = "lexical"
    max_chunk_chars: int = 500
    corpora_dir: Path | None = None
    bindings: dict[str, BackendBinding] = field(default_factory=dict)
    judge_backend: str = "stub-judge"
    embed_backend: str = "stub-embed"
    texts: PromptTexts = DEFAULT_TEXTS
    judge_show_speakers: bool = True
    responsiveness_scope: str = "last"
    source: str = ""

    def config(
        self, query_id: str | None = None, policy: PolicySpec | None = None, seed: int | None = None
    ) -> ScenarioConfig:
        """Concrete run configuration for one query, optionally overriding every
        agent's policy."""
        qid, text = self.query(query_id)
        policies = {a.agent_id: policy for a in self.agents} if policy is not None else dict(self.policies)
        return ScenarioConfig(
            query=text,
            agents=self.agents,
            rounds=self.rounds,
            policies=policies,
            retrieval_n=self.retrieval_n,
            memory_window=self.memory_window,
            seed=self.seed if seed is None else seed,
            name=self.name,
            query_id=qid,
            sequential=self.sequential,
            feedback_mode=self.feedback_mode,
            max_chunk_chars=self.max_chunk_chars,
        )

    def query(self, query_id: str | None = None) -> tuple[str, str]:
        if query_id is None:
            return self.queries[0]
        for qid, text in self.queries:
            if qid == query_id:
                return qid, text
        raise KeyError(f"unknown query {query_id!r}")

    @property
    def base_policy(self) -> PolicySpec:
        return self.policies[self.agents[0].agent_id]

    def violations(self) -> list[str]:
        problems: list[str] = []
        if not self.queries:
            problems.append("at least one query is required")
        if self.responsiveness_scope not in ("last", "any"):
            problems.append("responsiveness_scope must be 'last' or 'any'")
        if self.queries:
            problems.extend(validate_scenario(self.config()))
        registry = BackendRegistry(self.bindings)
        problems.extend(registry.violations())
        for agent in self.agents:
            b = registry.bindings.get(agent.backend_ref)
            if b is None:
                problems.append(f"agent {agent.agent_id!r}: unknown backend {agent.backend_ref!r}")
            elif b.kind != "chat":
                problems.append(f"agent {agent.agent_id!r}: backend {agent.backend_ref!r} is not a chat backend")
        for ref, kind in ((self.judge_backend, "judge"), (self.embed_backend, "embedding")):
            b = registry.bindings.get(ref)
            if b is None or b.kind != kind:
                problems.append(f"{kind} backend {ref!r} not defined")
        if self.corpora_dir is not None:
            for agent in self.agents:
                if not (self.corpora_dir / agent.knowledge_ref).is_dir():
                    problems.append(f"agent {agent.agent_id!r}: corpus directory {agent.knowledge_ref!r} not found")
        return problems

    def corpora(self) -> list[Corpus]:
        if self.corpora_dir is None:
            raise ScenarioFileError(["corpora_dir is not set"])
        refs = sorted({a.knowledge_ref for a in self.agents})
        return [load_corpus_dir(self.corpora_dir / ref) for ref in refs]

    def registry(self, force_stub: bool = False) -> BackendRegistry:
        return BackendRegistry(self.bindings, force_stub=force_stub, judge_show_speakers=self.judge_show_speakers)

    def knowledge(self, registry: BackendRegistry, cache: EmbeddingCache | None = None) -> KnowledgeBase:
        kb = KnowledgeBase(registry.embedder(self.embed_backend))
        kb.ingest_all(self.corpora(), max_chunk_chars=self.max_chunk_chars, cache=cache)
        return kb


def builtin_path(name: str) -> Path:
    root = resources.files("policy_dialogue").joinpath("fixtures", name, "scenario.yaml")
    return Path(str(root))


def resolve_path(spec: str | Path) -> Path:
    spec = str(spec)
    if spec.startswith(BUILTIN_PREFIX):
        return builtin_path(spec[len(BUILTIN_PREFIX) :])
    return Path(spec)


def parse_scenario(data: Mapping[str, Any], base_dir: Path | None = None, source: str = "") -> Scenario:
    if not isinstance(data, Mapping):
        raise ScenarioFileError(["scenario file must be a mapping"])
    problems = _unknown(data, TOP_KEYS, "scenario")
    agents_raw = data.get("agents") or []
    if not isinstance(agents_raw, list):
        problems.append("agents must be a list")
        agents_raw = []
    for i, a in enumerate(agents_raw):
        if not isinstance(a, Mapping):
            problems.append(f"agents[{i}] must be a mapping")
            continue
        problems += _unknown(a, AGENT_KEYS, f"agents[{i}]")
        for key in ("id", "persona_task", "knowledge_ref"):
            if key not in a:
                problems.append(f"agents[{i}]: missing {key!r}")
    if "query" not in data and "queries" not in data:
        problems.append("scenario needs 'query' or 'queries'")
    if problems:
        raise ScenarioFileError(problems)

    try:
        base_policy = parse_policy(data.get("policy"))
        agents, policies = [], {}
        for a in agents_raw:
            spec = AgentSpec(str(a["id"]), str(a["persona_task"]).strip(), str(a["knowledge_ref"]), str(a.get("backend_ref", "stub-chat")))
            agents.append(spec)
            policies[spec.agent_id] = parse_policy(a.get("policy"), base_policy)
        queries: list[tuple[str, str]] = []
        if "queries" in data:
            for i, q in enumerate(data["queries"]):
                if isinstance(q, Mapping):
                    queries.append((str(q["id"]), str(q["text"])))
                else:
                    queries.append((f"Q{i + 1}", str(q)))
        else:
            queries.append(("Q1", str(data["query"])))
        bindings = {
            bid: BackendBinding.from_mapping(bid, cfg) for bid, cfg in (data.get("backends") or {}).items()
        }
        corpora_dir = None
        if data.get("corpora_dir") is not None:
            corpora_dir = Path(data["corpora_dir"])
            if base_dir is not None and not corpora_dir.is_absolute():
                corpora_dir = base_dir / corpora_dir
        texts = DEFAULT_TEXTS
        if data.get("prompt_texts"):
            p = Path(data["prompt_texts"])
            texts = PromptTexts.load(base_dir / p if base_dir and not p.is_absolute() else p)
        mw = data.get("memory_window")
        return Scenario(
            name=str(data.get("name", "scenario")),
            queries=queries,
            agents=tuple(agents),
            policies=policies,
            rounds=int(data.get("rounds", 10)),
            retrieval_n=int(data.get("retrieval_n", 3)),
            memory_window=int(mw) if mw is not None else None,
            seed=int(data.get("seed", 0)),
            sequential=bool(data.get("sequential", False)),
            feedback_mode=str(data.get("feedback_mode", "lexical")),
            max_chunk_chars=int(data.get("max_chunk_chars", 500)),
            corpora_dir=corpora_dir,
            bindings=bindings,
            judge_backend=str(data.get("judge_backend", "stub-judge")),
            embed_backend=str(data.get("embed_backend", "stub-embed")),
            texts=texts,
            judge_show_speakers=bool(data.get("judge_show_speakers", True)),
            responsiveness_scope=str(data.get("responsiveness_scope", "last")),
            source=source,
        )
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ScenarioFileError):
            raise
        raise ScenarioFileError([f"invalid value: {exc}"]) from exc


def load_scenario(path: str | Path) -> Scenario:
    path = resolve_path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ScenarioFileError([f"cannot read {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ScenarioFileError([f"malformed YAML in {path}: {exc}"]) from exc
    return parse_scenario(data or {}, path.parent, str(path))


def with_overrides(scenario: Scenario, **changes: Any) -> Scenario:
    return replace(scenario, **changes)
