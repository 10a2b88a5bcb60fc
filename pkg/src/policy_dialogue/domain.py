"""Shared data model: agents, scenario configuration, weights, prompts, memory."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

COMPONENTS = ("T", "M", "D")
WEIGHT_MIN = 0.0
WEIGHT_MAX = 2.0
NO_PRIOR_DISCUSSION = "(no prior discussion)"
DEFAULT_SENTENCE_LIMIT = 5


class Tier(str, Enum):
    LOW = "low"
    MID = "mid"
    HIGH = "high"


class RuleKind(str, Enum):
    NONE = "none"
    LIGHT = "light"
    STRUCT = "struct"


@dataclass(frozen=True)
class RuleTemplate:
    kind: RuleKind = RuleKind.NONE
    sentence_limit: int = DEFAULT_SENTENCE_LIMIT

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.kind is RuleKind.LIGHT and self.sentence_limit < 1:
            raise ValueError("light sentence_limit must be >= 1")

    @classmethod
    def parse(cls, value: str | RuleTemplate | dict) -> RuleTemplate:
        if isinstance(value, RuleTemplate):
            return value
        if isinstance(value, dict):
            return cls(RuleKind(value.get("kind", "none")), int(value.get("sentence_limit", DEFAULT_SENTENCE_LIMIT)))
        name = str(value).strip().lower()
        # "light:3" sets the sentence limit inline
        if ":" in name:
            kind, _, limit = name.partition(":")
            return cls(RuleKind(kind), int(limit))
        return cls(RuleKind(name))

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class WeightVector:
    """Emphasis on persona (T), memory (M) and retrieved knowledge (D).

    Construction does not clamp or raise; range checks belong to
    :func:`validate_scenario` and to the scheduler, which clamps its outputs.
    """

    w_T: float = 1.0
    w_M: float = 1.0
    w_D: float = 1.0

    def get(self, component: str) -> float:
        return {"T": self.w_T, "M": self.w_M, "D": self.w_D}[component]

    def replace(self, component: str, value: float) -> WeightVector:
        values = {"T": self.w_T, "M": self.w_M, "D": self.w_D}
        values[component] = value
        return WeightVector(values["T"], values["M"], values["D"])

    def violations(self) -> list[str]:
        return [
            f"w_{c} out of [0,2]"
            for c in COMPONENTS
            if not (WEIGHT_MIN <= self.get(c) <= WEIGHT_MAX)
        ]

    def as_dict(self) -> dict[str, float]:
        return {"t": self.w_T, "m": self.w_M, "d": self.w_D}

    def label(self) -> str:
        return f"T{self.w_T:g}-M{self.w_M:g}-D{self.w_D:g}"


@dataclass(frozen=True)
class AdaptiveConfig:
    """Per-round weight schedule settings (trend step, caps, correction size)."""

    enabled: bool = False
    alpha: float = 0.2
    trend_enabled: bool = True
    trend_step: float = 0.1
    m_cap: float = 2.0
    d_floor: float = 0.5
    # trend indexed by k (round number) or k - 1
    trend_offset: int = 0

    def violations(self) -> list[str]:
        out = []
        if not (0 < self.alpha <= 2):
            out.append("alpha must be in (0,2]")
        if not (0 < self.trend_step <= 1):
            out.append("trend_step must be in (0,1]")
        if self.trend_offset not in (0, 1):
            out.append("trend_offset must be 0 or 1")
        return out


@dataclass(frozen=True)
class PolicySpec:
    rule: RuleTemplate = field(default_factory=RuleTemplate)
    weights: WeightVector = field(default_factory=WeightVector)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    # prompt blocks to include; omitting one removes the block entirely
    mask: frozenset[str] = frozenset(COMPONENTS)

    def label(self) -> str:
        parts = [self.rule.name, self.weights.label()]
        if self.adaptive.enabled:
            parts.append(f"adaptive{self.adaptive.alpha:g}")
        if self.mask != frozenset(COMPONENTS):
            parts.append("keep-" + ("".join(c for c in COMPONENTS if c in self.mask) or "none"))
        return "_".join(parts)


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    persona_task: str
    knowledge_ref: str
    backend_ref: str = "stub-chat"


@dataclass(frozen=True)
class ScenarioConfig:
    query: str
    agents: tuple[AgentSpec, ...]
    rounds: int = 10
    policies: dict[str, PolicySpec] = field(default_factory=dict)
    retrieval_n: int = 3
    memory_window: int | None = None
    seed: int = 0
    name: str = "scenario"
    query_id: str = "Q1"
    # agents see same-round predecessors when True
    sequential: bool = False
    # online scheduler feedback: "lexical" or "judge"
    feedback_mode: str = "lexical"
    max_chunk_chars: int = 500

    @property
    def window(self) -> int:
        return self.memory_window if self.memory_window is not None else 2 * len(self.agents)

    def policy_for(self, agent_id: str) -> PolicySpec:
        return self.policies[agent_id]


def validate_scenario(config: ScenarioConfig) -> list[str]:
    """Return every invariant violation in ``config``; an empty list means valid."""
    problems: list[str] = []
    if not config.query or not config.query.strip():
        problems.append("query must be non-empty")
    if config.rounds < 1:
        problems.append("rounds must be ≥ 1")
    if config.retrieval_n < 1:
        problems.append("retrieval_n must be ≥ 1")
    if config.memory_window is not None and config.memory_window < 1:
        problems.append("memory_window must be ≥ 1")
    if not config.agents:
        problems.append("agents list must be non-empty")
    if config.feedback_mode not in ("lexical", "judge"):
        problems.append("feedback_mode must be 'lexical' or 'judge'")
    if config.max_chunk_chars < 200:
        problems.append("max_chunk_chars must be ≥ 200")
    seen: set[str] = set()
    for agent in config.agents:
        if agent.agent_id in seen:
            problems.append(f"duplicate agent_id {agent.agent_id!r}")
        seen.add(agent.agent_id)
        if not agent.persona_task or not agent.persona_task.strip():
            problems.append(f"agent {agent.agent_id!r}: persona_task must be non-empty")
        if not agent.knowledge_ref:
            problems.append(f"agent {agent.agent_id!r}: knowledge_ref must be set")
        policy = config.policies.get(agent.agent_id)
        if policy is None:
            problems.append(f"agent {agent.agent_id!r}: policy missing")
            continue
        problems.extend(policy.weights.violations())
        problems.extend(policy.adaptive.violations())
        unknown = set(policy.mask) - set(COMPONENTS)
        if unknown:
            problems.append(f"mask has unknown components {sorted(unknown)}")
    return problems


@dataclass(frozen=True)
class RetrievedEvidence:
    round: int
    agent_id: str
    # (chunk_id, cosine score), best first
    items: tuple[tuple[str, float], ...] = ()
    # chunk_id -> chunk text, so transcripts are self-contained
    texts: dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def chunk_ids(self) -> list[str]:
        return [cid for cid, _ in self.items]


@dataclass(frozen=True)
class Utterance:
    round: int
    agent_id: str
    text: str
    prompt_snapshot: str = ""
    weights_snapshot: WeightVector = field(default_factory=WeightVector)
    evidence_ids: tuple[str, ...] = ()


def serialize_utterances(utterances: Iterable[Utterance]) -> str:
    """``AgentId: text`` lines, oldest first."""
    return "\n".join(f"{u.agent_id}: {u.text}" for u in utterances)


class DialogueMemory:
    """Append-only shared message pool visible to every agent."""

    def __init__(self, utterances: Sequence[Utterance] = ()) -> None:
        self._items: list[Utterance] = []
        for u in utterances:
            self.append(u)

    def append(self, utterance: Utterance) -> None:
        if self._items and utterance.round < self._items[-1].round:
            raise ValueError(
                f"round {utterance.round} appended after round {self._items[-1].round}"
            )
        self._items.append(utterance)

    def extend(self, utterances: Iterable[Utterance]) -> None:
        for u in utterances:
            self.append(u)

    @property
    def utterances(self) -> tuple[Utterance, ...]:
        return tuple(self._items)

    def window(self, size: int) -> tuple[Utterance, ...]:
        if size <= 0:
            return ()
        return tuple(self._items[-size:])

    def serialize(self) -> str:
        return serialize_utterances(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self._items)


@dataclass(frozen=True)
class AgentState:
    agent_id: str
    persona_task: str
    query: str
    memory_window: tuple[Utterance, ...] = ()
    evidence: RetrievedEvidence | None = None


@dataclass(frozen=True)
class PromptBlock:
    label: str
    title: str
    body: str
    instruction: str | None = None

    def render(self) -> str:
        lines = [f"[{self.label}] {self.title}"]
        if self.instruction:
            lines.append(f"Instruction: {self.instruction}")
        lines.append(self.body)
        return "\n".join(lines)


@dataclass(frozen=True)
class PromptAction:
    blocks: tuple[PromptBlock, ...]
    preamble: str = ""

    @property
    def rendered_text(self) -> str:
        parts = [self.preamble] if self.preamble else []
        parts.extend(b.render() for b in self.blocks)
        return "\n\n".join(parts)

    def block(self, label: str) -> PromptBlock | None:
        for b in self.blocks:
            if b.label == label:
                return b
        return None


@dataclass(frozen=True)
class BehaviorFeedback:
    """Previous-round behaviour that drives weight correction (rounds >= 2)."""

    used_evidence: bool
    responded_to_memory: bool

    def as_dict(self) -> dict[str, bool]:
        return {"used_evidence": self.used_evidence, "responded_to_memory": self.responded_to_memory}
