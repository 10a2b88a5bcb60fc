"""Prompt construction: weight tiers, micro-instructions, rule templates, block assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .domain import (
    COMPONENTS,
    NO_PRIOR_DISCUSSION,
    WEIGHT_MAX,
    WEIGHT_MIN,
    AgentState,
    PromptAction,
    PromptBlock,
    RuleKind,
    RuleTemplate,
    Tier,
    WeightVector,
    serialize_utterances,
)

LOW_MID_BOUNDARY = 0.85
MID_HIGH_BOUNDARY = 1.25
NO_EVIDENCE = "(no retrieved evidence)"

DEFAULT_MICRO_INSTRUCTIONS: dict[str, dict[Tier, str]] = {
    "T": {
        Tier.HIGH: (
            "Speak explicitly from the [T] perspective. First state your stance and "
            "role-specific priority, then justify with reasons."
        ),
        Tier.MID: "Reflect the [T] perspective and state your position when appropriate.",
        Tier.LOW: "You may keep the [T] perspective implicit; focus on arguments.",
    },
    "M": {
        Tier.HIGH: (
            "Begin with a 1–2 sentence summary of the recent turns in [M] and address "
            "unresolved points directly."
        ),
        Tier.MID: "Consider the recent discussion [M] and avoid repeating earlier content.",
        Tier.LOW: "You may respond without summarising [M]; avoid verbatim repetition.",
    },
    "D": {
        Tier.HIGH: (
            "Before concluding, list at least 2 concrete evidence points from the retrieved "
            "snippets [D]; quote/paraphrase and tie them to your claims."
        ),
        Tier.MID: (
            "Evidence (Preferred): Use relevant retrieved snippets [D] to support key claims "
            "when available."
        ),
        Tier.LOW: (
            "Evidence (Optional): You may proceed without citing retrieved snippets [D] if "
            "not essential."
        ),
    },
}

LIGHT_TEMPLATE = (
    "First directly answer [Q], then provide 1–2 pieces of evidence from [D]; respond to "
    "[M] if necessary; limit the response to at most {N} sentences."
)
STRUCT_TEMPLATE = (
    "First extract four types of key points in order (no more than 3 each) from [M]: "
    "1) arguments supporting the goal, 2) arguments threatening the goal, "
    "3) unresolved points of conflict, 4) potential opportunities for cooperation; "
    "then generate a response of no more than 3 sentences based on these points, "
    "giving priority to citing [D]."
)
DEFAULT_PREAMBLE = (
    "You are {agent_id}, a participant in a multi-party discussion. "
    "Stay in character and reply with your next contribution only."
)

BLOCK_TITLES = {
    "T": "Persona and task",
    "M": "Recent discussion",
    "D": "Retrieved knowledge",
    "Q": "Discussion query",
    "R": "Response rules",
}


def tier_of(w: float) -> Tier:
    """Map a weight in [0, 2] onto low [0, 0.85), mid [0.85, 1.25), high [1.25, 2]."""
    if not (WEIGHT_MIN <= w <= WEIGHT_MAX):
        raise ValueError(f"weight {w} outside [0, 2]; clamp before mapping")
    if w < LOW_MID_BOUNDARY:
        return Tier.LOW
    if w < MID_HIGH_BOUNDARY:
        return Tier.MID
    return Tier.HIGH


@dataclass(frozen=True)
class PromptTexts:
    """Instruction wording: micro-instructions, rule templates and preamble.

    Defaults carry the reference wording; :meth:`load` overlays a YAML file.
    """

    micro: Mapping[str, Mapping[Tier, str]] = field(
        default_factory=lambda: DEFAULT_MICRO_INSTRUCTIONS
    )
    light: str = LIGHT_TEMPLATE
    struct: str = STRUCT_TEMPLATE
    preamble: str = DEFAULT_PREAMBLE

    def __post_init__(self) -> None:
        for c in COMPONENTS:
            for t in Tier:
                if not self.micro.get(c, {}).get(t):
                    raise ValueError(f"micro-instruction missing for {c}/{t.value}")

    def instruction(self, component: str, tier: Tier) -> str:
        return self.micro[component][tier]

    @classmethod
    def from_mapping(cls, data: Mapping) -> PromptTexts:
        micro = {c: dict(DEFAULT_MICRO_INSTRUCTIONS[c]) for c in COMPONENTS}
        for comp, tiers in (data.get("micro_instructions") or {}).items():
            for tier, text in tiers.items():
                micro[comp][Tier(tier)] = str(text)
        rules = data.get("rules") or {}
        return cls(
            micro=micro,
            light=rules.get("light", LIGHT_TEMPLATE),
            struct=rules.get("struct", STRUCT_TEMPLATE),
            preamble=data.get("preamble", DEFAULT_PREAMBLE),
        )

    @classmethod
    def load(cls, path: str | Path) -> PromptTexts:
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {})


DEFAULT_TEXTS = PromptTexts()


def render_rule(template: RuleTemplate, texts: PromptTexts = DEFAULT_TEXTS) -> str:
    if template.kind is RuleKind.NONE:
        return ""
    if template.kind is RuleKind.LIGHT:
        return texts.light.replace("{N}", str(template.sentence_limit))
    return texts.struct


def _memory_body(state: AgentState) -> str:
    if not state.memory_window:
        return NO_PRIOR_DISCUSSION
    return serialize_utterances(state.memory_window)


def _evidence_body(state: AgentState) -> str:
    ev = state.evidence
    if ev is None or not ev.items:
        return NO_EVIDENCE
    return "\n".join(f"[{cid}] {' '.join(ev.texts.get(cid, '').split())}" for cid, _ in ev.items)


def build_action(
    state: AgentState,
    rule: RuleTemplate,
    weights: WeightVector,
    texts: PromptTexts = DEFAULT_TEXTS,
    mask: frozenset[str] | None = None,
) -> PromptAction:
    """Assemble the prompt for one agent turn.

    Blocks appear in the order T, M, D, Q, R. Each included T/M/D block carries
    the micro-instruction for its weight tier directly before its body. ``mask``
    lists the T/M/D blocks to keep (default: all); Q is always present and R
    only when a rule template is active.
    """
    include = frozenset(COMPONENTS) if mask is None else mask
    bodies = {
        "T": state.persona_task,
        "M": _memory_body(state),
        "D": _evidence_body(state),
    }
    blocks: list[PromptBlock] = []
    for c in COMPONENTS:
        if c not in include:
            continue
        instruction = texts.instruction(c, tier_of(weights.get(c)))
        blocks.append(PromptBlock(c, BLOCK_TITLES[c], bodies[c], instruction))
    blocks.append(PromptBlock("Q", BLOCK_TITLES["Q"], state.query))
    rule_text = render_rule(rule, texts)
    if rule_text:
        blocks.append(PromptBlock("R", BLOCK_TITLES["R"], rule_text))
    preamble = texts.preamble.replace("{agent_id}", state.agent_id) if texts.preamble else ""
    return PromptAction(tuple(blocks), preamble)
