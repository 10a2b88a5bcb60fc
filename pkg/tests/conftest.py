from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from policy_dialogue.backends import BackendBinding, BackendRegistry
from policy_dialogue.domain import AgentSpec, PolicySpec, ScenarioConfig
from policy_dialogue.knowledge import Corpus, KnowledgeBase
from policy_dialogue.scenario import load_scenario

FIXTURES = Path(__file__).parent / "fixtures"

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool | None, detail: str) -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE_LINES[number] = f"criterion {number}: {status} - {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


class FixedEmbedder:
    """Embedder returning hand-chosen vectors for known texts."""

    def __init__(self, table: dict[str, np.ndarray], backend_id: str = "fixed") -> None:
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        self.binding = BackendBinding(backend_id, "embedding")

    @property
    def dim(self) -> int:
        return len(next(iter(self.table.values())))

    def embed(self, texts):
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.table[t] for t in texts])


@pytest.fixture
def registry():
    return BackendRegistry(force_stub=True)


@pytest.fixture(scope="session")
def land():
    return load_scenario("builtin:land")


@pytest.fixture(scope="session")
def education():
    return load_scenario("builtin:education")


@pytest.fixture(scope="session")
def land_kb(land):
    return land.knowledge(land.registry(True))


SAMPLE_DOCS = {
    "alpha": (
        "Hedgerows shelter birds and insects across the farm. Field margins left unsown "
        "give pollinators food through the summer. Wet grassland stores carbon when water "
        "levels stay high. Grazing at low density keeps meadows open without damaging soil. "
        "Farm incomes depend on subsidies that reward these habitats."
    ),
    "beta": (
        "Walkers use permissive paths when signs are clear. Gates left open let livestock "
        "wander onto roads. Dogs off the lead disturb ewes during lambing season. Rangers "
        "report fewer conflicts where paths are fenced from grazing fields. Parking at "
        "trailheads reduces verge damage in villages."
    ),
}


def make_kb(agent_ids, embedder=None, max_chunk_chars=200) -> KnowledgeBase:
    """Tiny in-memory knowledge base: one corpus per agent id."""
    reg = BackendRegistry(force_stub=True)
    kb = KnowledgeBase(embedder or reg.embedder("stub-embed"))
    for i, aid in enumerate(agent_ids):
        docs = tuple((f"d{j}", SAMPLE_DOCS[name]) for j, name in enumerate(sorted(SAMPLE_DOCS)[i % 2 :] + sorted(SAMPLE_DOCS)[: i % 2]))
        kb.ingest(Corpus(aid, docs), max_chunk_chars=max_chunk_chars)
    return kb


def make_config(agent_ids=("a", "b"), rounds=2, policy=None, **kw) -> ScenarioConfig:
    agents = tuple(AgentSpec(a, f"You are {a}. You argue about land access.", a) for a in agent_ids)
    policy = policy or PolicySpec()
    return ScenarioConfig(
        query=kw.pop("query", "Should walkers have wider access to farmland?"),
        agents=agents,
        rounds=rounds,
        policies={a: policy for a in agent_ids},
        **kw,
    )
