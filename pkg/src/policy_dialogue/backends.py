"""Chat, embedding and judge clients: OpenAI-compatible HTTP plus deterministic stubs."""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np
import yaml

from .domain import NO_PRIOR_DISCUSSION, Utterance

log = logging.getLogger(__name__)

KINDS = ("chat", "embedding", "judge")
JUDGE_TASKS = ("responsiveness", "rebuttal")
STUB = "stub"
DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 512
DEFAULT_EMBED_DIM = 64
ECHO_CHARS = 200


class BackendError(RuntimeError):
    """A backend call failed after exhausting its retries."""


@dataclass(frozen=True)
class BackendBinding:
    backend_id: str
    kind: str
    endpoint: str = STUB
    model: str = ""
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int | None = 0
    # stub chat: "generative", "echo" or "script"
    mode: str = "generative"
    script: Mapping[str, str] = field(default_factory=dict)
    dim: int = DEFAULT_EMBED_DIM
    api_key_env: str = "OPENAI_API_KEY"
    max_concurrency: int = 4
    # characters accepted by an embedding model; longer inputs keep their tail
    max_input_chars: int = 8000
    backoff: float = 0.5

    @property
    def is_stub(self) -> bool:
        return self.endpoint == STUB

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            out.append(f"backend {self.backend_id!r}: unknown kind {self.kind!r}")
        if self.is_stub and self.seed is None:
            out.append(f"backend {self.backend_id!r}: stub bindings require a seed")
        if not self.is_stub and not self.model:
            out.append(f"backend {self.backend_id!r}: model name required")
        if self.max_retries < 0:
            out.append(f"backend {self.backend_id!r}: max_retries must be >= 0")
        if self.max_concurrency < 1:
            out.append(f"backend {self.backend_id!r}: max_concurrency must be >= 1")
        return out

    @classmethod
    def from_mapping(cls, backend_id: str, data: Mapping[str, Any]) -> BackendBinding:
        known = {f for f in cls.__dataclass_fields__ if f != "backend_id"}
        extra = set(data) - known
        if extra:
            raise ValueError(f"backend {backend_id!r}: unknown keys {sorted(extra)}")
        return cls(backend_id=backend_id, **dict(data))


def request_hash(payload: Any) -> str:
    return hashlib.sha256(repr(payload).encode("utf-8")).hexdigest()[:16]


@dataclass
class CallLog:
    """Thread-safe record of every backend request/response pair."""

    records: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, role: str, backend_id: str, request: Any, response: Any, latency_ms: float) -> None:
        with self._lock:
            self.records.append(
                {
                    "role": role,
                    "backend_id": backend_id,
                    "request_hash": request_hash(request),
                    "response": response,
                    "latency_ms": round(latency_ms, 3),
                }
            )


# -- HTTP transport ---------------------------------------------------------


class _HttpClient:
    def __init__(self, binding: BackendBinding, transport: httpx.BaseTransport | None = None) -> None:
        self.binding = binding
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(binding.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=binding.endpoint.rstrip("/"),
            headers=headers,
            timeout=binding.timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(binding.max_concurrency)

    def post(self, path: str, payload: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.binding.max_retries + 1):
            if attempt:
                time.sleep(self.binding.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._http.post(path, json=payload)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    continue
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                if isinstance(exc, httpx.HTTPStatusError):
                    break
        raise BackendError(
            f"{self.binding.backend_id}: request to {path} failed after "
            f"{self.binding.max_retries + 1} attempts: {last}"
        )


# -- chat -------------------------------------------------------------------


@dataclass(frozen=True)
class ChatResult:
    text: str
    latency_ms: float


class ChatClient(Protocol):
    binding: BackendBinding

    def complete(
        self, prompt: str, *, agent_id: str = "", round: int = 0, seed: int | None = None
    ) -> ChatResult: ...


class OpenAIChat:
    def __init__(self, binding: BackendBinding, transport: httpx.BaseTransport | None = None) -> None:
        self.binding = binding
        self._client = _HttpClient(binding, transport)

    def complete(
        self, prompt: str, *, agent_id: str = "", round: int = 0, seed: int | None = None
    ) -> ChatResult:
        payload = {
            "model": self.binding.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.binding.temperature,
            "max_tokens": self.binding.max_tokens,
        }
        if seed is not None:
            payload["seed"] = seed
        t0 = time.perf_counter()
        data = self._client.post("/chat/completions", payload)
        latency = (time.perf_counter() - t0) * 1000
        try:
            text = (data["choices"][0]["message"]["content"] or "").strip()
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.binding.backend_id}: malformed chat response") from exc
        if not text:
            raise BackendError(f"{self.binding.backend_id}: empty chat response")
        return ChatResult(text, latency)


_BLOCK_RE = re.compile(r"^\[(T|M|D|Q|R)\] [^\n]*\n", re.MULTILINE)
_WORD_RE = re.compile(r"[A-Za-z0-9']+")

_FILLER = (
    "the trade-offs deserve a careful and honest look",
    "any plan has to work for people on the ground",
    "long-term costs matter as much as short-term gains",
    "we should look for a compromise that protects core interests",
    "local knowledge ought to shape the final decision",
    "a phased approach would reduce the risk of unintended harm",
    "clear rules and fair compensation would build trust",
    "monitoring and review should be built in from the start",
    "the burden should not fall on a single group",
    "public funding should follow measurable outcomes",
    "incentives tend to work better than outright bans",
    "the evidence points to uneven effects across regions",
    "we need to hear from those most affected before acting",
    "transparency about data and costs is essential",
    "small pilots could show what works before scaling up",
)
_QUESTION_WORDS = {"should", "would", "could", "which", "there", "their", "given", "between", "while"}
_OPENERS = ("I think", "In my view", "To be clear", "Frankly", "Overall", "Still", "Put simply")


def parse_prompt_blocks(prompt: str) -> dict[str, tuple[str | None, str]]:
    """Split a rendered prompt into ``{label: (instruction, body)}``."""
    matches = list(_BLOCK_RE.finditer(prompt))
    out: dict[str, tuple[str | None, str]] = {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(prompt)
        content = prompt[m.end() : end].rstrip("\n")
        instruction = None
        if content.startswith("Instruction: "):
            first, _, content = content.partition("\n")
            instruction = first[len("Instruction: ") :]
        out[m.group(1)] = (instruction, content)
    return out


def _tier_from_instruction(component: str, instruction: str | None) -> str:
    from .policy import DEFAULT_MICRO_INSTRUCTIONS

    for tier, text in DEFAULT_MICRO_INSTRUCTIONS[component].items():
        if instruction == text:
            return tier.value
    return "mid"


def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text)


class StubChat:
    """Deterministic offline chat backend.

    ``echo`` returns the first 200 prompt characters, ``script`` looks up
    ``"<agent_id>:<round>"`` in ``binding.script``, and ``generative`` composes
    a reply from the prompt's blocks whose behaviour follows the weight tiers:
    high D tiers quote evidence more often, high M tiers address the previous
    speaker by name more often, high T tiers restate the persona.
    """

    def __init__(self, binding: BackendBinding) -> None:
        self.binding = binding

    def _rng(self, prompt: str, agent_id: str, round: int, seed: int | None) -> random.Random:
        key = f"{self.binding.seed}|{seed}|{agent_id}|{round}|{prompt}"
        digest = hashlib.sha256(key.encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def complete(
        self, prompt: str, *, agent_id: str = "", round: int = 0, seed: int | None = None
    ) -> ChatResult:
        mode = self.binding.mode
        if mode == "echo":
            text = prompt[:ECHO_CHARS]
        elif mode == "script":
            key = f"{agent_id}:{round}"
            text = self.binding.script.get(key) or self.binding.script.get("*") or f"{agent_id} has nothing to add."
        elif mode == "generative":
            text = self._generate(prompt, agent_id, round, seed)
        else:
            raise BackendError(f"unknown stub mode {mode!r}")
        return ChatResult(text if text.strip() else "(silence)", 0.0)

    def _generate(self, prompt: str, agent_id: str, round: int, seed: int | None) -> str:
        rng = self._rng(prompt, agent_id, round, seed)
        blocks = parse_prompt_blocks(prompt)
        tiers = {c: _tier_from_instruction(c, blocks[c][0]) if c in blocks else None for c in "TMD"}
        rule = blocks.get("R", (None, ""))[1]
        sentences: list[str] = []

        if "T" in blocks:
            p_persona = {"high": 0.95, "mid": 0.6, "low": 0.25}[tiers["T"]]
            if rng.random() < p_persona:
                persona = blocks["T"][1].split(". ")[0].rstrip(".")
                persona = re.sub(r"^You are\b", "I am", persona)
                persona = re.sub(r"\byour\b", "my", persona, flags=re.IGNORECASE)
                sentences.append(f"Speaking as {agent_id}, {persona[0].lower()}{persona[1:]}.")

        if "M" in blocks and blocks["M"][1] != NO_PRIOR_DISCUSSION:
            lines = [ln for ln in blocks["M"][1].splitlines() if ": " in ln]
            others = [ln for ln in lines if not ln.startswith(f"{agent_id}: ")]
            p_ref = {"high": 0.9, "mid": 0.65, "low": 0.35}[tiers["M"]]
            if others and rng.random() < p_ref:
                speaker, _, said = others[-1].partition(": ")
                p_oppose = {"high": 0.6, "mid": 0.4, "low": 0.25}[tiers["T"] or "mid"]
                verb = "I disagree with" if rng.random() < p_oppose else "I agree with"
                words = _words(said)
                start = rng.randrange(max(1, len(words) - 5))
                quoted = " ".join(words[start : start + 5])
                sentences.append(f"Responding to {speaker}, {verb} the claim that {quoted}.")

        if "D" in blocks:
            snippets = [ln.split("] ", 1)[1] for ln in blocks["D"][1].splitlines() if ln.startswith("[") and "] " in ln]
            p_cite = {"high": 0.85, "mid": 0.5, "low": 0.2}[tiers["D"]]
            if rule:
                p_cite = min(1.0, p_cite + 0.15)
            if snippets and rng.random() < p_cite:
                words = _words(rng.choice(snippets))
                span = rng.randint(8, 14)
                start = rng.randrange(max(1, len(words) - span))
                sentences.append(f"The evidence notes that {' '.join(words[start : start + span])}.")

        q_words = [w for w in _words(blocks.get("Q", (None, ""))[1]) if len(w) > 4 and w.lower() not in _QUESTION_WORDS]
        topic = " ".join(q_words[:3]).lower() or "this question"
        for _ in range(rng.randint(1, 3)):
            opener = rng.choice(_OPENERS)
            sentences.append(f"{opener}, on {topic}, {rng.choice(_FILLER)}.")

        if rule.startswith("First extract"):
            sentences = sentences[:3]
        else:
            m = re.search(r"at most (\d+) sentences", rule)
            if m:
                sentences = sentences[: int(m.group(1))]
        return " ".join(sentences)


# -- embeddings ---------------------------------------------------------------


class Embedder(Protocol):
    binding: BackendBinding

    @property
    def dim(self) -> int: ...

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def l2_normalize(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[None, :]
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise BackendError("cannot normalise a zero embedding")
    return vectors / norms


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class StubEmbedder:
    """Signed hashed bag-of-words, L2-normalised."""

    def __init__(self, binding: BackendBinding) -> None:
        self.binding = binding

    @property
    def dim(self) -> int:
        return self.binding.dim

    def _slot(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(
            hashlib.blake2b(f"{self.binding.seed}:{token}".encode(), digest_size=8).digest(), "big"
        )
        return h % self.dim, (1.0 if (h >> 32) & 1 else -1.0)

    def _one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            i, sign = self._slot(tok)
            vec[i] += sign
        if not vec.any():
            i, _ = self._slot("<empty>")
            vec[i] = 1.0
        return vec / np.linalg.norm(vec)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self._one(t) for t in texts])


class OpenAIEmbedder:
    def __init__(
        self,
        binding: BackendBinding,
        transport: httpx.BaseTransport | None = None,
        call_log: CallLog | None = None,
    ) -> None:
        self.binding = binding
        self._client = _HttpClient(binding, transport)
        self._dim: int | None = binding.dim if binding.dim else None
        self.call_log = call_log

    @property
    def dim(self) -> int:
        if self._dim is None:
            self._dim = self.embed(["dimension probe"]).shape[1]
        return self._dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self._dim or 0))
        texts = [t[-self.binding.max_input_chars :] for t in texts]
        payload = {"model": self.binding.model, "input": list(texts)}
        t0 = time.perf_counter()
        data = self._client.post("/embeddings", payload)
        latency = (time.perf_counter() - t0) * 1000
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            vectors = np.array([r["embedding"] for r in rows], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"{self.binding.backend_id}: malformed embedding response") from exc
        if len(vectors) != len(texts):
            raise BackendError(f"{self.binding.backend_id}: expected {len(texts)} vectors, got {len(vectors)}")
        if self.call_log is not None:
            self.call_log.add("embedding", self.binding.backend_id, payload, f"{len(vectors)} vectors", latency)
        self._dim = vectors.shape[1]
        return l2_normalize(vectors)


# -- judge --------------------------------------------------------------------


def load_judge_prompts() -> dict[str, str]:
    text = resources.files("policy_dialogue").joinpath("assets/judge_prompts.yaml").read_text("utf-8")
    return yaml.safe_load(text)


@dataclass(frozen=True)
class JudgeResult:
    value: int | None
    flags: tuple[str, ...] = ()
    raw: str = ""


def parse_binary(text: str) -> int | None:
    """Read a yes/no (or 1/0) verdict from the first word of a judge reply."""
    m = re.match(r"\W*(\w+)", text or "")
    if not m:
        return None
    word = m.group(1).lower()
    if word in ("yes", "1", "true"):
        return 1
    if word in ("no", "0", "false"):
        return 0
    return None


_OPPOSITION_RE = re.compile(
    r"\b(disagree|oppose|reject|wrong|however|but|object|dispute|unconvincing)\b", re.IGNORECASE
)


class StubJudge:
    """Rule-based judge: responsive iff the reply names the previous speaker;
    a rebuttal additionally needs an opposition marker."""

    def __init__(self, binding: BackendBinding) -> None:
        self.binding = binding

    def judge(self, task: str, prev: Utterance, curr: Utterance) -> JudgeResult:
        if task not in JUDGE_TASKS:
            raise ValueError(f"unknown judge task {task!r}")
        if not curr.text.strip():
            return JudgeResult(0)
        mentions = re.search(rf"\b{re.escape(prev.agent_id)}\b", curr.text) is not None
        if task == "responsiveness":
            return JudgeResult(int(mentions))
        return JudgeResult(int(mentions and _OPPOSITION_RE.search(curr.text) is not None))


class LLMJudge:
    """Binary judge backed by a chat model and the bundled prompt templates."""

    def __init__(
        self,
        binding: BackendBinding,
        chat: ChatClient | None = None,
        prompts: Mapping[str, str] | None = None,
        show_speakers: bool = True,
        call_log: CallLog | None = None,
    ) -> None:
        self.binding = binding
        self.chat = chat or OpenAIChat(binding)
        self.prompts = dict(prompts or load_judge_prompts())
        self.show_speakers = show_speakers
        self.call_log = call_log

    def render(self, task: str, prev: Utterance, curr: Utterance) -> str:
        prev_name = prev.agent_id if self.show_speakers else "Speaker A"
        curr_name = curr.agent_id if self.show_speakers else "Speaker B"
        return self.prompts[task].format(
            prev_speaker=prev_name, prev_text=prev.text, curr_speaker=curr_name, curr_text=curr.text
        )

    def judge(self, task: str, prev: Utterance, curr: Utterance) -> JudgeResult:
        if task not in JUDGE_TASKS:
            raise ValueError(f"unknown judge task {task!r}")
        if not curr.text.strip():
            return JudgeResult(0)
        prompt = self.render(task, prev, curr)
        raw = ""
        for _ in range(2):
            result = self.chat.complete(prompt)
            raw = result.text
            if self.call_log is not None:
                self.call_log.add("judge", self.binding.backend_id, prompt, raw, result.latency_ms)
            verdict = parse_binary(raw)
            if verdict is not None:
                return JudgeResult(verdict, raw=raw)
        return JudgeResult(0, ("judge_parse_failure",), raw)


class Judge(Protocol):
    binding: BackendBinding

    def judge(self, task: str, prev: Utterance, curr: Utterance) -> JudgeResult: ...


# -- registry -----------------------------------------------------------------

DEFAULT_BINDINGS = {
    "stub-chat": BackendBinding("stub-chat", "chat"),
    "stub-embed": BackendBinding("stub-embed", "embedding"),
    "stub-judge": BackendBinding("stub-judge", "judge"),
}


def as_stub(binding: BackendBinding) -> BackendBinding:
    if binding.is_stub:
        return binding
    return BackendBinding(binding.backend_id, binding.kind, STUB, seed=binding.seed or 0, dim=DEFAULT_EMBED_DIM)


class BackendRegistry:
    """Resolves backend ids to clients; clients are created once and shared."""

    def __init__(
        self,
        bindings: Mapping[str, BackendBinding] | None = None,
        force_stub: bool = False,
        transport: httpx.BaseTransport | None = None,
        judge_show_speakers: bool = True,
    ) -> None:
        merged = dict(DEFAULT_BINDINGS)
        merged.update(bindings or {})
        if force_stub:
            merged = {k: as_stub(b) for k, b in merged.items()}
        self.bindings = merged
        self.transport = transport
        self.judge_show_speakers = judge_show_speakers
        self.call_log = CallLog()
        self._clients: dict[str, Any] = {}
        self._lock = threading.Lock()

    def violations(self) -> list[str]:
        return [v for b in self.bindings.values() for v in b.violations()]

    def _binding(self, backend_id: str, kind: str) -> BackendBinding:
        try:
            binding = self.bindings[backend_id]
        except KeyError:
            raise KeyError(f"unknown backend {backend_id!r}") from None
        if binding.kind != kind:
            raise ValueError(f"backend {backend_id!r} is {binding.kind}, not {kind}")
        return binding

    def _get(self, backend_id: str, kind: str, factory: Callable[[BackendBinding], Any]) -> Any:
        with self._lock:
            if backend_id not in self._clients:
                self._clients[backend_id] = factory(self._binding(backend_id, kind))
            return self._clients[backend_id]

    def chat(self, backend_id: str) -> ChatClient:
        return self._get(
            backend_id, "chat", lambda b: StubChat(b) if b.is_stub else OpenAIChat(b, self.transport)
        )

    def embedder(self, backend_id: str) -> Embedder:
        return self._get(
            backend_id,
            "embedding",
            lambda b: StubEmbedder(b) if b.is_stub else OpenAIEmbedder(b, self.transport, self.call_log),
        )

    def judge(self, backend_id: str) -> Judge:
        def factory(b: BackendBinding) -> Judge:
            if b.is_stub:
                return StubJudge(b)
            return LLMJudge(
                b, OpenAIChat(b, self.transport), show_speakers=self.judge_show_speakers, call_log=self.call_log
            )

        return self._get(backend_id, "judge", factory)


# -- functional surface ---------------------------------------------------------


def _client_for(binding: BackendBinding) -> Any:
    if binding.kind == "chat":
        return StubChat(binding) if binding.is_stub else OpenAIChat(binding)
    if binding.kind == "embedding":
        return StubEmbedder(binding) if binding.is_stub else OpenAIEmbedder(binding)
    return StubJudge(binding) if binding.is_stub else LLMJudge(binding)


def chat_complete(binding: BackendBinding, prompt_text: str, **meta: Any) -> str:
    if binding.kind != "chat":
        raise ValueError("chat_complete needs a chat binding")
    return _client_for(binding).complete(prompt_text, **meta).text


def embed(binding: BackendBinding, texts: Sequence[str]) -> list[np.ndarray]:
    if binding.kind != "embedding":
        raise ValueError("embed needs an embedding binding")
    return list(_client_for(binding).embed(list(texts)))


def judge_binary(binding: BackendBinding, judge_task: str, prev: Utterance, curr: Utterance) -> int:
    if binding.kind != "judge":
        raise ValueError("judge_binary needs a judge binding")
    value = _client_for(binding).judge(judge_task, prev, curr).value
    return 0 if value is None else value
