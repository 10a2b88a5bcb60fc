import json
import threading
import time

import httpx
import numpy as np
import pytest

from policy_dialogue.backends import (
    BackendBinding,
    BackendError,
    BackendRegistry,
    LLMJudge,
    OpenAIChat,
    OpenAIEmbedder,
    StubChat,
    StubEmbedder,
    StubJudge,
    chat_complete,
    embed,
    judge_binary,
    load_judge_prompts,
    parse_binary,
    parse_prompt_blocks,
)
from policy_dialogue.domain import AgentState, RuleTemplate, Utterance, WeightVector
from policy_dialogue.policy import build_action

STUB_EMBED = BackendBinding("stub-embed", "embedding")
LIVE = dict(endpoint="http://llm.test/v1", model="m", backoff=0.0)


# -- stub embedder --------------------------------------------------------------


def test_stub_embed_deterministic_and_unit():
    emb = StubEmbedder(STUB_EMBED)
    a, b = emb.embed(["x"]), emb.embed(["x"])
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a[0]) - 1) < 1e-12
    assert emb.embed([]).shape == (0, 64)
    assert embed(STUB_EMBED, []) == []
    # empty text still maps to a unit vector
    assert abs(np.linalg.norm(emb.embed([""])[0]) - 1) < 1e-12


def test_stub_embed_disjoint_vocabularies_near_orthogonal():
    # bound fixed after measuring 5x100 pairs: mean |cos| ~0.09, 97-100% below 0.3
    emb = StubEmbedder(STUB_EMBED)
    rng = np.random.default_rng(12345)
    vocab = [f"tok{i}" for i in range(2000)]
    cosines = []
    for _ in range(100):
        words = rng.choice(vocab, size=60, replace=False)
        na, nb = rng.integers(5, 31, size=2)
        a, b = " ".join(words[:na]), " ".join(words[30 : 30 + nb])
        u, v = emb.embed([a, b])
        cosines.append(abs(float(u @ v)))
    cosines = np.array(cosines)
    assert cosines.mean() < 0.15
    assert (cosines < 0.3).mean() >= 0.95


# -- stub chat ------------------------------------------------------------------


def _prompt(memory=(), weights=WeightVector(1, 1, 1), rule="none"):
    state = AgentState("farmer", "You are a farmer. You grow wheat.", "Should public paths cross farmland?", tuple(memory))
    return build_action(state, RuleTemplate.parse(rule), weights).rendered_text


def test_stub_chat_modes():
    echo = StubChat(BackendBinding("c", "chat", mode="echo"))
    prompt = _prompt()
    assert echo.complete(prompt).text == prompt[:200]
    script = StubChat(BackendBinding("c", "chat", mode="script", script={"a:1": "hello", "*": "default"}))
    assert script.complete("p", agent_id="a", round=1).text == "hello"
    assert script.complete("p", agent_id="b", round=1).text == "default"
    with pytest.raises(BackendError):
        StubChat(BackendBinding("c", "chat", mode="weird")).complete("p")


def test_stub_chat_deterministic_and_seeded():
    chat = StubChat(BackendBinding("c", "chat"))
    prompt = _prompt([Utterance(1, "walker", "Paths bring visitors who spend money locally.")])
    texts = {chat.complete(prompt, agent_id="farmer", round=2, seed=s).text for s in range(8)}
    assert chat.complete(prompt, agent_id="farmer", round=2, seed=3).text == chat.complete(
        prompt, agent_id="farmer", round=2, seed=3
    ).text
    assert len(texts) > 1
    assert chat_complete(BackendBinding("c", "chat"), prompt, agent_id="farmer", round=2, seed=3) == chat.complete(
        prompt, agent_id="farmer", round=2, seed=3
    ).text


def test_stub_chat_respects_sentence_limit():
    chat = StubChat(BackendBinding("c", "chat"))
    for s in range(20):
        text = chat.complete(_prompt(rule="light:1"), agent_id="farmer", round=1, seed=s).text
        assert text.count(". ") == 0


def test_stub_chat_high_memory_weight_references_more():
    chat = StubChat(BackendBinding("c", "chat"))
    mem = [Utterance(1, "walker", "Paths bring visitors who spend money in local shops.")]

    def rate(w_m):
        p = _prompt(mem, WeightVector(1, w_m, 1))
        return sum("walker" in chat.complete(p, agent_id="farmer", round=2, seed=s).text for s in range(200))

    assert rate(2.0) > rate(0.0)


def test_parse_prompt_blocks():
    blocks = parse_prompt_blocks(_prompt(rule="light"))
    assert set(blocks) == {"T", "M", "D", "Q", "R"}
    assert blocks["Q"] == (None, "Should public paths cross farmland?")
    assert blocks["T"][0].startswith("Reflect the [T] perspective")


# -- judges ---------------------------------------------------------------------


def test_stub_judge():
    judge = StubJudge(BackendBinding("j", "judge"))
    prev = Utterance(1, "walker", "Open every path.")
    assert judge.judge("responsiveness", prev, Utterance(2, "farmer", "walker wants too much")).value == 1
    assert judge.judge("rebuttal", prev, Utterance(2, "farmer", "walker wants too much")).value == 0
    assert judge.judge("rebuttal", prev, Utterance(2, "farmer", "I disagree with walker")).value == 1
    assert judge.judge("responsiveness", prev, Utterance(2, "farmer", "")).value == 0
    assert judge_binary(BackendBinding("j", "judge"), "responsiveness", prev, Utterance(2, "f", "walker")) == 1
    with pytest.raises(ValueError):
        judge.judge("tone", prev, prev)


@pytest.mark.parametrize(
    "raw, value", [("Yes.", 1), ("no", 0), ("  YES, because", 1), ("1", 1), ("maybe", None), ("", None)]
)
def test_parse_binary(raw, value):
    assert parse_binary(raw) == value


class ScriptedChat:
    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt, **_):
        from policy_dialogue.backends import ChatResult

        self.prompts.append(prompt)
        return ChatResult(self.replies.pop(0), 1.0)


def test_llm_judge_retries_then_flags():
    chat = ScriptedChat(["hmm", "perhaps"])
    judge = LLMJudge(BackendBinding("j", "judge", **LIVE), chat)
    result = judge.judge("rebuttal", Utterance(1, "a", "x"), Utterance(2, "b", "y"))
    assert result.value == 0 and result.flags == ("judge_parse_failure",)
    assert len(chat.prompts) == 2


def test_llm_judge_prompt_and_speaker_flag():
    chat = ScriptedChat(["no", "yes"])
    judge = LLMJudge(BackendBinding("j", "judge", **LIVE), chat, show_speakers=False)
    assert judge.judge("responsiveness", Utterance(1, "farmer", "x"), Utterance(2, "walker", "y")).value == 0
    assert "farmer" not in chat.prompts[0] and "Speaker A" in chat.prompts[0]
    prompts = load_judge_prompts()
    assert set(prompts) == {"responsiveness", "rebuttal"}


# -- OpenAI-compatible HTTP -----------------------------------------------------


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_openai_chat_payload_and_retry():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        if len(seen) < 3:
            return httpx.Response(503, text="busy")
        return chat_reply(" hi there ")

    chat = OpenAIChat(BackendBinding("live", "chat", **LIVE), httpx.MockTransport(handler))
    result = chat.complete("hello", agent_id="a", round=1, seed=7)
    assert result.text == "hi there"
    assert len(seen) == 3
    assert seen[0] == {
        "model": "m",
        "messages": [{"role": "user", "content": "hello"}],
        "temperature": 0.7,
        "max_tokens": 512,
        "seed": 7,
    }


def test_openai_chat_gives_up():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500)

    chat = OpenAIChat(BackendBinding("live", "chat", max_retries=2, **LIVE), httpx.MockTransport(handler))
    with pytest.raises(BackendError, match="after 3 attempts"):
        chat.complete("hello")
    assert len(calls) == 3


def test_openai_chat_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, json={"error": "bad"})

    chat = OpenAIChat(BackendBinding("live", "chat", **LIVE), httpx.MockTransport(handler))
    with pytest.raises(BackendError):
        chat.complete("hello")
    assert len(calls) == 1


def test_openai_embedder_orders_and_truncates():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(body)
        data = [{"index": i, "embedding": [float(i + 1), 0.0, 1.0]} for i in range(len(body["input"]))]
        return httpx.Response(200, json={"data": list(reversed(data))})

    binding = BackendBinding("live-embed", "embedding", max_input_chars=4, dim=0, **LIVE)
    emb = OpenAIEmbedder(binding, httpx.MockTransport(handler))
    out = emb.embed(["abcdefgh", "xy"])
    assert seen[0]["input"] == ["efgh", "xy"]
    assert np.allclose(out[0], np.array([1, 0, 1]) / np.sqrt(2))
    assert np.allclose(out[1], np.array([2, 0, 1]) / np.sqrt(5))
    assert emb.dim == 3


def test_concurrency_cap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return chat_reply("ok")

    chat = OpenAIChat(BackendBinding("live", "chat", max_concurrency=2, **LIVE), httpx.MockTransport(handler))
    threads = [threading.Thread(target=chat.complete, args=("p",)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] == 2


def test_registry_force_stub_and_call_log():
    live = {"gpt": BackendBinding("gpt", "chat", **LIVE)}
    reg = BackendRegistry(live, force_stub=True)
    assert isinstance(reg.chat("gpt"), StubChat)
    assert reg.chat("gpt") is reg.chat("gpt")
    with pytest.raises(ValueError):
        reg.chat("stub-embed")
    with pytest.raises(KeyError):
        reg.judge("nope")

    def handler(request):
        return httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0, 0.0]}]})

    reg = BackendRegistry({"e": BackendBinding("e", "embedding", **LIVE)}, transport=httpx.MockTransport(handler))
    reg.embedder("e").embed(["hello"])
    (rec,) = reg.call_log.records
    assert rec["role"] == "embedding" and rec["backend_id"] == "e" and len(rec["request_hash"]) == 16


def test_binding_validation():
    assert BackendBinding("x", "chat", endpoint="http://h", model="").violations() == [
        "backend 'x': model name required"
    ]
    assert "unknown kind" in BackendBinding("x", "video").violations()[0]
    with pytest.raises(ValueError):
        BackendBinding.from_mapping("x", {"kind": "chat", "colour": "red"})
