"""Per-utterance dialogue metrics, scheduler feedback, and report aggregation."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .backends import BackendError, Embedder, Judge, tokenize
from .domain import BehaviorFeedback, Utterance

log = logging.getLogger(__name__)

METRICS = ("resp", "rebut", "nonrep", "evid", "stance")
METRIC_TITLES = {
    "resp": "Resp.",
    "rebut": "Rebuttal",
    "nonrep": "Non-rep.",
    "evid": "Evid.",
    "stance": "Stance",
}
BINARY_METRICS = ("resp", "rebut", "evid")
RULE_ORDER = ("none", "light", "struct")

OPENING_TOKENS = 5
OPENING_FLOOR = 0.6
EVIDENCE_NGRAM = 6
LEXICAL_QUOTE_WORDS = 4

STOPWORDS = frozenset(
    """
    a about above after again against all also am an and any are as at be because been before
    being below between both but by can could did do does doing down during each either few for
    from further had has have having he her here hers herself him himself his how i if in into is
    it its itself just may me might more most must my myself no nor not now of off on once only or
    other ought our ours ourselves out over own same shall she should so some such than that the
    their theirs them themselves then there these they this those through to too under until up
    upon us very was we were what when where which while who whom why will with would yet you your
    yours yourself yourselves s t
    """.split()
)


# -- similarity pieces ----------------------------------------------------------


def containment_overlap(curr: str, prev: str) -> float:
    """Share of ``curr``'s distinct tokens that also occur in ``prev``."""
    a, b = set(tokenize(curr)), set(tokenize(prev))
    if not a:
        return 0.0
    return len(a & b) / len(a)


def same_opening(curr: str, prev: str, n: int = OPENING_TOKENS) -> bool:
    a, b = tokenize(curr)[:n], tokenize(prev)[:n]
    return len(a) == n and a == b


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v))


def non_repetition(
    curr: str,
    prev_own: str,
    embedder: Embedder | None = None,
    *,
    vectors: tuple[np.ndarray, np.ndarray] | None = None,
    overlap: Callable[[str, str], float] = containment_overlap,
) -> float:
    """``1 - max(overlap, clamped cosine)`` with a floor of 0.6 on the similarity
    when both utterances open with the same five tokens."""
    if vectors is None:
        if embedder is None:
            raise ValueError("need an embedder or precomputed vectors")
        u, v = embedder.embed([curr, prev_own])
    else:
        u, v = vectors
    cos = min(max(_cos(u, v), 0.0), 1.0)
    similarity = max(overlap(curr, prev_own), cos)
    if same_opening(curr, prev_own):
        similarity = max(similarity, OPENING_FLOOR)
    return min(max(1.0 - similarity, 0.0), 1.0)


def content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if t not in STOPWORDS]


def _ngrams(tokens: Sequence[str], n: int) -> set[tuple[str, ...]]:
    return {tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)}


def evidence_usage(curr: str, chunk_texts: Iterable[str], ngram: int = EVIDENCE_NGRAM) -> int:
    """1 when ``curr`` shares a run of ``ngram`` consecutive content tokens with any chunk."""
    mine = _ngrams(content_tokens(curr), ngram)
    if not mine:
        return 0
    for text in chunk_texts:
        if mine & _ngrams(content_tokens(text), ngram):
            return 1
    return 0


def stance(
    curr: str,
    persona_task: str,
    embedder: Embedder | None = None,
    *,
    vectors: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    if vectors is None:
        u, v = embedder.embed([curr, persona_task])
    else:
        u, v = vectors
    return _cos(u, v)


def _judge(judge: Judge, task: str, prev: Utterance | None, curr: Utterance) -> tuple[int | None, tuple[str, ...]]:
    if prev is None:
        return None, ()
    try:
        result = judge.judge(task, prev, curr)
    except BackendError as exc:
        log.warning("judge %s failed: %s", task, exc)
        return None, (f"{task}_judge_error",)
    flags = tuple(f"{task}_{f}" for f in result.flags)
    return result.value, flags


def responsiveness(prev: Utterance | None, curr: Utterance, judge: Judge) -> int | None:
    return _judge(judge, "responsiveness", prev, curr)[0]


def rebuttal(prev: Utterance | None, curr: Utterance, judge: Judge) -> int | None:
    return _judge(judge, "rebuttal", prev, curr)[0]


def lexical_response(prev: Utterance, curr_text: str, quote_words: int = LEXICAL_QUOTE_WORDS) -> bool:
    """Cheap responsiveness check: names the previous speaker or quotes them."""
    if re.search(rf"\b{re.escape(prev.agent_id)}\b", curr_text):
        return True
    return bool(_ngrams(tokenize(curr_text), quote_words) & _ngrams(tokenize(prev.text), quote_words))


def behavior_feedback(
    curr: Utterance,
    evidence_texts: Iterable[str],
    prev: Utterance | None,
    mode: str = "lexical",
    judge: Judge | None = None,
) -> BehaviorFeedback:
    """Observed behaviour of one turn, used to correct the next round's weights.

    With nothing to respond to (``prev`` is None) the memory check passes.
    """
    used = bool(evidence_usage(curr.text, evidence_texts))
    if prev is None:
        responded = True
    elif mode == "judge":
        if judge is None:
            raise ValueError("judge feedback mode needs a judge")
        value = responsiveness(prev, curr, judge)
        responded = bool(value) if value is not None else lexical_response(prev, curr.text)
    else:
        responded = lexical_response(prev, curr.text)
    return BehaviorFeedback(used_evidence=used, responded_to_memory=responded)


# -- per-transcript evaluation --------------------------------------------------


@dataclass
class MetricRecord:
    run_id: str
    query_id: str
    rule: str
    agent_id: str
    round: int
    resp: int | None = None
    rebut: int | None = None
    nonrep: float | None = None
    evid: int | None = None
    stance: float | None = None
    flags: tuple[str, ...] = ()
    scenario: str = ""
    policy: str = ""

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)


CSV_COLUMNS = ("run_id", "query_id", "rule", "agent_id", "round", *METRICS, "flags", "scenario", "policy")


def previous_utterances(records: Sequence[Mapping], index: int, scope: str = "last") -> list[Utterance]:
    """Most recent utterance(s) of the shared memory as seen by ``records[index]``.

    Simultaneous runs see the previous round; sequential runs see the
    immediately preceding turn. ``scope="any"`` returns the whole previous
    round (simultaneous mode only).
    """
    rec = records[index]
    if rec.get("sequential"):
        if index == 0:
            return []
        p = records[index - 1]
        return [Utterance(p["round"], p["agent_id"], p["output"])]
    prev_round = [r for r in records[:index] if r["round"] == rec["round"] - 1]
    if not prev_round:
        return []
    chosen = prev_round if scope == "any" else prev_round[-1:]
    return [Utterance(r["round"], r["agent_id"], r["output"]) for r in chosen]


def evaluate_transcript(
    records: Sequence[Mapping],
    embedder: Embedder,
    judge: Judge,
    responsiveness_scope: str = "last",
    ngram: int = EVIDENCE_NGRAM,
) -> list[MetricRecord]:
    if not records:
        return []
    outputs = [r["output"] for r in records]
    personas = sorted({r["persona"] for r in records})
    vecs = embedder.embed(outputs + personas)
    out_vec = vecs[: len(outputs)]
    persona_vec = dict(zip(personas, vecs[len(outputs) :]))
    own_prev: dict[tuple[str, int], int] = {(r["agent_id"], r["round"]): i for i, r in enumerate(records)}

    results = []
    for i, rec in enumerate(records):
        curr = Utterance(rec["round"], rec["agent_id"], rec["output"])
        prevs = previous_utterances(records, i, responsiveness_scope)
        flags: list[str] = []
        resp_vals, rebut_vals = [], []
        for p in prevs:
            v, f = _judge(judge, "responsiveness", p, curr)
            resp_vals.append(v)
            flags.extend(f)
            v, f = _judge(judge, "rebuttal", p, curr)
            rebut_vals.append(v)
            flags.extend(f)
        resp = _any_of(resp_vals)
        rebut = _any_of(rebut_vals)

        nonrep = None
        j = own_prev.get((rec["agent_id"], rec["round"] - 1))
        if j is not None:
            nonrep = non_repetition(curr.text, outputs[j], vectors=(out_vec[i], out_vec[j]))
        evid = evidence_usage(curr.text, rec.get("evidence_text", {}).values(), ngram)
        st = _cos(out_vec[i], persona_vec[rec["persona"]])
        results.append(
            MetricRecord(
                run_id=rec["run_id"],
                query_id=rec["query_id"],
                rule=rec["rule"],
                agent_id=rec["agent_id"],
                round=rec["round"],
                resp=resp,
                rebut=rebut,
                nonrep=nonrep,
                evid=evid,
                stance=st,
                flags=tuple(flags),
                scenario=rec.get("scenario", ""),
                policy=rec.get("policy", ""),
            )
        )
    return results


def _any_of(values: list[int | None]) -> int | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return int(any(present))


# -- CSV I/O --------------------------------------------------------------------


def _fmt(v: object) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records: Iterable[MetricRecord], fh: io.TextIOBase) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        row = asdict(r)
        row["flags"] = ";".join(r.flags)
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_metrics_csv(fh: io.TextIOBase) -> list[MetricRecord]:
    out = []
    for row in csv.DictReader(fh):
        def num(key: str, cast: Callable) -> object:
            return cast(row[key]) if row.get(key, "") != "" else None

        out.append(
            MetricRecord(
                run_id=row["run_id"],
                query_id=row["query_id"],
                rule=row["rule"],
                agent_id=row["agent_id"],
                round=int(row["round"]),
                resp=num("resp", int),
                rebut=num("rebut", int),
                nonrep=num("nonrep", float),
                evid=num("evid", int),
                stance=num("stance", float),
                flags=tuple(f for f in row.get("flags", "").split(";") if f),
                scenario=row.get("scenario", ""),
                policy=row.get("policy", ""),
            )
        )
    return out


# -- aggregation ------------------------------------------------------------------


@dataclass
class Cell:
    mean: float | None
    std: float | None
    n: int
    missing: int

    def text(self) -> str:
        if self.mean is None:
            return ""
        return f"{self.mean:.2f}±{self.std:.2f}"


@dataclass
class ReportRow:
    scenario: str
    policy: str
    query_id: str
    rule: str
    cells: dict[str, Cell] = field(default_factory=dict)


def summarize(records: Sequence[MetricRecord], metric: str) -> Cell:
    """Two-stage mean (per-agent mean, then mean over agents); pooled population std."""
    per_agent: dict[str, list[float]] = defaultdict(list)
    missing = 0
    for r in records:
        v = r.value(metric)
        if v is None:
            missing += 1
        else:
            per_agent[r.agent_id].append(float(v))
    pooled = [v for vals in per_agent.values() for v in vals]
    if not pooled:
        return Cell(None, None, 0, missing)
    agent_means = [math.fsum(vals) / len(vals) for vals in per_agent.values()]
    mean = math.fsum(agent_means) / len(agent_means)
    std = float(np.std(pooled))
    return Cell(mean, std, len(pooled), missing)


def _rule_key(rule: str) -> tuple[int, str]:
    return (RULE_ORDER.index(rule) if rule in RULE_ORDER else len(RULE_ORDER), rule)


def aggregate(records: Sequence[MetricRecord], overall: bool = True) -> list[ReportRow]:
    """Table rows per (scenario, policy, query, rule), plus ``Overall`` rows per
    (scenario, policy, rule) pooling every query."""
    if not records:
        return []
    groups: dict[tuple[str, str, str, str], list[MetricRecord]] = defaultdict(list)
    for r in records:
        groups[(r.scenario, r.policy, r.query_id, r.rule)].append(r)
        if overall:
            groups[(r.scenario, r.policy, "Overall", r.rule)].append(r)

    def order(key: tuple[str, str, str, str]) -> tuple:
        scenario, policy, query, rule = key
        return (scenario, policy, query == "Overall", query, _rule_key(rule))

    rows = []
    for key in sorted(groups, key=order):
        rows.append(ReportRow(*key, cells={m: summarize(groups[key], m) for m in METRICS}))
    return rows


REPORT_COLUMNS = ("scenario", "policy", "query", "rule", *(METRIC_TITLES[m] for m in METRICS))


def write_report_csv(rows: Iterable[ReportRow], fh: io.TextIOBase) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([row.scenario, row.policy, row.query_id, row.rule, *(row.cells[m].text() for m in METRICS)])


def report_json(rows: Iterable[ReportRow]) -> list[dict]:
    return [
        {
            "scenario": r.scenario,
            "policy": r.policy,
            "query": r.query_id,
            "rule": r.rule,
            "metrics": {m: asdict(c) for m, c in r.cells.items()},
        }
        for r in rows
    ]


@dataclass
class SeriesPoint:
    scenario: str
    policy: str
    metric: str
    rule: str
    round: int
    mean: float | None
    ci_low: float | None
    ci_high: float | None
    n: int


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided Student-t confidence interval."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if len(arr) < 2:
        return mean, mean, mean
    sem = float(stats.sem(arr))
    if sem == 0.0:
        return mean, mean, mean
    half = float(stats.t.ppf(0.5 + confidence / 2, len(arr) - 1)) * sem
    return mean, mean - half, mean + half


def round_series(records: Sequence[MetricRecord], confidence: float = 0.95) -> list[SeriesPoint]:
    """Per-round trajectories: each transcript contributes its agent-mean for the
    round; points carry the mean and CI across transcripts.

    Every round present in a (scenario, policy, rule) group gets a point for
    every metric; rounds where a metric is undefined (round 1 for the
    memory-based metrics) get ``n=0`` and empty statistics.
    """
    rounds: dict[tuple[str, str, str], set[int]] = defaultdict(set)
    per_run: dict[tuple, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in records:
        rounds[(r.scenario, r.policy, r.rule)].add(r.round)
        for m in METRICS:
            v = r.value(m)
            if v is not None:
                per_run[(r.scenario, r.policy, m, r.rule, r.round)][r.run_id].append(float(v))
    keys = [
        (scenario, policy, m, rule, k)
        for (scenario, policy, rule), ks in rounds.items()
        for m in METRICS
        for k in ks
    ]
    points = []
    for key in sorted(keys, key=lambda k: (k[0], k[1], METRICS.index(k[2]), _rule_key(k[3]), k[4])):
        runs = per_run.get(key)
        if not runs:
            points.append(SeriesPoint(*key, mean=None, ci_low=None, ci_high=None, n=0))
            continue
        run_means = [math.fsum(v) / len(v) for v in runs.values()]
        mean, lo, hi = mean_ci(run_means, confidence)
        points.append(SeriesPoint(*key, mean=mean, ci_low=lo, ci_high=hi, n=len(run_means)))
    return points


SERIES_COLUMNS = ("scenario", "policy", "metric", "rule", "round", "mean", "ci_low", "ci_high", "n")


def _f6(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_series_csv(points: Iterable[SeriesPoint], fh: io.TextIOBase) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SERIES_COLUMNS)
    for p in points:
        w.writerow([p.scenario, p.policy, p.metric, p.rule, p.round, _f6(p.mean), _f6(p.ci_low), _f6(p.ci_high), p.n])
