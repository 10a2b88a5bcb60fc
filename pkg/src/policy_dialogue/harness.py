"""Experiment grids: rules x weights x masks x queries x runs, then evaluation and reports."""

from __future__ import annotations

import itertools
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .domain import COMPONENTS, WEIGHT_MAX, WEIGHT_MIN, PolicySpec, RuleTemplate, WeightVector
from .engine import config_hash, read_transcript, run_dialogue
from .knowledge import EmbeddingCache
from .metrics import (
    aggregate,
    evaluate_transcript,
    read_metrics_csv,
    report_json,
    round_series,
    write_metrics_csv,
    write_report_csv,
    write_series_csv,
)
from .scenario import Scenario, load_scenario

log = logging.getLogger(__name__)

LAYOUT = ("manifests", "transcripts", "metrics", "reports")
GRID_MANIFEST = "grid.json"


def weight_grid(
    base: WeightVector, axis: str, values: Sequence[float], template: PolicySpec | None = None
) -> list[PolicySpec]:
    """Vary one weight over ``values`` while the other two stay at ``base``."""
    if axis not in COMPONENTS:
        raise ValueError(f"axis must be one of {COMPONENTS}")
    template = template or PolicySpec()
    out = []
    for v in values:
        if not (WEIGHT_MIN <= v <= WEIGHT_MAX):
            raise ValueError(f"w_{axis}={v} out of [0,2]")
        out.append(replace(template, weights=base.replace(axis, float(v))))
    return out


def ablation_grid(components: Iterable[str], template: PolicySpec | None = None) -> list[PolicySpec]:
    """One policy per subset of ``components`` (largest first); a block outside
    the subset is removed from the prompt altogether."""
    comps = [c for c in COMPONENTS if c in set(components)]
    template = template or PolicySpec()
    out = []
    for size in range(len(comps), -1, -1):
        for keep in itertools.combinations(comps, size):
            out.append(replace(template, mask=frozenset(keep)))
    return out


def parse_grid(spec: str) -> list[tuple[str, list[float]]]:
    """``"D=0.5,1.5;T=1.5"`` -> ``[("D", [0.5, 1.5]), ("T", [1.5])]``."""
    axes = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        axis, _, values = part.partition("=")
        axis = axis.strip().upper().removeprefix("W_")
        if axis not in COMPONENTS or not values:
            raise ValueError(f"bad grid axis {part!r}")
        axes.append((axis, [float(v) for v in values.split(",") if v.strip()]))
    return axes


def parse_masks(spec: str) -> list[frozenset[str]]:
    """Comma list of kept blocks, e.g. ``"TMD,DT,none"``; ``"all"`` = every subset."""
    if spec.strip().lower() == "all":
        return [p.mask for p in ablation_grid(COMPONENTS)]
    out = []
    for item in spec.split(","):
        item = item.strip().upper()
        letters = "" if item == "NONE" else item.replace("+", "")
        if set(letters) - set(COMPONENTS):
            raise ValueError(f"bad mask {item!r}")
        out.append(frozenset(letters))
    return out


@dataclass(frozen=True)
class Cell:
    scenario: Scenario
    query_id: str
    policy: PolicySpec
    run_index: int
    seed: int

    @property
    def run_id(self) -> str:
        raw = f"{self.scenario.name}__{self.policy.label()}__{self.query_id}__r{self.run_index}"
        return re.sub(r"[^A-Za-z0-9_.-]", "_", raw)


def grid_policies(
    base: PolicySpec,
    rules: Sequence[str] | None = None,
    grid: str | None = None,
    masks: str | None = None,
) -> list[PolicySpec]:
    """Cartesian product of rule templates, weight settings and prompt masks."""
    templates = [RuleTemplate.parse(r) for r in rules] if rules else [base.rule]
    weights = [base.weights]
    if grid:
        weights = [p.weights for axis, values in parse_grid(grid) for p in weight_grid(base.weights, axis, values)]
    mask_list = parse_masks(masks) if masks else [base.mask]
    return [
        replace(base, rule=r, weights=w, mask=m) for w, r, m in itertools.product(weights, templates, mask_list)
    ]


def build_cells(
    scenarios: Sequence[Scenario],
    runs: int,
    seed: int = 0,
    rules: Sequence[str] | None = None,
    grid: str | None = None,
    masks: str | None = None,
    queries: Sequence[str] | None = None,
) -> list[Cell]:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    cells = []
    for sc in scenarios:
        qids = list(queries) if queries else [q for q, _ in sc.queries]
        for policy in grid_policies(sc.base_policy, rules, grid, masks):
            for qid in qids:
                for i in range(runs):
                    cells.append(Cell(sc, qid, policy, i, seed + i))
    return cells


def _layout(out: Path) -> dict[str, Path]:
    paths = {name: out / name for name in LAYOUT}
    for p in paths.values():
        p.mkdir(parents=True, exist_ok=True)
    return paths


def run_grid(
    scenarios: Sequence[Scenario],
    out: str | Path,
    runs: int = 5,
    seed: int = 0,
    rules: Sequence[str] | None = None,
    grid: str | None = None,
    masks: str | None = None,
    queries: Sequence[str] | None = None,
    force_stub: bool = False,
    workers: int = 1,
    judge_backend: str | None = None,
    embed_backend: str | None = None,
) -> dict:
    """Run every grid cell and write transcripts plus manifests under ``out``."""
    out = Path(out)
    paths = _layout(out)
    if judge_backend or embed_backend:
        scenarios = [
            replace(
                sc,
                judge_backend=judge_backend or sc.judge_backend,
                embed_backend=embed_backend or sc.embed_backend,
            )
            for sc in scenarios
        ]
    cells = build_cells(scenarios, runs, seed, rules, grid, masks, queries)

    contexts = {}
    for sc in scenarios:
        registry = sc.registry(force_stub)
        embedder_binding = registry.bindings[sc.embed_backend]
        cache = None if embedder_binding.is_stub else EmbeddingCache(out / "cache")
        contexts[sc.name] = (registry, sc.knowledge(registry, cache))

    def execute(cell: Cell) -> dict:
        registry, kb = contexts[cell.scenario.name]
        config = cell.scenario.config(cell.query_id, cell.policy, cell.seed)
        try:
            t = run_dialogue(
                config,
                registry,
                kb,
                texts=cell.scenario.texts,
                run_id=cell.run_id,
                judge_backend=cell.scenario.judge_backend,
            )
        except Exception as exc:
            log.error("cell %s failed: %s", cell.run_id, exc)
            entry = {"run_id": cell.run_id, "status": "failed", "error": str(exc), "config_hash": config_hash(config)}
            (paths["manifests"] / f"{cell.run_id}.json").write_text(json.dumps(entry, indent=2) + "\n")
            return {**entry, "transcript": None}
        t.write(paths["transcripts"] / f"{cell.run_id}.jsonl", paths["manifests"] / f"{cell.run_id}.json")
        return {**t.manifest(), "transcript": f"transcripts/{cell.run_id}.jsonl"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(execute, cells))
    else:
        entries = [execute(c) for c in cells]

    for sc in scenarios:
        registry, _ = contexts[sc.name]
        if registry.call_log.records:
            with open(paths["manifests"] / f"{sc.name}_calls.jsonl", "w", encoding="utf-8") as fh:
                for rec in registry.call_log.records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    for entry, cell in zip(entries, cells):
        entry.update(scenario=cell.scenario.name, query_id=cell.query_id, policy=cell.policy.label(), seed=cell.seed)
    manifest = {
        "scenarios": {sc.name: sc.source for sc in scenarios},
        "force_stub": force_stub,
        "judge_backend": {sc.name: sc.judge_backend for sc in scenarios},
        "embed_backend": {sc.name: sc.embed_backend for sc in scenarios},
        "runs": runs,
        "seed": seed,
        "cells": entries,
        "failed": sum(e["status"] != "ok" for e in entries),
    }
    (paths["manifests"] / GRID_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(out: str | Path) -> dict:
    return json.loads((Path(out) / "manifests" / GRID_MANIFEST).read_text())


def evaluate_dir(
    out: str | Path,
    force_stub: bool | None = None,
    judge_backend: str | None = None,
    embed_backend: str | None = None,
) -> Path:
    """Compute metrics for every successful transcript listed in the grid manifest."""
    out = Path(out)
    manifest = load_manifest(out)
    stub = manifest["force_stub"] if force_stub is None else force_stub
    scenarios = {name: load_scenario(src) for name, src in manifest["scenarios"].items()}
    tools = {}
    for name, sc in scenarios.items():
        registry = sc.registry(stub)
        judge_id = judge_backend or manifest["judge_backend"].get(name, sc.judge_backend)
        embed_id = embed_backend or manifest["embed_backend"].get(name, sc.embed_backend)
        tools[name] = (registry.embedder(embed_id), registry.judge(judge_id), sc.responsiveness_scope)

    records = []
    for entry in manifest["cells"]:
        if entry["status"] != "ok" or not entry.get("transcript"):
            continue
        transcript = read_transcript(out / entry["transcript"])
        embedder, judge, scope = tools[entry["scenario"]]
        records.extend(evaluate_transcript(transcript, embedder, judge, scope))
    path = out / "metrics" / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_metrics_csv(records, fh)
    return path


def report_dir(out: str | Path) -> dict[str, Path]:
    """Aggregate ``metrics/metrics.csv`` into the table, round-series and JSON reports."""
    out = Path(out)
    with open(out / "metrics" / "metrics.csv", encoding="utf-8", newline="") as fh:
        records = read_metrics_csv(fh)
    rows = aggregate(records)
    series = round_series(records)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": reports / "report.csv",
        "series": reports / "round_series.csv",
        "json": reports / "report.json",
    }
    with open(paths["report"], "w", encoding="utf-8", newline="") as fh:
        write_report_csv(rows, fh)
    with open(paths["series"], "w", encoding="utf-8", newline="") as fh:
        write_series_csv(series, fh)
    missing = sum(1 for r in records for m in ("resp", "rebut", "nonrep", "evid", "stance") if r.value(m) is None)
    paths["json"].write_text(
        json.dumps({"rows": report_json(rows), "records": len(records), "missing_values": missing}, indent=2) + "\n",
        encoding="utf-8",
    )
    return paths
