"""Benchmark runner: drive an adapter over a ground-truth dataset and score it.

A dataset is a directory of case directories, each holding ``dump.jsonl``
(the binary's full pseudocode dump) and ``truth.json`` (the ground truth
for one target function in that dump).  For every case and every enabled
task the adapter produces a :class:`~binsight.llmgate.TaskRun`; applied
runs are scored by the matching evaluator and aggregated.

Two adapters ship with the package: ``live`` drives the full model
pipeline through :func:`binsight.llmgate.run_task`, and ``replay`` feeds
previously recorded raw model outputs through the exact same parsing,
validation, and retry machinery, so recorded transcripts are scored
byte-identically to a live session.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

from ..cgraph import CallGraph, ContextConfig, UnknownFunction, build_call_graph
from ..llmgate import (
    LlmConfig,
    RunStatus,
    ScriptedTransport,
    TaskRun,
    Transport,
    judge_summary,
    run_task,
)
from ..promptkit import DEFAULT_BUDGET, TaskSpec, task_for
from ..pseudoc import DumpError, PseudoFunction, parse_dump
from .clusters import TypeClusterTable, UnknownType
from .codebleu import codebleu_score
from .metrics import StructLayout, StructMember, rouge_name, struct_f1, type_match

__all__ = [
    "Adapter",
    "BenchCase",
    "BenchConfig",
    "DatasetError",
    "EvalReport",
    "GroundTruth",
    "LiveAdapter",
    "ReplayAdapter",
    "VarTruth",
    "aggregates_from_rows",
    "load_dataset",
    "make_judge",
    "run_benchmark",
]

REPORT_VERSION = "1"

DEFAULT_TASKS = ("<funcname>", "<vars>", "<decompilation>", "<summary-en>")


class DatasetError(Exception):
    """The dataset directory is missing or malformed."""


@dataclass(frozen=True)
class VarTruth:
    pseudo_name: str
    true_name: str
    true_type: str

    def to_json(self) -> dict:
        return {"pseudo_name": self.pseudo_name, "true_name": self.true_name,
                "true_type": self.true_type}


@dataclass(frozen=True)
class GroundTruth:
    """Reference answers for one target function."""

    function: str
    true_name: str
    vars: tuple[VarTruth, ...] = ()
    structs: tuple[StructLayout, ...] = ()
    source_code: str = ""
    reference_summary: str | None = None

    @classmethod
    def from_json(cls, data: dict) -> "GroundTruth":
        return cls(
            function=data["function"],
            true_name=data["true_name"],
            vars=tuple(VarTruth(v["pseudo_name"], v["true_name"],
                                v["true_type"])
                       for v in data.get("vars", [])),
            structs=tuple(StructLayout.from_json(s)
                          for s in data.get("structs", [])),
            source_code=data.get("source_code", ""),
            reference_summary=data.get("reference_summary"),
        )

    def to_json(self) -> dict:
        data = {
            "function": self.function,
            "true_name": self.true_name,
            "vars": [v.to_json() for v in self.vars],
            "structs": [s.to_json() for s in self.structs],
            "source_code": self.source_code,
        }
        if self.reference_summary is not None:
            data["reference_summary"] = self.reference_summary
        return data


@dataclass(frozen=True)
class BenchCase:
    """One dataset entry: a dump, its call graph, and the ground truth."""

    name: str
    path: Path
    graph: CallGraph
    target: PseudoFunction
    truth: GroundTruth
    replay: dict | None = None


def _load_case(case_dir: Path) -> BenchCase:
    dump_path = case_dir / "dump.jsonl"
    truth_path = case_dir / "truth.json"
    if not dump_path.is_file():
        raise DatasetError(f"{case_dir.name}: missing dump.jsonl")
    if not truth_path.is_file():
        raise DatasetError(f"{case_dir.name}: missing truth.json")
    try:
        dump = parse_dump(dump_path)
    except DumpError as exc:
        raise DatasetError(f"{case_dir.name}: {exc}") from exc
    try:
        truth = GroundTruth.from_json(json.loads(truth_path.read_text()))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DatasetError(f"{case_dir.name}: bad truth.json: {exc}") from exc
    graph = build_call_graph(dump)
    try:
        target = graph.function(truth.function)
    except UnknownFunction as exc:
        raise DatasetError(
            f"{case_dir.name}: target {truth.function!r} not in dump") from exc
    known = set(target.var_names())
    for var in truth.vars:
        if var.pseudo_name not in known:
            raise DatasetError(
                f"{case_dir.name}: ground-truth variable "
                f"{var.pseudo_name!r} not in {truth.function!r}")
    replay = None
    replay_path = case_dir / "replay.json"
    if replay_path.is_file():
        replay = json.loads(replay_path.read_text())
    return BenchCase(name=case_dir.name, path=case_dir, graph=graph,
                     target=target, truth=truth, replay=replay)


def load_dataset(dataset_dir: str | Path) -> list[BenchCase]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DatasetError(f"no such dataset directory: {root}")
    cases = [_load_case(p) for p in sorted(root.iterdir()) if p.is_dir()]
    if not cases:
        raise DatasetError(f"dataset {root} contains no cases")
    return cases


# --- Adapters -------------------------------------------------------------

class Adapter(Protocol):
    name: str

    def run(self, case: BenchCase, task: TaskSpec) -> TaskRun: ...


@dataclass
class LiveAdapter:
    """Drives the model pipeline end to end for every case and task."""

    cfg: LlmConfig
    transport: Transport | None = None
    ctxcfg: ContextConfig = field(default_factory=ContextConfig)
    clusters: TypeClusterTable | None = None
    budget: int = DEFAULT_BUDGET
    super_thought: bool = False
    sleep: Callable[[float], None] | None = None
    name: str = "live"

    def run(self, case: BenchCase, task: TaskSpec) -> TaskRun:
        kwargs = {}
        if self.sleep is not None:
            kwargs["sleep"] = self.sleep
        return run_task(case.graph, case.truth.function, task, self.cfg,
                        ctxcfg=self.ctxcfg, transport=self.transport,
                        clusters=self.clusters, budget=self.budget,
                        super_thought=self.super_thought, **kwargs)


@dataclass
class ReplayAdapter:
    """Scores recorded raw outputs through the live parsing/retry path.

    Each case's ``replay.json`` maps a task tag to the ordered list of
    raw model outputs observed for that task; the list replays as the
    attempt sequence, so format failures, schema failures, and retries
    resolve exactly as they would have live.
    """

    ctxcfg: ContextConfig = field(default_factory=ContextConfig)
    clusters: TypeClusterTable | None = None
    budget: int = DEFAULT_BUDGET
    name: str = "replay"

    def run(self, case: BenchCase, task: TaskSpec) -> TaskRun:
        recorded = (case.replay or {}).get(task.tag)
        if not recorded:
            return TaskRun(target=case.truth.function, task=task.tag,
                           prompt="", attempts=(), final=None,
                           status=RunStatus.TransportFailed,
                           error=f"no recorded output for {task.tag}")
        cfg = LlmConfig(endpoint="replay:recorded", model="replay",
                        max_retries=len(recorded) - 1)
        transport = ScriptedTransport(script=list(recorded), repeat_last=True)
        return run_task(case.graph, case.truth.function, task, cfg,
                        ctxcfg=self.ctxcfg, transport=transport,
                        clusters=self.clusters, budget=self.budget,
                        sleep=lambda _s: None)


# --- Scoring --------------------------------------------------------------

def make_judge(cfg: LlmConfig, transport: Transport | None = None):
    """A summary judge backed by the model endpoint in ``cfg``."""

    def judge(pseudocode: str, summary: str, reference: str | None) -> float:
        verdict = judge_summary(cfg, pseudocode, summary,
                                reference_source=reference,
                                transport=transport)
        return verdict["score"]

    return judge


def _layout_from_payload(raw: dict) -> StructLayout | None:
    """Predicted struct (member types, no total size) as a StructLayout."""
    try:
        members = tuple(StructMember(m["name"], m["offset"], m["size"])
                        for m in raw["members"])
        total = max((m.offset + m.size for m in members), default=0)
        return StructLayout(name=raw["name"], total_size=total,
                            members=members)
    except (KeyError, TypeError, ValueError):
        return None


def _score_vars(payload: dict, case: BenchCase,
                clusters: TypeClusterTable | None) -> dict:
    table = clusters or TypeClusterTable()
    by_old: dict = {}
    for entry in payload.get("variables", []):
        by_old.setdefault(entry["old"], entry)
    name_scores = []
    type_scores = []
    for var in case.truth.vars:
        entry = by_old.get(var.pseudo_name)
        if entry is None:
            name_scores.append(0.0)
            type_scores.append(0.0)
            continue
        name_scores.append(rouge_name(entry.get("new_name", ""),
                                      var.true_name))
        try:
            matched = type_match(entry.get("new_type", ""), var.true_type,
                                 table)
        except UnknownType:
            matched = False
        type_scores.append(1.0 if matched else 0.0)

    scores: dict = {}
    if name_scores:
        scores["var_name"] = statistics.fmean(name_scores)
        scores["var_type"] = statistics.fmean(type_scores)

    if case.truth.structs:
        pred_layouts = []
        for raw in payload.get("structs", []) or []:
            layout = _layout_from_payload(raw)
            if layout is not None:
                pred_layouts.append(layout)
        per_struct = []
        for gt_struct in case.truth.structs:
            best = 0.0
            for pred_struct in pred_layouts:
                best = max(best, struct_f1(pred_struct, gt_struct)["f1"])
            per_struct.append(best)
        scores["struct"] = statistics.fmean(per_struct)
    return scores


def _score_run(run: TaskRun, case: BenchCase, task: TaskSpec,
               clusters: TypeClusterTable | None,
               judge: Callable[[str, str, str | None], float] | None) -> dict:
    payload = run.final.payload
    if task.family == "funcname":
        return {"func_name": rouge_name(payload["function_name"],
                                        case.truth.true_name)}
    if task.family in ("vars", "args", "var", "arg"):
        return _score_vars(payload, case, clusters)
    if task.family == "decompilation":
        if not case.truth.source_code:
            return {}
        return {"dec": codebleu_score(payload["code"],
                                      case.truth.source_code)}
    if task.family.startswith("summary"):
        if judge is None:
            return {}
        score = judge(case.target.record.pseudocode, payload["summary"],
                      case.truth.reference_summary)
        return {"summary": score}
    return {}


# --- Report ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    """Per-run scores plus aggregates; serializes to versioned JSON."""

    rows: tuple[dict, ...]
    aggregates: dict
    success_ratio: float
    metadata: dict
    version: str = REPORT_VERSION

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "metadata": dict(self.metadata),
            "success_ratio": self.success_ratio,
            "aggregates": dict(self.aggregates),
            "rows": [dict(r) for r in self.rows],
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        if data.get("version") != REPORT_VERSION:
            raise ValueError(
                f"unsupported report version {data.get('version')!r}")
        return cls(rows=tuple(data["rows"]), aggregates=data["aggregates"],
                   success_ratio=data["success_ratio"],
                   metadata=data["metadata"], version=data["version"])


def aggregates_from_rows(rows) -> tuple[dict, float]:
    """Recompute (aggregates, success_ratio) from persisted rows.

    Aggregates are the mean of each metric over applied runs, scaled to
    a 0..100 range; the success ratio is the applied fraction over all
    runs.
    """
    buckets: dict[str, list[float]] = {}
    applied = 0
    for row in rows:
        if row["status"] == RunStatus.Applied.value:
            applied += 1
            for key, value in row["scores"].items():
                buckets.setdefault(key, []).append(value)
    aggregates = {key: 100.0 * statistics.fmean(values)
                  for key, values in sorted(buckets.items())}
    ratio = applied / len(rows) if rows else 0.0
    return aggregates, ratio


@dataclass(frozen=True)
class BenchConfig:
    """What to run and how to score it."""

    tasks: tuple[str, ...] = DEFAULT_TASKS
    clusters: TypeClusterTable | None = None
    judge: Callable[[str, str, str | None], float] | None = None
    metadata: dict = field(default_factory=dict)


def run_benchmark(dataset_dir: str | Path, adapter: Adapter,
                  cfg: BenchConfig | None = None) -> EvalReport:
    cfg = cfg or BenchConfig()
    cases = load_dataset(dataset_dir)
    rows = []
    for case in cases:
        for tag in cfg.tasks:
            task = task_for(tag)
            run = adapter.run(case, task)
            scores: dict = {}
            if run.status is RunStatus.Applied:
                scores = _score_run(run, case, task, cfg.clusters, cfg.judge)
            rows.append({
                "case": case.name,
                "function": case.truth.function,
                "task": tag,
                "status": run.status.value,
                "attempts": len(run.attempts),
                "error": run.error,
                "scores": scores,
            })
    aggregates, success_ratio = aggregates_from_rows(rows)
    metadata = {
        "adapter": adapter.name,
        "tasks": list(cfg.tasks),
        "cases": len(cases),
        "generated_at": datetime.now(timezone.utc).isoformat(),
        **cfg.metadata,
    }
    return EvalReport(rows=tuple(rows), aggregates=aggregates,
                      success_ratio=success_ratio, metadata=metadata)
