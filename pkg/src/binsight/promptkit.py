"""Analysis-task registry, prompt assembly, and model-output validation.

This module owns the contract between the toolkit and a language model:

* fourteen task families, each addressed by a literal tag line (for
  example ``<funcname>`` or ``<arg:a1>``) and bound to a versioned JSON
  output schema shipped under :mod:`binsight.schemas`;
* :func:`build_prompt`, which lays out context functions, call chains, a
  data-flow digest, and the annotated target into one deterministic
  prompt under a token budget;
* :func:`parse_response` / :func:`validate_prediction`, which lift raw
  model text into schema-checked, semantically vetted predictions.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import jsonschema

from .bench.clusters import TypeClusterTable, UnknownType, is_c_identifier
from .cgraph import CallChain, CallGraph, ChainDirection, ContextSelection
from .dflow import TraceReport, annotate_many
from .pseudoc import PseudoFunction

__all__ = [
    "BudgetTooSmall",
    "DEFAULT_BUDGET",
    "FormatError",
    "HEADER_CHAINS",
    "HEADER_CONTEXT",
    "HEADER_DATAFLOW",
    "HEADER_TARGET",
    "Prediction",
    "PromptBundle",
    "SUPER_THINKING_TAG",
    "SchemaError",
    "TASK_TAGS",
    "TaskSpec",
    "THINKING_TAG",
    "UnknownTask",
    "ValidationReport",
    "Violation",
    "ViolationCode",
    "all_tasks",
    "build_prompt",
    "golden_example",
    "load_schema",
    "parse_response",
    "render_chains",
    "render_dataflow",
    "render_prompt",
    "task_for",
    "validate_prediction",
]


class UnknownTask(Exception):
    """Tag string does not name any registered task family."""

    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"unknown task tag: {tag!r}")


class FormatError(Exception):
    """Model response carries no parseable JSON object."""


class SchemaError(Exception):
    """Model payload does not match the task's output schema."""


class BudgetTooSmall(Exception):
    """Even the bare target section exceeds the input token budget."""

    def __init__(self, needed: int, budget: int):
        self.needed = needed
        self.budget = budget
        super().__init__(
            f"target alone needs ~{needed} tokens but the budget is {budget}")


# --------------------------------------------------------------------------
# Task registry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    """One analysis task: its literal tag, family, and output schema."""

    tag: str
    family: str
    output_schema: str
    variable: str | None = None
    step_guide: str | None = None

    def to_json(self) -> dict:
        out: dict = {"tag": self.tag, "family": self.family,
                     "output_schema": self.output_schema}
        if self.variable is not None:
            out["variable"] = self.variable
        return out


_FAMILY_SCHEMAS: dict[str, str] = {
    "funcname": "funcname.v1",
    "signature": "signature.v1",
    "vars": "rename_batch.v1",
    "args": "rename_batch.v1",
    "var": "rename_single.v1",
    "arg": "rename_single.v1",
    "algorithm": "algorithm.v1",
    "category": "category.v1",
    "summary-brief-en": "summary.v1",
    "summary-brief-cn": "summary.v1",
    "summary-en": "summary.v1",
    "summary-cn": "summary.v1",
    "func-analysis": "func_analysis.v1",
    "decompilation": "decompilation.v1",
}

#: The fourteen task families by their literal tags.  ``NAME`` in the
#: variable-scoped tags stands for a concrete variable, e.g. ``<arg:a1>``.
TASK_TAGS: tuple[str, ...] = (
    "<funcname>",
    "<signature>",
    "<vars>",
    "<args>",
    "<var:NAME>",
    "<arg:NAME>",
    "<algorithm>",
    "<category>",
    "<summary-brief-en>",
    "<summary-brief-cn>",
    "<summary-en>",
    "<summary-cn>",
    "<func-analysis>",
    "<decompilation>",
)

_TAG_RE = re.compile(r"<([a-z][a-z-]*)(?::([A-Za-z_][A-Za-z0-9_]*))?>\Z")


def task_for(tag: str) -> TaskSpec:
    """Resolve a literal tag line into its :class:`TaskSpec`.

    Variable-scoped families require a name parameter
    (``<var:v3>``/``<arg:a1>``); all other families refuse one.
    """
    m = _TAG_RE.match(tag)
    if m is None:
        raise UnknownTask(tag)
    family, variable = m.group(1), m.group(2)
    if family not in _FAMILY_SCHEMAS:
        raise UnknownTask(tag)
    if (variable is not None) != (family in ("var", "arg")):
        raise UnknownTask(tag)
    return TaskSpec(tag, family, _FAMILY_SCHEMAS[family], variable)


def all_tasks() -> tuple[TaskSpec, ...]:
    """One :class:`TaskSpec` per family, using the canonical tag literals."""
    return tuple(task_for(tag) for tag in TASK_TAGS)


@lru_cache(maxsize=None)
def load_schema(schema_id: str) -> dict:
    """Load a versioned output schema by id (e.g. ``"funcname.v1"``)."""
    path = resources.files("binsight.schemas").joinpath(f"{schema_id}.json")
    return json.loads(path.read_text("utf-8"))


@lru_cache(maxsize=None)
def _validator(schema_id: str) -> jsonschema.Draft202012Validator:
    schema = load_schema(schema_id)
    jsonschema.Draft202012Validator.check_schema(schema)
    return jsonschema.Draft202012Validator(schema)


_GOLDEN: dict[str, dict] = {
    "funcname": {"function_name": "aes_cbc_encrypt"},
    "signature": {
        "return_type": "void",
        "function_name": "aes_cbc_encrypt",
        "args": [
            {"name": "ctx", "type": "struct AES_ctx *"},
            {"name": "buf", "type": "uint8_t *"},
            {"name": "length", "type": "size_t"},
        ],
    },
    "vars": {
        "variables": [
            {"old": "a1", "new_name": "ctx", "new_type": "struct AES_ctx *"},
            {"old": "v3", "new_name": "round_idx", "new_type": "unsigned int"},
        ],
        "structs": [
            {
                "name": "AES_ctx",
                "members": [
                    {"name": "RoundKey", "type": "uint8_t[176]", "offset": 0,
                     "size": 176},
                    {"name": "Iv", "type": "uint8_t[16]", "offset": 176,
                     "size": 16},
                ],
            }
        ],
    },
    "args": {
        "variables": [
            {"old": "a1", "new_name": "ctx", "new_type": "struct AES_ctx *"},
            {"old": "a2", "new_name": "length", "new_type": "size_t"},
        ]
    },
    "var": {
        "variables": [
            {"old": "v3", "new_name": "iv_ptr", "new_type": "uint8_t *"}
        ]
    },
    "arg": {
        "variables": [
            {"old": "a1", "new_name": "ctx", "new_type": "struct AES_ctx *"}
        ]
    },
    "algorithm": {"algorithm": "AES-128 in CBC mode", "confidence": 0.9},
    "category": {"category": "cryptography"},
    "summary-brief-en": {
        "summary": "Encrypts a buffer in place with AES-128 in CBC mode."
    },
    "summary-brief-cn": {"summary": "使用 AES-128 CBC 模式就地加密缓冲区。"},
    "summary-en": {
        "summary": "Expands the 16-byte key into round keys, then encrypts "
                   "the buffer block by block in CBC mode, XOR-chaining each "
                   "plaintext block with the previous ciphertext block."
    },
    "summary-cn": {
        "summary": "先将 16 字节密钥扩展为轮密钥，再以 CBC 模式逐块加密缓冲区，"
                   "每个明文块与上一密文块异或链接。"
    },
    "func-analysis": {
        "function_name": "aes_cbc_encrypt",
        "return_type": "void",
        "args": [{"name": "ctx", "type": "struct AES_ctx *"}],
        "variables": [
            {"old": "v3", "new_name": "block", "new_type": "uint8_t *"}
        ],
        "algorithm": "AES-128 in CBC mode",
        "confidence": 0.85,
        "category": "cryptography",
        "summary": "Encrypts a buffer in place with AES-128 in CBC mode.",
        "comments": [
            {"line": 3, "text": "derive the round keys once per call"}
        ],
    },
    "decompilation": {
        "code": "void aes_cbc_encrypt(struct AES_ctx *ctx, uint8_t *buf, "
                "size_t length)\n{\n    AES_CBC_encrypt_buffer(ctx, buf, "
                "length);\n}\n"
    },
}


def golden_example(task: TaskSpec) -> dict:
    """A hand-written payload that validates against the task's schema."""
    return copy.deepcopy(_GOLDEN[task.family])


# --------------------------------------------------------------------------
# Prompt assembly
# --------------------------------------------------------------------------

HEADER_CONTEXT = "## Context Functions"
HEADER_CHAINS = "## Call Chains"
HEADER_DATAFLOW = "## Data Flow"
HEADER_TARGET = "## Target Function"
THINKING_TAG = "<Thought>"
SUPER_THINKING_TAG = "<Super-Thought>"

#: Default input budget, in estimated tokens.
DEFAULT_BUDGET = 16384

#: Character-per-token ratio used when no model-specific value is given.
DEFAULT_CHARS_PER_TOKEN = 4.0


@dataclass(frozen=True)
class PromptBundle:
    """Assembled prompt sections plus the final token estimate.

    ``part2_context`` holds one text per surviving context function in
    emission order (deepest first, so functions close to the target sit
    nearest the end of the prompt).  Sections that were dropped for
    budget or are empty render as nothing.
    """

    part1_target: str
    part2_context: tuple[str, ...]
    part3_chains: str
    part4_dataflow: str
    part5_task: str
    thinking_tag: str
    token_estimate: int

    def text(self) -> str:
        return render_prompt(self)

    def to_json(self) -> dict:
        return {
            "part1_target": self.part1_target,
            "part2_context": list(self.part2_context),
            "part3_chains": self.part3_chains,
            "part4_dataflow": self.part4_dataflow,
            "part5_task": self.part5_task,
            "thinking_tag": self.thinking_tag,
            "token_estimate": self.token_estimate,
        }


def estimate_tokens(text: str, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> int:
    """Character-count heuristic; independent of any model tokenizer."""
    return math.ceil(len(text) / chars_per_token)


def render_prompt(bundle: PromptBundle) -> str:
    """Flatten a bundle into prompt text: context, chains, data flow,
    target, then the task tag and thinking tag on their own lines."""
    blocks: list[str] = []
    if bundle.part2_context:
        blocks.append(HEADER_CONTEXT + "\n\n" + "\n\n".join(bundle.part2_context))
    if bundle.part3_chains:
        blocks.append(HEADER_CHAINS + "\n\n" + bundle.part3_chains)
    if bundle.part4_dataflow:
        blocks.append(HEADER_DATAFLOW + "\n\n" + bundle.part4_dataflow)
    blocks.append(HEADER_TARGET + "\n\n" + bundle.part1_target)
    blocks.append(bundle.part5_task + "\n" + bundle.thinking_tag)
    return "\n\n".join(blocks) + "\n"


def render_chains(chains: Sequence[CallChain]) -> str:
    """One arrow-joined line per unique chain, read in call direction."""
    lines: list[str] = []
    for chain in chains:
        nodes = chain.nodes
        if chain.direction is ChainDirection.Backward:
            nodes = tuple(reversed(nodes))
        line = " -> ".join(nodes)
        if line not in lines:
            lines.append(line)
    return "\n".join(lines)


def render_dataflow(traces: Iterable[TraceReport]) -> str:
    """Digest of alias bindings, one ``var@fn ~ aliases`` line each.

    The origin variable's own trivial binding is omitted."""
    lines: list[str] = []
    for report in traces:
        for (fn, var), aliases in sorted(report.aliases.items()):
            if (fn, var) == report.origin:
                continue
            line = f"{var}@{fn} ~ {', '.join(aliases)}"
            if line not in lines:
                lines.append(line)
    return "\n".join(lines)


_annotate_all = annotate_many


def _drop_order(sel: ContextSelection, context_names: Sequence[str]) -> list[str]:
    """Context names worst-rank-first — the order budget pressure evicts."""
    by_name = {c.name: c for c in sel.candidates}
    ranked = sorted(
        (by_name[n] for n in context_names),
        key=lambda c: (-int(c.dataflow_priority), -c.score, c.depth, c.name),
    )
    return [c.name for c in reversed(ranked)]


def build_prompt(graph: CallGraph, target: str | PseudoFunction,
                 sel: ContextSelection, traces: Sequence[TraceReport],
                 task: TaskSpec, super_thought: bool = False,
                 budget: int = DEFAULT_BUDGET,
                 chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> PromptBundle:
    """Assemble the model input for one task over one target.

    Sections are emitted context-first with the target nearest the end,
    just before the task tag and the thinking tag.  When the estimate
    exceeds ``budget``, context functions are dropped worst-rank-first,
    then the call chains, then all data-flow annotations; the target is
    never dropped.  Raises :class:`BudgetTooSmall` when the bare target
    section still does not fit.  Deterministic for identical inputs, and
    dropping never reorders the surviving sections.
    """
    target_fn = graph.function(target) if isinstance(target, str) else target
    context_names = [n for n in sel.selected
                     if n != target_fn.name and n in graph.nodes]
    functions = [target_fn] + [graph.nodes[n] for n in context_names]
    annotated = _annotate_all(functions, traces)
    plain = {fn.name: fn.record.pseudocode for fn in functions}

    chains_text = render_chains(sel.chains)
    dataflow_text = render_dataflow(traces)
    thinking = SUPER_THINKING_TAG if super_thought else THINKING_TAG

    keep = list(context_names)
    evict = iter(_drop_order(sel, context_names))
    include_chains = True
    include_annotations = True

    while True:
        texts = annotated if include_annotations else plain
        bundle = PromptBundle(
            part1_target=texts[target_fn.name],
            part2_context=tuple(texts[n] for n in keep),
            part3_chains=chains_text if include_chains else "",
            part4_dataflow=dataflow_text if include_annotations else "",
            part5_task=task.tag,
            thinking_tag=thinking,
            token_estimate=0,
        )
        estimate = estimate_tokens(render_prompt(bundle), chars_per_token)
        if estimate <= budget:
            return PromptBundle(
                bundle.part1_target, bundle.part2_context, bundle.part3_chains,
                bundle.part4_dataflow, bundle.part5_task, bundle.thinking_tag,
                estimate,
            )
        if keep:
            keep.remove(next(evict))
        elif include_chains:
            include_chains = False
        elif include_annotations:
            include_annotations = False
        else:
            raise BudgetTooSmall(estimate, budget)


# --------------------------------------------------------------------------
# Response parsing and validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    """Parsed model output: free-form reasoning plus the JSON payload."""

    task: TaskSpec
    reasoning: str
    payload: dict
    raw: str

    def to_json(self) -> dict:
        return {
            "task": self.task.to_json(),
            "reasoning": self.reasoning,
            "payload": self.payload,
        }


_FENCE_TAIL = re.compile(r"```(?:json)?\s*\Z")


def parse_response(task: TaskSpec, text: str) -> Prediction:
    """Split a raw response into reasoning and a schema-checked payload.

    The payload is the last well-formed JSON object anywhere in the
    text; everything before it (minus a trailing code-fence opener) is
    the reasoning.  Raises :class:`FormatError` when no JSON object
    exists and :class:`SchemaError` when the payload has the wrong shape.
    """
    decoder = json.JSONDecoder()
    found: tuple[dict, int] | None = None
    idx = 0
    while True:
        start = text.find("{", idx)
        if start == -1:
            break
        try:
            obj, end = decoder.raw_decode(text, start)
        except ValueError:
            idx = start + 1
            continue
        found = (obj, start)
        idx = max(end, start + 1)
    if found is None:
        raise FormatError("response contains no JSON object")
    payload, start = found
    reasoning = _FENCE_TAIL.sub("", text[:start].rstrip()).rstrip()
    errors = list(_validator(task.output_schema).iter_errors(payload))
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        raise SchemaError(f"payload does not match {task.output_schema}: "
                          f"{best.message}")
    return Prediction(task, reasoning, payload, text)


class ViolationCode(str, Enum):
    FormatError = "FormatError"
    SchemaError = "SchemaError"
    UnknownVariable = "UnknownVariable"
    UnknownType = "UnknownType"
    EmptyField = "EmptyField"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    detail: str

    def to_json(self) -> dict:
        return {"code": self.code.value, "detail": self.detail}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"ok": self.ok,
                "violations": [v.to_json() for v in self.violations]}


class _Checker:
    def __init__(self, target: PseudoFunction, clusters: TypeClusterTable,
                 declared_structs: set[str]):
        self.target = target
        self.clusters = clusters
        self.declared = declared_structs
        self.violations: list[Violation] = []

    def add(self, code: ViolationCode, detail: str) -> None:
        self.violations.append(Violation(code, detail))

    def name(self, value: object, label: str) -> None:
        if not isinstance(value, str) or not value.strip():
            self.add(ViolationCode.EmptyField, f"{label} is empty")
        elif not is_c_identifier(value):
            self.add(ViolationCode.FormatError,
                     f"{label} {value!r} is not a valid C identifier")

    def text(self, value: object, label: str) -> None:
        if not isinstance(value, str) or not value.strip():
            self.add(ViolationCode.EmptyField, f"{label} is empty")

    def type_str(self, value: object, label: str) -> None:
        if not isinstance(value, str) or not value.strip():
            self.add(ViolationCode.EmptyField, f"{label} is empty")
            return
        try:
            shape = self.clusters.parse(value)
        except UnknownType as exc:
            self.add(ViolationCode.UnknownType, f"{label}: {exc}")
            return
        if shape.named and shape.base[0] not in self.declared:
            self.add(ViolationCode.UnknownType,
                     f"{label} {value!r} references undeclared type "
                     f"{shape.base[0]!r}")

    def old_var(self, value: object, label: str) -> None:
        if not isinstance(value, str) or value not in self.target.var_names():
            self.add(ViolationCode.UnknownVariable,
                     f"{label}: {value!r} does not exist in "
                     f"{self.target.name}")


def validate_prediction(pred: Prediction, target: PseudoFunction,
                        clusters: TypeClusterTable | None = None) -> ValidationReport:
    """Semantic checks beyond the JSON schema.

    Renamed variables must exist in the target, proposed names must be
    valid C identifiers, proposed types must resolve to known base types
    (or structs declared in the payload, or pointers/arrays of either),
    and free-text fields must be non-empty.
    """
    clusters = clusters or TypeClusterTable()
    payload = pred.payload if isinstance(pred.payload, dict) else {}
    declared = {
        s.get("name") for s in payload.get("structs", [])
        if isinstance(s, dict) and isinstance(s.get("name"), str)
    }
    chk = _Checker(target, clusters, declared)
    family = pred.task.family

    if family in ("funcname", "signature", "func-analysis"):
        if "function_name" in payload:
            chk.name(payload["function_name"], "function name")

    if family == "signature" or (family == "func-analysis"
                                 and "return_type" in payload):
        chk.type_str(payload.get("return_type"), "return type")
    if family == "signature" or (family == "func-analysis" and "args" in payload):
        for i, arg in enumerate(payload.get("args", [])):
            chk.name(arg.get("name"), f"argument {i} name")
            chk.type_str(arg.get("type"), f"argument {i} type")

    if family in ("vars", "args", "var", "arg", "func-analysis"):
        for entry in payload.get("variables", []):
            old = entry.get("old")
            chk.old_var(old, "renamed variable")
            chk.name(entry.get("new_name"), f"new name for {old!r}")
            chk.type_str(entry.get("new_type"), f"new type for {old!r}")
        if family in ("var", "arg") and pred.task.variable is not None:
            entries = payload.get("variables", [])
            if entries and entries[0].get("old") not in (None, pred.task.variable):
                chk.add(ViolationCode.UnknownVariable,
                        f"task asks about {pred.task.variable!r} but the "
                        f"payload renames {entries[0].get('old')!r}")
        for struct in payload.get("structs", []):
            chk.name(struct.get("name"), "struct name")
            for member in struct.get("members", []):
                chk.name(member.get("name"),
                         f"member of {struct.get('name')!r}")
                chk.type_str(member.get("type"),
                             f"member type in {struct.get('name')!r}")

    if family == "algorithm":
        chk.text(payload.get("algorithm"), "algorithm")
    if family == "category":
        chk.text(payload.get("category"), "category")
    if family.startswith("summary") or family == "func-analysis":
        chk.text(payload.get("summary"), "summary")
    if family == "func-analysis":
        for i, comment in enumerate(payload.get("comments", [])):
            chk.text(comment.get("text"), f"comment {i} text")
    if family == "decompilation":
        chk.text(payload.get("code"), "code")

    return ValidationReport(tuple(chk.violations))
