"""Generator–discriminator synthesis of chain-of-thought training data.

Fine-tuning a model to reason about stripped binaries needs supervised
records whose reasoning traces are trustworthy.  This module builds them
with two model roles: a *generator* writes a chain of thought (CoT) that
derives a known-good answer from the task prompt, and a *discriminator*
judges the result on four yes/no dimensions, accepting only traces that
pass all four.  A deterministic purity detector additionally rejects
traces that quote the ground truth verbatim, so no leaked answer can
slip through on a lenient judge.

Two record shapes come out of the pipeline:

* :class:`SftRecord` — an accepted prompt/CoT/answer triple, either in
  ``standard`` mode (one generation) or ``super`` mode (one generation
  per guide step, assembled with step headings; any step rejection
  aborts the whole record, never emitting a partial one).
* :class:`DpoPair` — a preference pair harvested from the retry loop:
  every rejected generation paired with the finally accepted one, both
  answering the identical generator prompt.

:func:`synthesize` drives a whole raw dataset through the loop and
streams results into fixed-size JSONL shards with deterministic names;
re-running over a partially written output directory skips raw records
whose key is already present, so an interrupted run resumes where it
stopped.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

import jsonschema

from .llmgate import JudgeFormatError, LlmConfig, Transport, complete
from .promptkit import UnknownTask, estimate_tokens, load_schema, task_for

__all__ = [
    "COT_CLOSE",
    "COT_OPEN",
    "BuildResult",
    "CotAttempt",
    "CotMode",
    "DEFAULT_MAX_ATTEMPTS",
    "DEFAULT_SHARD_SIZE",
    "DpoPair",
    "ExhaustedAttempts",
    "GenFormatError",
    "GuideError",
    "RawSftRecord",
    "SftRecord",
    "ShardWriter",
    "StepGuide",
    "StepRejected",
    "SynthStats",
    "build_sft_record",
    "build_super_cot",
    "completed_keys",
    "default_guide",
    "discriminate",
    "generate_cot",
    "load_guide",
    "load_raw_records",
    "purity_check",
    "synthesize",
]


# --------------------------------------------------------------------------
# Constants
# --------------------------------------------------------------------------

#: Markers the generator must wrap its chain of thought in.
COT_OPEN = "<cot>"
COT_CLOSE = "</cot>"

#: Generation attempts per raw record before giving up.
DEFAULT_MAX_ATTEMPTS = 3

#: Records per output shard file.
DEFAULT_SHARD_SIZE = 1000

#: Ground-truth identifiers shorter than this are too generic to count
#: as leaks; source lines shorter than ``_MIN_LEAK_LINE`` (after
#: whitespace normalization) likewise.
_MIN_LEAK_IDENT = 6
_MIN_LEAK_LINE = 20

_GENERATOR_PROMPT_ID = "cot_generator.v1"
_STEP_PROMPT_ID = "cot_step_generator.v1"
_DISCRIMINATOR_PROMPT_ID = "cot_discriminator.v1"

#: The discriminator's four yes/no dimensions; a record is accepted only
#: when all four come back true.
VERDICT_KEYS = ("correct", "consistent", "helpful", "pure")

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


# --------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------


class SynthError(Exception):
    """Base class for synthesis failures."""


class GenFormatError(SynthError):
    """The generator response carried no usable chain-of-thought block.

    ``response`` holds the full response text for provenance logging.
    """

    def __init__(self, message: str, response: str = ""):
        super().__init__(message)
        self.response = response


class ExhaustedAttempts(SynthError):
    """Every generation attempt for a record was rejected.

    ``attempts`` holds the full attempt log; no record and no preference
    pairs are produced, because pairs need an accepted generation to
    serve as the chosen side.
    """

    def __init__(self, message: str, attempts: tuple[CotAttempt, ...] = ()):
        super().__init__(message)
        self.attempts = attempts


class StepRejected(SynthError):
    """A stepwise build failed at step ``step`` (1-based) and aborted.

    Stepwise records are all-or-nothing: a rejection at any step throws
    away the accepted earlier steps rather than emitting a partial
    record.  ``attempts`` holds the per-step log up to and including the
    rejected step.
    """

    def __init__(self, step: int, message: str,
                 attempts: tuple[CotAttempt, ...] = ()):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.attempts = attempts


class GuideError(SynthError):
    """A guide file is missing, malformed, or names an unknown task."""


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _validator(schema_id: str) -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(load_schema(schema_id))


def _canonical_json(value: object) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RawSftRecord:
    """One unit of ground truth awaiting a reasoning trace.

    ``prompt`` is the fully rendered task prompt the trained model will
    see; ``answer`` is the verified payload for ``task`` and must
    satisfy that task's output schema; ``source_code`` is the original
    source the binary came from (may be empty when unavailable);
    ``meta`` carries free-form origin fields such as ``file`` and
    ``project``.
    """

    task: str
    prompt: str
    answer: Mapping
    source_code: str = ""
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        spec = task_for(self.task)
        if not self.prompt or not self.prompt.strip():
            raise ValueError("prompt must be non-empty")
        errors = list(_validator(spec.output_schema).iter_errors(self.answer))
        if errors:
            best = jsonschema.exceptions.best_match(errors)
            raise ValueError(
                f"answer does not satisfy {spec.output_schema}: {best.message}")

    @property
    def key(self) -> str:
        """Stable identity used for shard-level resume de-duplication."""
        digest = hashlib.sha256()
        digest.update(self.task.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(self.prompt.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(_canonical_json(self.answer).encode("utf-8"))
        return digest.hexdigest()[:16]

    def to_json(self) -> dict:
        return {"task": self.task, "prompt": self.prompt,
                "answer": self.answer, "source_code": self.source_code,
                "meta": dict(self.meta)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "RawSftRecord":
        try:
            return cls(task=obj["task"], prompt=obj["prompt"],
                       answer=obj["answer"],
                       source_code=obj.get("source_code", ""),
                       meta=obj.get("meta", {}))
        except KeyError as exc:
            raise ValueError(f"raw record missing field {exc.args[0]!r}") from exc


class CotMode(str, Enum):
    """How a record's chain of thought was produced."""

    Standard = "standard"
    Super = "super"


@dataclass(frozen=True)
class CotAttempt:
    """One generation attempt (or one stepwise step) in a record's log."""

    index: int
    response: str
    outcome: str  # "accepted" | "format-error" | "impure" | "rejected"
    verdicts: Mapping | None = None

    def to_json(self) -> dict:
        out: dict = {"index": self.index, "response": self.response,
                     "outcome": self.outcome}
        if self.verdicts is not None:
            out["verdicts"] = dict(self.verdicts)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "CotAttempt":
        return cls(index=obj["index"], response=obj["response"],
                   outcome=obj["outcome"], verdicts=obj.get("verdicts"))


@dataclass(frozen=True)
class SftRecord:
    """An accepted supervised record: prompt, chain of thought, answer.

    ``provenance`` preserves every generation attempt that led here so a
    record can always be audited against the loop that produced it.
    """

    key: str
    task: str
    prompt: str
    cot: str
    answer: Mapping
    mode: CotMode
    provenance: tuple[CotAttempt, ...] = ()

    def to_json(self) -> dict:
        return {"key": self.key, "task": self.task, "prompt": self.prompt,
                "cot": self.cot, "answer": self.answer,
                "mode": self.mode.value,
                "provenance": [a.to_json() for a in self.provenance]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SftRecord":
        return cls(key=obj["key"], task=obj["task"], prompt=obj["prompt"],
                   cot=obj["cot"], answer=obj["answer"],
                   mode=CotMode(obj["mode"]),
                   provenance=tuple(CotAttempt.from_json(a)
                                    for a in obj.get("provenance", ())))


@dataclass(frozen=True)
class DpoPair:
    """A preference pair: two responses to the identical generator prompt.

    ``chosen`` is the finally accepted generation, ``rejected`` an
    earlier one the loop turned down; they must differ.
    """

    key: str
    prompt: str
    chosen: str
    rejected: str

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")

    def to_json(self) -> dict:
        return {"key": self.key, "prompt": self.prompt,
                "chosen": self.chosen, "rejected": self.rejected}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DpoPair":
        return cls(key=obj["key"], prompt=obj["prompt"],
                   chosen=obj["chosen"], rejected=obj["rejected"])


@dataclass(frozen=True)
class StepGuide:
    """Expert guidance for one task: free-text for single-shot
    generation plus ordered step prompts for stepwise generation."""

    task: str
    text: str = ""
    steps: tuple[str, ...] = ()

    def __post_init__(self):
        task_for(self.task)  # unknown tags fail fast
        object.__setattr__(self, "steps", tuple(self.steps))


def load_guide(path: str | Path) -> StepGuide:
    """Load a ``[guide]`` table from a TOML file."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise GuideError(f"cannot read guide {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise GuideError(f"invalid guide {path}: {exc}") from exc
    table = data.get("guide")
    if not isinstance(table, dict) or "task" not in table:
        raise GuideError(f"invalid guide {path}: missing [guide] table "
                         "with a 'task' key")
    steps = table.get("steps", [])
    if (not isinstance(steps, list)
            or any(not isinstance(s, str) for s in steps)):
        raise GuideError(f"invalid guide {path}: 'steps' must be a list "
                         "of strings")
    try:
        return StepGuide(task=table["task"], text=table.get("text", ""),
                         steps=tuple(steps))
    except UnknownTask as exc:
        raise GuideError(f"invalid guide {path}: {exc}") from exc


def default_guide(task: str) -> StepGuide:
    """Load the packaged guide for a task tag, keyed by task family."""
    family = task_for(task).family
    ref = resources.files("binsight.guides").joinpath(f"{family}.toml")
    if not ref.is_file():
        raise GuideError(f"no packaged guide for task family {family!r}")
    data = tomllib.loads(ref.read_text("utf-8"))
    table = data["guide"]
    return StepGuide(task=table["task"], text=table.get("text", ""),
                     steps=tuple(table.get("steps", [])))


# --------------------------------------------------------------------------
# Prompt rendering
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _template(prompt_id: str) -> str:
    return (resources.files("binsight.prompts")
            .joinpath(f"{prompt_id}.txt").read_text("utf-8"))


def _source_block(source_code: str) -> str:
    if not source_code.strip():
        return ""
    return f"## Original Source\n\n```c\n{source_code.rstrip()}\n```\n\n"


def _answer_json(answer: Mapping) -> str:
    return json.dumps(answer, indent=2, sort_keys=True)


def generator_prompt(raw: RawSftRecord, guide_text: str = "") -> str:
    """Render the single-shot generator prompt for a raw record."""
    guide_block = ""
    if guide_text.strip():
        guide_block = f"## Guidance\n\n{guide_text.strip()}\n\n"
    return (_template(_GENERATOR_PROMPT_ID)
            .replace("<<TASK_TAG>>", raw.task)
            .replace("<<GUIDE_BLOCK>>", guide_block)
            .replace("<<TASK_PROMPT>>", raw.prompt)
            .replace("<<ANSWER>>", _answer_json(raw.answer))
            .replace("<<SOURCE_BLOCK>>", _source_block(raw.source_code)))


def _step_prompt(raw: RawSftRecord, step: str, index: int, count: int,
                 previous: Sequence[str]) -> str:
    previous_block = ""
    if previous:
        joined = "\n\n".join(f"### Step {i}\n\n{text}"
                             for i, text in enumerate(previous, 1))
        previous_block = f"## Accepted Earlier Steps\n\n{joined}\n\n"
    return (_template(_STEP_PROMPT_ID)
            .replace("<<TASK_TAG>>", raw.task)
            .replace("<<STEP_INDEX>>", str(index))
            .replace("<<STEP_COUNT>>", str(count))
            .replace("<<STEP>>", step.strip())
            .replace("<<PREVIOUS_BLOCK>>", previous_block)
            .replace("<<TASK_PROMPT>>", raw.prompt)
            .replace("<<ANSWER>>", _answer_json(raw.answer))
            .replace("<<SOURCE_BLOCK>>", _source_block(raw.source_code)))


def _discriminator_prompt(raw: RawSftRecord, cot: str) -> str:
    return (_template(_DISCRIMINATOR_PROMPT_ID)
            .replace("<<TASK_TAG>>", raw.task)
            .replace("<<TASK_PROMPT>>", raw.prompt)
            .replace("<<ANSWER>>", _answer_json(raw.answer))
            .replace("<<SOURCE_BLOCK>>", _source_block(raw.source_code))
            .replace("<<COT>>", cot))


# --------------------------------------------------------------------------
# Generator
# --------------------------------------------------------------------------


def _extract_cot(response: str) -> str | None:
    start = response.find(COT_OPEN)
    if start == -1:
        return None
    end = response.find(COT_CLOSE, start + len(COT_OPEN))
    if end == -1:
        return None
    inner = response[start + len(COT_OPEN):end].strip()
    return inner or None


def _call(prompt: str, cfg: LlmConfig, transport: Transport | None,
          sleep: Callable[[float], None]) -> str:
    result = complete(cfg, [{"role": "user", "content": prompt}],
                      transport, sleep=sleep)
    return result["content"]


def _generate(prompt: str, cfg: LlmConfig, transport: Transport | None,
              sleep: Callable[[float], None]) -> tuple[str, str]:
    """One generation; returns (full response, extracted chain of thought)."""
    response = _call(prompt, cfg, transport, sleep)
    cot = _extract_cot(response)
    if cot is None:
        raise GenFormatError(
            f"generator response has no {COT_OPEN}...{COT_CLOSE} block",
            response=response)
    return response, cot


def generate_cot(raw: RawSftRecord, guide: StepGuide | str,
                 cfg: LlmConfig, transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep) -> str:
    """One single-shot generation; returns the extracted chain of thought.

    ``guide`` may be a :class:`StepGuide` (its free text is used) or a
    plain guidance string.  Raises :class:`GenFormatError` when the
    response has no ``<cot>``...``</cot>`` block (the full response text
    is preserved on the exception); transport errors propagate from the
    completion layer.
    """
    guide_text = guide.text if isinstance(guide, StepGuide) else guide
    _, cot = _generate(generator_prompt(raw, guide_text), cfg, transport, sleep)
    return cot


# --------------------------------------------------------------------------
# Discriminator
# --------------------------------------------------------------------------


def _extract_cot_verdicts(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    found = None
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
        found = obj
        idx = max(end, start + 1)
    if not isinstance(found, dict):
        return None
    if not all(isinstance(found.get(k), bool) for k in VERDICT_KEYS):
        return None
    return found


def discriminate(raw: RawSftRecord, cot: str, cfg: LlmConfig,
                 transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep) -> dict:
    """Judge a chain of thought on four yes/no dimensions with one call.

    Returns ``{"correct", "consistent", "helpful", "pure", "accept"}``
    where ``accept`` is true only when all four verdicts are.  The
    discriminator always runs at temperature 0; malformed verdict
    responses are re-asked up to ``cfg.max_retries`` extra times before
    :class:`~binsight.llmgate.JudgeFormatError` is raised.
    """
    if not cot or not cot.strip():
        raise ValueError("cot must be non-empty")
    judge_cfg = replace(cfg, temperature=0.0)
    prompt = _discriminator_prompt(raw, cot)
    for _ in range(1 + cfg.max_retries):
        content = _call(prompt, judge_cfg, transport, sleep)
        verdicts = _extract_cot_verdicts(content)
        if verdicts is not None:
            out = {k: verdicts[k] for k in VERDICT_KEYS}
            out["accept"] = all(out.values())
            return out
    raise JudgeFormatError(
        f"no four-verdict JSON object after {1 + cfg.max_retries} attempts")


# --------------------------------------------------------------------------
# Purity detector
# --------------------------------------------------------------------------


def _iter_strings(value: object) -> Iterable[str]:
    if isinstance(value, str):
        yield value
    elif isinstance(value, Mapping):
        for item in value.values():
            yield from _iter_strings(item)
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _iter_strings(item)


def _answer_identifiers(answer: Mapping) -> set[str]:
    idents: set[str] = set()
    for text in _iter_strings(answer):
        for match in _IDENT_RE.finditer(text):
            if len(match.group()) >= _MIN_LEAK_IDENT:
                idents.add(match.group())
    return idents


def _source_lines(source_code: str) -> set[str]:
    lines: set[str] = set()
    for line in source_code.splitlines():
        normalized = " ".join(line.split())
        if len(normalized) >= _MIN_LEAK_LINE:
            lines.add(normalized)
    return lines


def _pre_conclusion(cot: str) -> str:
    """The part of a chain of thought before its concluding section.

    The conclusion starts at the last line whose text — ignoring leading
    ``#``/``*`` heading markers — begins with "conclusion" (any case).
    Without such a line the whole text is the pre-conclusion region.
    """
    lines = cot.splitlines()
    start = None
    for i, line in enumerate(lines):
        stripped = line.strip().lstrip("#*").strip()
        if stripped.lower().startswith("conclusion"):
            start = i
    if start is None:
        return cot
    return "\n".join(lines[:start])


def purity_check(cot: str, answer: Mapping, source_code: str) -> bool:
    """True when the chain of thought does not leak the ground truth.

    A leak is any answer identifier of length ≥ 6 appearing verbatim
    (on word boundaries), or any source line of normalized length ≥ 20
    characters appearing verbatim (whitespace-normalized), in the region
    before the concluding section.  The conclusion itself may state the
    answer — that is its job.
    """
    region = _pre_conclusion(cot)
    for ident in sorted(_answer_identifiers(answer)):
        if re.search(rf"\b{re.escape(ident)}\b", region):
            return False
    flat_region = " ".join(region.split())
    for line in sorted(_source_lines(source_code)):
        if line in flat_region:
            return False
    return True


# --------------------------------------------------------------------------
# Record builders
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BuildResult:
    """An accepted record plus the preference pairs its retries yielded."""

    record: SftRecord
    dpo: tuple[DpoPair, ...] = ()


def build_sft_record(raw: RawSftRecord, guide: StepGuide | str,
                     cfg: LlmConfig, transport: Transport | None = None, *,
                     max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                     sleep: Callable[[float], None] = time.sleep
                     ) -> BuildResult:
    """Generate, screen, and judge until one chain of thought is accepted.

    Each attempt runs generate → purity check → discriminate; the first
    accepted chain of thought yields the record, and every earlier
    rejected response is paired with the accepted one as a
    :class:`DpoPair` — an acceptance on attempt *k* yields exactly
    *k − 1* pairs.  When all ``max_attempts`` attempts are rejected,
    :class:`ExhaustedAttempts` carries the attempt log; no pairs are
    produced because there is no accepted side.  Transport errors and
    judge-format failures propagate immediately.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    guide_text = guide.text if isinstance(guide, StepGuide) else guide
    prompt = generator_prompt(raw, guide_text)
    attempts: list[CotAttempt] = []
    for index in range(1, max_attempts + 1):
        try:
            response, cot = _generate(prompt, cfg, transport, sleep)
        except GenFormatError as exc:
            attempts.append(CotAttempt(index, exc.response, "format-error"))
            continue
        if not purity_check(cot, raw.answer, raw.source_code):
            attempts.append(CotAttempt(index, response, "impure"))
            continue
        verdicts = discriminate(raw, cot, cfg, transport, sleep=sleep)
        if not verdicts["accept"]:
            attempts.append(CotAttempt(index, response, "rejected", verdicts))
            continue
        attempts.append(CotAttempt(index, response, "accepted", verdicts))
        record = SftRecord(key=raw.key, task=raw.task, prompt=raw.prompt,
                           cot=cot, answer=raw.answer, mode=CotMode.Standard,
                           provenance=tuple(attempts))
        pairs = tuple(DpoPair(key=raw.key, prompt=prompt, chosen=response,
                              rejected=earlier.response)
                      for earlier in attempts[:-1]
                      if earlier.response != response)
        return BuildResult(record=record, dpo=pairs)
    raise ExhaustedAttempts(
        f"no accepted chain of thought for {raw.task} after "
        f"{max_attempts} attempts", tuple(attempts))


def build_super_cot(raw: RawSftRecord, guide: StepGuide,
                    cfg: LlmConfig, transport: Transport | None = None, *,
                    sleep: Callable[[float], None] = time.sleep) -> SftRecord:
    """Build one stepwise record: one screened generation per guide step.

    Each step's chain of thought must pass the purity detector and the
    discriminator; a rejection at any step raises
    :class:`StepRejected` with that step's 1-based index and discards
    the accepted earlier steps — partial records are never emitted.
    Accepted steps are assembled in order under ``## Step n`` headings.
    """
    if len(guide.steps) < 2:
        raise ValueError("stepwise generation needs at least 2 guide steps")
    count = len(guide.steps)
    attempts: list[CotAttempt] = []
    accepted: list[str] = []
    for index, step in enumerate(guide.steps, 1):
        prompt = _step_prompt(raw, step, index, count, accepted)
        try:
            response, cot = _generate(prompt, cfg, transport, sleep)
        except GenFormatError as exc:
            attempts.append(CotAttempt(index, exc.response, "format-error"))
            raise StepRejected(index, "generator response has no "
                               "chain-of-thought block", tuple(attempts))
        if not purity_check(cot, raw.answer, raw.source_code):
            attempts.append(CotAttempt(index, response, "impure"))
            raise StepRejected(index, "chain of thought leaks ground truth",
                               tuple(attempts))
        verdicts = discriminate(raw, cot, cfg, transport, sleep=sleep)
        if not verdicts["accept"]:
            attempts.append(CotAttempt(index, response, "rejected", verdicts))
            raise StepRejected(index, "discriminator rejected the step",
                               tuple(attempts))
        attempts.append(CotAttempt(index, response, "accepted", verdicts))
        accepted.append(cot)
    assembled = "\n\n".join(f"## Step {i}\n\n{text}"
                            for i, text in enumerate(accepted, 1))
    if not purity_check(assembled, raw.answer, raw.source_code):
        # A step may legally quote the answer after its own concluding
        # line, but assembly can move that text back in front of the
        # final conclusion; the record-level invariant still holds.
        raise StepRejected(count, "assembled chain of thought leaks "
                           "ground truth", tuple(attempts))
    return SftRecord(key=raw.key, task=raw.task, prompt=raw.prompt,
                     cot=assembled, answer=raw.answer, mode=CotMode.Super,
                     provenance=tuple(attempts))


# --------------------------------------------------------------------------
# Shards and resume
# --------------------------------------------------------------------------


def _repair_tail(path: Path) -> int:
    """Truncate a dangling partial last line; return complete-line count."""
    data = path.read_bytes()
    if not data:
        return 0
    if not data.endswith(b"\n"):
        keep = data.rfind(b"\n") + 1
        with path.open("r+b") as fh:
            fh.truncate(keep)
        data = data[:keep]
    return data.count(b"\n")


class ShardWriter:
    """Append JSON records to fixed-size, deterministically named shards.

    Shard ``<prefix>-00000.jsonl`` holds the first ``shard_size``
    records, ``<prefix>-00001.jsonl`` the next, and so on; reopening an
    output directory continues in the last partial shard (a dangling
    partial line from an interrupted write is truncated first).  The
    same ``shard_size`` must be used across runs of one directory.
    """

    def __init__(self, out_dir: str | Path, prefix: str,
                 shard_size: int = DEFAULT_SHARD_SIZE):
        if shard_size < 1:
            raise ValueError("shard_size must be >= 1")
        self._dir = Path(out_dir)
        self._prefix = prefix
        self._size = shard_size
        self._count = sum(_repair_tail(path) for path in
                          sorted(self._dir.glob(f"{prefix}-*.jsonl")))

    @property
    def count(self) -> int:
        return self._count

    def write(self, obj: Mapping) -> Path:
        path = self._dir / f"{self._prefix}-{self._count // self._size:05d}.jsonl"
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self._count += 1
        return path


def completed_keys(out_dir: str | Path) -> set[str]:
    """Keys of records already present in an output directory's shards."""
    keys: set[str] = set()
    for path in sorted(Path(out_dir).glob("sft-*.jsonl")):
        for line in path.read_text("utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError:
                continue
            key = obj.get("key") if isinstance(obj, dict) else None
            if isinstance(key, str):
                keys.add(key)
    return keys


def load_raw_records(path: str | Path) -> list[RawSftRecord]:
    """Read raw records from JSONL, one object per line."""
    path = Path(path)
    records: list[RawSftRecord] = []
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            records.append(RawSftRecord.from_json(obj))
        except (TypeError, ValueError, UnknownTask) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthStats:
    """Outcome counters for one synthesis run.

    ``accept_rate`` is accepted over attempted (skipped records are not
    attempted); ``mean_cot_tokens`` averages the estimated token length
    of this run's accepted chains of thought.
    """

    total: int
    skipped: int
    accepted: int
    failed: int
    dpo_pairs: int
    accept_rate: float
    mean_cot_tokens: float

    def to_json(self) -> dict:
        return {"total": self.total, "skipped": self.skipped,
                "accepted": self.accepted, "failed": self.failed,
                "dpo_pairs": self.dpo_pairs,
                "accept_rate": self.accept_rate,
                "mean_cot_tokens": self.mean_cot_tokens}


def synthesize(records: Iterable[RawSftRecord], guide: StepGuide,
               cfg: LlmConfig, out_dir: str | Path, *,
               mode: CotMode = CotMode.Standard,
               transport: Transport | None = None,
               max_attempts: int = DEFAULT_MAX_ATTEMPTS,
               shard_size: int = DEFAULT_SHARD_SIZE,
               workers: int = 1,
               sleep: Callable[[float], None] = time.sleep) -> SynthStats:
    """Drive raw records through the build loop into JSONL shards.

    Records whose key already appears in ``out_dir``'s shards are
    skipped, so re-running after an interruption resumes where it
    stopped (previously failed records are retried).  A record's
    preference pairs are written before the record itself, so a resumed
    run never skips a record whose pairs were lost.  ``workers`` > 1
    runs the build loop in a thread pool (the transport must then be
    safe for concurrent use); results are written by this thread alone,
    in input order, so shard contents stay deterministic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done = completed_keys(out)
    sft_writer = ShardWriter(out, "sft", shard_size)
    dpo_writer = ShardWriter(out, "dpo", shard_size)

    total = skipped = accepted = failed = pair_count = 0
    cot_tokens: list[int] = []
    pending: list[RawSftRecord] = []
    for raw in records:
        total += 1
        if raw.key in done:
            skipped += 1
            continue
        done.add(raw.key)
        pending.append(raw)

    def build(raw: RawSftRecord):
        try:
            if mode is CotMode.Super:
                return build_super_cot(raw, guide, cfg, transport,
                                       sleep=sleep), ()
            result = build_sft_record(raw, guide, cfg, transport,
                                      max_attempts=max_attempts, sleep=sleep)
            return result.record, result.dpo
        except (ExhaustedAttempts, StepRejected):
            return None, ()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(build, pending))
    else:
        outcomes = map(build, pending)

    for record, pairs in outcomes:
        if record is None:
            failed += 1
            continue
        for pair in pairs:
            dpo_writer.write(pair.to_json())
        sft_writer.write(record.to_json())
        accepted += 1
        pair_count += len(pairs)
        cot_tokens.append(estimate_tokens(record.cot))

    attempted = accepted + failed
    return SynthStats(
        total=total, skipped=skipped, accepted=accepted, failed=failed,
        dpo_pairs=pair_count,
        accept_rate=accepted / attempted if attempted else 0.0,
        mean_cot_tokens=(sum(cot_tokens) / len(cot_tokens)
                         if cot_tokens else 0.0))
