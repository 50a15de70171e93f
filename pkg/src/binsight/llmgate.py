"""Chat-endpoint transport, task orchestration with retries, and the
summary judge.

The wire protocol is the common chat-completions JSON shape
(``{model, messages, max_tokens, temperature}``); anything that speaks
it — hosted APIs or local inference servers — plugs in through the
:class:`Transport` interface.  :func:`run_task` glues the pipeline
together: context selection, variable tracing, prompt assembly, the
model call, and re-asking while the prediction stays unusable.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Callable, Iterable, Protocol, Sequence

import httpx

from .bench.clusters import TypeClusterTable
from .cgraph import CallGraph, ContextConfig, collect_context, select_context
from .dflow import TraceReport, reached_functions, trace_all, trace_variable
from .promptkit import (
    DEFAULT_BUDGET,
    FormatError,
    Prediction,
    PromptBundle,
    SchemaError,
    TaskSpec,
    build_prompt,
    parse_response,
    task_for,
    validate_prediction,
)
from .pseudoc import DecompDump

__all__ = [
    "AttemptOutcome",
    "AttemptRecord",
    "AuthError",
    "HttpError",
    "HttpTransport",
    "JudgeFormatError",
    "LlmConfig",
    "RunStatus",
    "ScriptedTransport",
    "TaskRun",
    "Timeout",
    "Transport",
    "TransportError",
    "complete",
    "judge_summary",
    "load_config",
    "run_task",
]


class TransportError(Exception):
    """Base for anything that went wrong between us and the endpoint."""


class Timeout(TransportError):
    """The endpoint did not answer within the configured timeout."""


class HttpError(TransportError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"HTTP {status}" + (f": {detail}" if detail else ""))


class AuthError(TransportError):
    """Credentials rejected; retrying cannot help."""


class JudgeFormatError(Exception):
    """The judge never produced the four-verdict JSON object."""


@dataclass(frozen=True)
class LlmConfig:
    """Connection and sampling settings for one model endpoint."""

    endpoint: str
    model: str
    temperature: float = 0.0
    max_output_tokens: int = 16384
    timeout: float = 120.0
    max_retries: int = 3
    api_key_env: str = "BINSIGHT_API_KEY"

    def to_json(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "api_key_env": self.api_key_env,
        }


def load_config(path) -> LlmConfig:
    """Read an :class:`LlmConfig` from a TOML file.

    Keys mirror the field names at top level; ``endpoint`` and ``model``
    are required, the rest default.
    """
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    known = {f for f in LlmConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown model-config keys: {sorted(unknown)}")
    if "endpoint" not in data or "model" not in data:
        raise ValueError("model config needs at least 'endpoint' and 'model'")
    return LlmConfig(**data)


class Transport(Protocol):
    """One request/response exchange with a chat-completion endpoint."""

    def send(self, cfg: LlmConfig, payload: dict) -> dict: ...


class HttpTransport:
    """POSTs the payload to ``cfg.endpoint`` with bearer-token auth.

    Safe for concurrent use; at most ``max_in_flight`` requests are on
    the wire at once.
    """

    def __init__(self, client: httpx.Client | None = None,
                 max_in_flight: int = 8):
        self._client = client
        self.max_in_flight = max_in_flight
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def send(self, cfg: LlmConfig, payload: dict) -> dict:
        headers = {}
        key = os.environ.get(cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        with self._gate:
            try:
                if self._client is not None:
                    resp = self._client.post(cfg.endpoint, json=payload,
                                             headers=headers,
                                             timeout=cfg.timeout)
                else:
                    resp = httpx.post(cfg.endpoint, json=payload,
                                      headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                raise Timeout(str(exc)) from exc
            except httpx.HTTPError as exc:
                raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials "
                            f"(HTTP {resp.status_code})")
        if resp.status_code >= 400:
            raise HttpError(resp.status_code, resp.text[:200])
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError("endpoint returned non-JSON body") from exc


class ScriptedTransport:
    """Deterministic in-process transport for tests, demos, and replay.

    ``script`` items are consumed one per :meth:`send`: a string becomes
    a completion with that content, an exception instance is raised, a
    callable is applied to the request payload and must return a string,
    and a dict is returned verbatim as the raw response body.
    """

    def __init__(self, script: Iterable[object], repeat_last: bool = False):
        self.script = list(script)
        self.repeat_last = repeat_last
        self.calls = 0
        self.payloads: list[dict] = []

    def send(self, cfg: LlmConfig, payload: dict) -> dict:
        self.calls += 1
        self.payloads.append(payload)
        if not self.script:
            raise RuntimeError("transport script exhausted")
        if len(self.script) == 1 and self.repeat_last:
            item = self.script[0]
        else:
            item = self.script.pop(0)
        if isinstance(item, BaseException):
            raise item
        if callable(item):
            item = item(payload)
        if isinstance(item, str):
            return {"choices": [{"message": {"content": item}}],
                    "usage": {"prompt_tokens": 0, "completion_tokens": 0}}
        return item


_BACKOFF_BASE = 0.5


def complete(cfg: LlmConfig, messages: Sequence[dict],
             transport: Transport | None = None,
             sleep: Callable[[float], None] = time.sleep) -> dict:
    """One chat completion with transport-level retries.

    Timeouts, connection failures, and 5xx responses are retried with
    exponential backoff up to ``cfg.max_retries`` extra attempts; auth
    rejections and other 4xx responses are terminal.  Returns
    ``{"content": str, "usage": dict}``.
    """
    transport = transport or HttpTransport()
    payload = {
        "model": cfg.model,
        "messages": list(messages),
        "max_tokens": cfg.max_output_tokens,
        "temperature": cfg.temperature,
    }
    delay = _BACKOFF_BASE
    last_error: TransportError | None = None
    for attempt in range(1 + cfg.max_retries):
        try:
            data = transport.send(cfg, payload)
        except AuthError:
            raise
        except HttpError as exc:
            if exc.status < 500:
                raise
            last_error = exc
        except TransportError as exc:
            last_error = exc
        else:
            try:
                content = data["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise TransportError(
                    "malformed completion response") from exc
            return {"content": content, "usage": data.get("usage", {})}
        if attempt < cfg.max_retries:
            sleep(delay)
            delay *= 2
    assert last_error is not None
    raise last_error


class RunStatus(str, Enum):
    Applied = "Applied"
    ExhaustedRetries = "ExhaustedRetries"
    TransportFailed = "TransportFailed"


class AttemptOutcome(str, Enum):
    Applied = "applied"
    FormatError = "format-error"
    SchemaError = "schema-error"
    ValidationError = "validation-error"


@dataclass(frozen=True)
class AttemptRecord:
    raw: str
    outcome: AttemptOutcome
    detail: str = ""

    def to_json(self) -> dict:
        return {"raw": self.raw, "outcome": self.outcome.value,
                "detail": self.detail}


@dataclass
class TaskRun:
    """Everything one task execution produced, applied or not."""

    target: str
    task: TaskSpec
    prompt: PromptBundle
    attempts: list[AttemptRecord] = field(default_factory=list)
    final: Prediction | None = None
    status: RunStatus = RunStatus.ExhaustedRetries
    error: str = ""

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "task": self.task.to_json(),
            "prompt": self.prompt.to_json(),
            "attempts": [a.to_json() for a in self.attempts],
            "final": self.final.to_json() if self.final else None,
            "status": self.status.value,
            "error": self.error,
        }


def _traces_for(graph: CallGraph, target: str, task: TaskSpec,
                ctxcfg: ContextConfig) -> list[TraceReport]:
    if task.variable is not None:
        return [trace_variable(graph, target, task.variable, ctxcfg)]
    return trace_all(graph, target, ctxcfg)


def run_task(dump: DecompDump | CallGraph, target: str,
             task: TaskSpec | str, cfg: LlmConfig,
             ctxcfg: ContextConfig = ContextConfig(),
             transport: Transport | None = None,
             clusters: TypeClusterTable | None = None,
             budget: int = DEFAULT_BUDGET, super_thought: bool = False,
             sleep: Callable[[float], None] = time.sleep) -> TaskRun:
    """Run one analysis task end to end against one target function.

    Builds the context selection, traces variables, assembles the
    prompt, and calls the model; while the response stays unusable
    (unparseable, off-schema, or failing validation) the same prompt is
    re-asked, up to ``cfg.max_retries`` extra attempts.  Transport
    failures surface as status ``TransportFailed`` rather than an
    exception.
    """
    graph = dump if isinstance(dump, CallGraph) else CallGraph(dump)
    if isinstance(task, str):
        task = task_for(task)
    target_fn = graph.function(target)
    traces = _traces_for(graph, target, task, ctxcfg)
    sel = collect_context(graph, target, ctxcfg)
    sel = select_context(sel, ctxcfg, reached_functions(traces, target))
    bundle = build_prompt(graph, target_fn, sel, traces, task,
                          super_thought=super_thought, budget=budget)
    messages = [{"role": "user", "content": bundle.text()}]
    run = TaskRun(target=target, task=task, prompt=bundle)

    for _ in range(1 + cfg.max_retries):
        try:
            result = complete(cfg, messages, transport, sleep=sleep)
        except TransportError as exc:
            run.status = RunStatus.TransportFailed
            run.error = str(exc)
            return run
        raw = result["content"]
        try:
            pred = parse_response(task, raw)
        except FormatError as exc:
            run.attempts.append(
                AttemptRecord(raw, AttemptOutcome.FormatError, str(exc)))
            continue
        except SchemaError as exc:
            run.attempts.append(
                AttemptRecord(raw, AttemptOutcome.SchemaError, str(exc)))
            continue
        report = validate_prediction(pred, target_fn, clusters)
        if report.ok:
            run.attempts.append(AttemptRecord(raw, AttemptOutcome.Applied))
            run.final = pred
            run.status = RunStatus.Applied
            return run
        detail = "; ".join(f"{v.code.value}: {v.detail}"
                           for v in report.violations)
        run.attempts.append(
            AttemptRecord(raw, AttemptOutcome.ValidationError, detail))
    run.status = RunStatus.ExhaustedRetries
    return run


# --------------------------------------------------------------------------
# Summary judge
# --------------------------------------------------------------------------

_JUDGE_PROMPT_ID = "judge_summary.v1"
_JUDGE_KEYS = ("coverage", "accuracy", "misleading", "readable")


def _judge_prompt(pseudocode: str, summary: str,
                  reference_source: str | None) -> str:
    template = (resources.files("binsight.prompts")
                .joinpath(f"{_JUDGE_PROMPT_ID}.txt").read_text("utf-8"))
    reference_block = ""
    if reference_source:
        reference_block = ("Reference source code:\n```\n"
                           + reference_source + "\n```\n\n")
    return (template
            .replace("<<REFERENCE_BLOCK>>", reference_block)
            .replace("<<PSEUDOCODE>>", pseudocode)
            .replace("<<SUMMARY>>", summary))


def _extract_verdicts(text: str) -> dict | None:
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
    if not all(isinstance(found.get(k), bool) for k in _JUDGE_KEYS):
        return None
    return found


def judge_summary(cfg: LlmConfig, pseudocode: str, summary: str,
                  reference_source: str | None = None,
                  transport: Transport | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> dict:
    """Score a summary on four yes/no dimensions with one judge call.

    The rubric prompt is frozen in-repo and the judge always runs at
    temperature 0.  The misleading verdict is inverted so that every
    reported field means "pass"; the score is the equal-weight mean,
    always one of {0, 0.25, 0.5, 0.75, 1.0}.  Raises
    :class:`JudgeFormatError` when the judge never yields the verdict
    object.
    """
    if not summary or not summary.strip():
        raise ValueError("summary must be non-empty")
    judge_cfg = replace(cfg, temperature=0.0)
    prompt = _judge_prompt(pseudocode, summary, reference_source)
    messages = [{"role": "user", "content": prompt}]
    for _ in range(1 + cfg.max_retries):
        result = complete(judge_cfg, messages, transport, sleep=sleep)
        verdicts = _extract_verdicts(result["content"])
        if verdicts is not None:
            passes = {
                "coverage": verdicts["coverage"],
                "accuracy": verdicts["accuracy"],
                "misleading_free": not verdicts["misleading"],
                "readable": verdicts["readable"],
            }
            passes["score"] = sum(passes.values()) / 4.0
            return passes
    raise JudgeFormatError(
        f"no four-verdict JSON object after {1 + cfg.max_retries} attempts")
