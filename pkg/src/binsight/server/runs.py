"""Task-run lifecycle: launch, background execution, persistence.

A run moves Queued → Running → one terminal state (Applied,
ExhaustedRetries, TransportFailed).  Every transition is persisted
atomically, terminal records never change again, and each model
response's reasoning is appended to the record as it arrives so
pollers observe a monotonically growing reasoning prefix.  One run per
(project, target, task) may be in flight at a time; a global semaphore
bounds concurrent model calls across all runs.
"""

from __future__ import annotations

import secrets
import threading
from datetime import datetime, timezone
from typing import Callable

from ..bench.clusters import TypeClusterTable
from ..cgraph import CallGraph, ContextConfig
from ..llmgate import (HttpTransport, LlmConfig, RunStatus, TaskRun, Transport,
                       run_task)
from ..promptkit import TaskSpec, parse_response
from .items import derive_items
from .store import FileStore

QUEUED = "Queued"
RUNNING = "Running"
TERMINAL_STATES = frozenset(s.value for s in RunStatus)

RUN_SCHEMA = "run.v1"


class DuplicateRun(Exception):
    """An identical (project, target, task) run is already in flight."""


class UnknownRun(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class _RelayTransport:
    """Forwards each model response's reasoning text to a callback."""

    def __init__(self, inner: Transport, task: TaskSpec,
                 on_reasoning: Callable[[str], None]):
        self.inner = inner
        self.task = task
        self.on_reasoning = on_reasoning

    def send(self, cfg, payload: dict) -> dict:
        body = self.inner.send(cfg, payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return body
        try:
            text = parse_response(self.task, content).reasoning
        except Exception:
            text = content
        if text:
            self.on_reasoning(text)
        return body


class RunManager:
    """Registry and executor for task runs, backed by the file store."""

    def __init__(self, store: FileStore, *,
                 clusters: TypeClusterTable | None = None,
                 max_parallel_llm: int = 4):
        self.store = store
        self.clusters = clusters
        self._registry_lock = threading.Lock()
        self._docs: dict[str, dict] = {}
        self._doc_locks: dict[str, threading.Lock] = {}
        self._apply_locks: dict[str, threading.Lock] = {}
        self._inflight: dict[str, tuple[str, str, str]] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._llm_slots = threading.BoundedSemaphore(max_parallel_llm)
        self._recover()

    def _recover(self) -> None:
        """Load persisted runs; in-flight ones cannot resume and fail closed."""
        for run_id in self.store.list_runs():
            doc = self.store.load_run(run_id)
            if doc is None:
                continue
            if doc.get("state") not in TERMINAL_STATES:
                doc["state"] = RunStatus.TransportFailed.value
                doc["error"] = "interrupted by server restart"
                doc["finished_at"] = _now()
                self.store.save_run(doc)
            self._docs[run_id] = doc
            self._doc_locks[run_id] = threading.Lock()
            self._apply_locks[run_id] = threading.Lock()

    # ------------------------------------------------------------------

    def get(self, run_id: str) -> dict:
        with self._registry_lock:
            doc = self._docs.get(run_id)
            if doc is None:
                raise UnknownRun(run_id)
            lock = self._doc_locks[run_id]
        with lock:
            return dict(doc)

    def apply_lock(self, run_id: str) -> threading.Lock:
        with self._registry_lock:
            if run_id not in self._docs:
                raise UnknownRun(run_id)
            return self._apply_locks[run_id]

    def wait(self, run_id: str, timeout: float = 30.0) -> dict:
        """Block until the run's executor thread exits (tests, shutdown)."""
        with self._registry_lock:
            thread = self._threads.get(run_id)
        if thread is not None:
            thread.join(timeout)
        return self.get(run_id)

    def launch(self, project_id: str, graph: CallGraph, target: str,
               task: TaskSpec, cfg: LlmConfig,
               transport: Transport | None,
               ctxcfg: ContextConfig = ContextConfig()) -> dict:
        """Create a Queued run and start executing it on a worker thread."""
        key = (project_id, target, task.tag)
        with self._registry_lock:
            if key in self._inflight.values():
                raise DuplicateRun(
                    f"a {task.tag} run for {target} is already in flight")
            run_id = "r-" + secrets.token_hex(6)
            doc = {
                "schema": RUN_SCHEMA,
                "id": run_id,
                "project": project_id,
                "target": target,
                "task": task.tag,
                "model": {"endpoint": cfg.endpoint, "model": cfg.model},
                "state": QUEUED,
                "created_at": _now(),
                "finished_at": None,
                "reasoning": "",
                "attempts": [],
                "payload": None,
                "items": [],
                "validation": None,
                "error": "",
            }
            self._docs[run_id] = doc
            self._doc_locks[run_id] = threading.Lock()
            self._apply_locks[run_id] = threading.Lock()
            self._inflight[run_id] = key
        self.store.save_run(doc)
        thread = threading.Thread(
            target=self._execute,
            args=(run_id, graph, target, task, cfg, transport, ctxcfg),
            daemon=True, name=f"run-{run_id}")
        with self._registry_lock:
            self._threads[run_id] = thread
        thread.start()
        return dict(doc)

    # ------------------------------------------------------------------

    def _update(self, run_id: str, **fields) -> None:
        with self._registry_lock:
            doc = self._docs[run_id]
            lock = self._doc_locks[run_id]
        with lock:
            if doc["state"] in TERMINAL_STATES:
                return
            doc.update(fields)
            snapshot = dict(doc)
        self.store.save_run(snapshot)

    def _append_reasoning(self, run_id: str, text: str) -> None:
        with self._registry_lock:
            doc = self._docs[run_id]
            lock = self._doc_locks[run_id]
        with lock:
            if doc["state"] in TERMINAL_STATES:
                return
            doc["reasoning"] += text if not doc["reasoning"] else "\n\n" + text
            snapshot = dict(doc)
        self.store.save_run(snapshot)

    def _execute(self, run_id: str, graph: CallGraph, target: str,
                 task: TaskSpec, cfg: LlmConfig,
                 transport: Transport | None,
                 ctxcfg: ContextConfig) -> None:
        try:
            self._update(run_id, state=RUNNING)
            relay = _RelayTransport(
                transport if transport is not None else HttpTransport(),
                task, lambda text: self._append_reasoning(run_id, text))
            with self._llm_slots:
                run = run_task(graph, target, task, cfg, ctxcfg=ctxcfg,
                               transport=relay, clusters=self.clusters)
            self._finalize(run_id, graph, target, run)
        except Exception as exc:  # executor thread must never die silently
            self._finalize_error(run_id, f"{type(exc).__name__}: {exc}")
        finally:
            with self._registry_lock:
                self._inflight.pop(run_id, None)
                self._threads.pop(run_id, None)

    def _displayable_payload(self, run: TaskRun) -> dict | None:
        """The payload worth showing: the applied one, else the last
        attempt that parsed and passed the schema (its semantic
        violations are then attributed per item)."""
        if run.final is not None:
            return run.final.payload
        for attempt in reversed(run.attempts):
            try:
                return parse_response(run.task, attempt.raw).payload
            except Exception:
                continue
        return None

    def _finalize(self, run_id: str, graph: CallGraph, target: str,
                  run: TaskRun) -> None:
        payload = self._displayable_payload(run)
        items = []
        if payload is not None:
            items = derive_items(run.task, payload, graph.function(target),
                                 self.clusters)
        with self._registry_lock:
            doc = self._docs[run_id]
            lock = self._doc_locks[run_id]
        with lock:
            if doc["state"] in TERMINAL_STATES:
                return
            doc.update(
                state=run.status.value,
                finished_at=_now(),
                attempts=[a.to_json() for a in run.attempts],
                payload=payload,
                items=[item.to_json() for item in items],
                error=run.error,
            )
            snapshot = dict(doc)
        self.store.save_run(snapshot)

    def _finalize_error(self, run_id: str, message: str) -> None:
        self._update(run_id, state=RunStatus.TransportFailed.value,
                     finished_at=_now(), error=message)
        # _update refuses transitions out of terminal states, so a run
        # that already finalized keeps its original outcome.
