"""HTTP service: projects, context previews, task runs, apply, reports.

Every response body carries a ``schema`` field naming its versioned
shape; errors share one shape (``error.v1``).  Run progress streams as
line-delimited JSON events (``application/x-ndjson``): a ``snapshot``
event first, then ``reasoning`` deltas and ``state`` changes as they
happen, and a final ``done`` event with the terminal record.  Clients
that cannot consume streams poll ``GET /runs/{id}`` instead; the
reasoning field only ever grows, so polls observe a monotonic prefix.
"""

from __future__ import annotations

import asyncio
import json
import secrets
import threading
from datetime import datetime, timezone
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from ..bench.clusters import TypeClusterTable
from ..bench.runner import (BenchConfig, DatasetError, LiveAdapter,
                            ReplayAdapter, run_benchmark)
from ..cgraph import (CallGraph, ContextConfig, UnknownFunction,
                      collect_context, informative_score, select_context)
from ..dflow import annotate_many, reached_functions, trace_all
from ..llmgate import LlmConfig, Transport
from ..promptkit import TASK_TAGS, UnknownTask, task_for
from ..pseudoc import (DuplicateFunction, EmptyDump, is_placeholder_name,
                       parse_dump)
from .mockmodel import MockTransport
from .overlay import Overlay, render_with_overlay
from .runs import DuplicateRun, RunManager, UnknownRun
from .store import FileStore

API_VERSION = "1"

#: Default endpoint/model used when a run request names none: the
#: deterministic built-in mock, so a fresh install works offline.
DEFAULT_MODEL = "mock"
DEFAULT_ENDPOINT = "mock://internal"


class ApiError(Exception):
    """An error with a stable code, rendered as an ``error.v1`` body."""

    def __init__(self, status: int, code: str, detail: str, **extra):
        self.status = status
        self.code = code
        self.detail = detail
        self.extra = extra
        super().__init__(detail)

    def body(self) -> dict:
        return {"schema": "error.v1",
                "error": {"code": self.code, "detail": self.detail,
                          **self.extra}}


def default_transport_factory(model: str) -> Transport | None:
    """Models named ``mock*`` get the built-in deterministic transport;
    anything else goes over HTTP."""
    if model.startswith("mock"):
        return MockTransport()
    return None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ProjectState:
    """One loaded project: parsed dump, call graph, overlay, writer lock."""

    def __init__(self, doc: dict, graph: CallGraph, overlay: Overlay,
                 audit_seq: int):
        self.doc = doc
        self.graph = graph
        self.overlay = overlay
        self.audit_seq = audit_seq
        self.writer_lock = threading.Lock()


def _context_config(depth: int | None, depth_callee: int | None,
                    depth_caller: int | None, k: int | None) -> ContextConfig:
    base = ContextConfig()
    callee = depth_callee if depth_callee is not None else (
        depth if depth is not None else base.depth_callee)
    caller = depth_caller if depth_caller is not None else (
        depth if depth is not None else base.depth_caller)
    kk = k if k is not None else base.k
    if callee < 0 or caller < 0 or kk < 0:
        raise ApiError(400, "InvalidParameter",
                       "depth and k must be non-negative")
    return ContextConfig(depth_callee=callee, depth_caller=caller, k=kk)


def create_app(store_dir, *,
               transport_factory: Callable[[str], Transport | None] = default_transport_factory,
               clusters: TypeClusterTable | None = None,
               max_parallel_llm: int = 4) -> FastAPI:
    """Build the service over one state directory.

    Restarting with the same directory reloads every project (dumps are
    re-parsed, overlays replayed from the audit log) and every run;
    terminal run records come back byte-identical, in-flight ones are
    marked failed because their worker died with the old process.
    """
    store = FileStore(store_dir)
    clusters = clusters or TypeClusterTable()
    manager = RunManager(store, clusters=clusters,
                         max_parallel_llm=max_parallel_llm)
    projects: dict[str, ProjectState] = {}
    projects_lock = threading.Lock()

    for pid in store.list_projects():
        doc = store.load_project(pid)
        if doc is None:
            continue
        try:
            dump = parse_dump(doc["dump_text"])
        except Exception:
            continue
        events = store.read_audit(pid)
        projects[pid] = ProjectState(doc, CallGraph(dump),
                                     Overlay.from_audit(events), len(events))

    app = FastAPI(title="binsight", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.manager = manager
    app.state.store = store
    app.state.projects = projects

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body())

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content=ApiError(400, "InvalidBody", str(exc)).body())

    def _project(pid: str) -> ProjectState:
        with projects_lock:
            state = projects.get(pid)
        if state is None:
            raise ApiError(404, "UnknownProject", f"no project {pid!r}")
        return state

    def _function(state: ProjectState, name: str):
        try:
            return state.graph.function(name)
        except UnknownFunction:
            raise ApiError(
                404, "UnknownFunction",
                f"no function {name!r} in project {state.doc['id']}")

    def _run_doc(run_id: str) -> dict:
        try:
            return manager.get(run_id)
        except UnknownRun:
            raise ApiError(404, "UnknownRun", f"no run {run_id!r}")

    def _project_body(state: ProjectState) -> dict:
        doc = state.doc
        return {
            "schema": "project.v1",
            "id": doc["id"],
            "name": doc["name"],
            "created_at": doc["created_at"],
            "functions": len(state.graph.nodes),
            "externals": sorted(state.graph.externals),
            "parse_failures": sorted(
                (name, str(exc)) for name, exc in state.graph.failures.items()),
            "rejects": [{"line": line, "reason": reason}
                        for line, reason in state.graph.dump.rejects],
        }

    # -- service ----------------------------------------------------------

    @app.get("/")
    def server_info() -> dict:
        return {
            "schema": "server_info.v1",
            "service": "binsight",
            "api_version": API_VERSION,
            "tasks": list(TASK_TAGS),
            "stream": {
                "media_type": "application/x-ndjson",
                "events": ["snapshot", "reasoning", "state", "done"],
                "fallback": "poll GET /runs/{id}; reasoning grows monotonically",
            },
        }

    # -- projects ---------------------------------------------------------

    @app.post("/projects", status_code=201)
    def create_project(body: dict) -> dict:
        dump_text = body.get("dump")
        if not isinstance(dump_text, str):
            raise ApiError(400, "InvalidBody",
                           "body must carry the dump text in 'dump'")
        try:
            dump = parse_dump(dump_text)
        except EmptyDump as exc:
            raise ApiError(400, "EmptyDump", str(exc), rejects=[
                {"line": line, "reason": reason}
                for line, reason in exc.rejects])
        except DuplicateFunction as exc:
            raise ApiError(400, "DuplicateFunction", str(exc),
                           address=exc.address)
        pid = "p-" + secrets.token_hex(6)
        name = body.get("name") if isinstance(body.get("name"), str) else pid
        doc = {"schema": "project.v1", "id": pid, "name": name,
               "created_at": _now(), "dump_text": dump_text}
        state = ProjectState(doc, CallGraph(dump), Overlay(), 0)
        store.save_project(doc)
        with projects_lock:
            projects[pid] = state
        return _project_body(state)

    @app.get("/projects")
    def list_projects() -> dict:
        with projects_lock:
            states = sorted(projects.values(), key=lambda s: s.doc["id"])
        return {"schema": "project_list.v1",
                "projects": [_project_body(s) for s in states]}

    @app.get("/projects/{pid}")
    def get_project(pid: str) -> dict:
        return _project_body(_project(pid))

    @app.get("/projects/{pid}/functions")
    def list_functions(pid: str) -> dict:
        state = _project(pid)
        graph = state.graph
        with state.writer_lock:
            overlay = state.overlay
        fn_renames = overlay.function_renames()
        rows = []
        for name, fn in graph.nodes.items():
            rows.append({
                "name": name,
                "display_name": fn_renames.get(name, name),
                "address": fn.record.address,
                "line_count": fn.line_count,
                "score": round(informative_score(fn, graph), 6),
                "placeholder": is_placeholder_name(name),
                "external": False,
            })
        rows.sort(key=lambda r: r["address"])
        return {"schema": "function_list.v1", "project": pid,
                "functions": rows,
                "externals": sorted(graph.externals),
                "overlay": overlay.to_json()}

    @app.get("/projects/{pid}/functions/{fname}")
    def get_function(pid: str, fname: str) -> dict:
        state = _project(pid)
        fn = _function(state, fname)
        with state.writer_lock:
            overlay = state.overlay
        local = overlay.local_renames(fname)
        fn_renames = overlay.function_renames()
        raw = fn.record.pseudocode
        return {
            "schema": "function.v1",
            "project": pid,
            "name": fname,
            "display_name": fn_renames.get(fname, fname),
            "address": fn.record.address,
            "line_count": fn.line_count,
            "placeholder": is_placeholder_name(fname),
            "text": render_with_overlay(raw, local, fn_renames),
            "raw_text": raw,
            "callees": sorted(state.graph.callees(fname)),
            "callers": sorted(state.graph.callers(fname)),
            "renames": overlay.to_json().get(fname, {}),
            "new_types": overlay.new_types(fname),
        }

    # -- context preview --------------------------------------------------

    @app.get("/projects/{pid}/functions/{fname}/context")
    def preview_context(pid: str, fname: str, depth: int | None = None,
                        depth_callee: int | None = None,
                        depth_caller: int | None = None,
                        k: int | None = None) -> dict:
        state = _project(pid)
        _function(state, fname)
        ctxcfg = _context_config(depth, depth_callee, depth_caller, k)
        graph = state.graph
        traces = trace_all(graph, fname, ctxcfg)
        sel = collect_context(graph, fname, ctxcfg)
        sel = select_context(sel, ctxcfg, reached_functions(traces, fname))
        context_names = [n for n in sel.selected
                         if n != fname and n in graph.nodes]
        functions = [graph.nodes[fname]] + [graph.nodes[n]
                                            for n in context_names]
        annotated = annotate_many(functions, traces)
        with state.writer_lock:
            overlay = state.overlay
        fn_renames = overlay.function_renames()
        texts = [{
            "name": fn.name,
            "role": "target" if fn.name == fname else "context",
            "text": render_with_overlay(annotated[fn.name],
                                        overlay.local_renames(fn.name),
                                        fn_renames),
        } for fn in functions]
        return {
            "schema": "context.v1",
            "project": pid,
            "target": fname,
            "config": {"depth_callee": ctxcfg.depth_callee,
                       "depth_caller": ctxcfg.depth_caller, "k": ctxcfg.k},
            "selection": sel.to_json(),
            "functions": texts,
            "dataflow": [t.to_json() for t in traces],
        }

    # -- runs -------------------------------------------------------------

    @app.post("/projects/{pid}/functions/{fname}/runs", status_code=201)
    def launch_run(pid: str, fname: str, body: dict) -> dict:
        state = _project(pid)
        _function(state, fname)
        tag = body.get("task")
        if not isinstance(tag, str):
            raise ApiError(400, "InvalidBody",
                           "body must name the task tag in 'task'")
        try:
            task = task_for(tag)
        except UnknownTask as exc:
            raise ApiError(400, "UnknownTask", str(exc))
        model = body.get("model", DEFAULT_MODEL)
        if not isinstance(model, str) or not model:
            raise ApiError(400, "InvalidBody", "'model' must be a name")
        endpoint = body.get("endpoint", DEFAULT_ENDPOINT)
        max_retries = body.get("max_retries", 3)
        if not isinstance(max_retries, int) or max_retries < 0:
            raise ApiError(400, "InvalidBody",
                           "'max_retries' must be a non-negative integer")
        cfg = LlmConfig(endpoint=endpoint, model=model,
                        max_retries=max_retries)
        ctxcfg = _context_config(body.get("depth"), body.get("depth_callee"),
                                 body.get("depth_caller"), body.get("k"))
        try:
            doc = manager.launch(pid, state.graph, fname, task, cfg,
                                 transport_factory(model), ctxcfg)
        except DuplicateRun as exc:
            raise ApiError(409, "DuplicateRun", str(exc))
        return doc

    @app.get("/runs/{run_id}")
    def get_run(run_id: str) -> dict:
        return _run_doc(run_id)

    @app.get("/runs/{run_id}/stream")
    async def stream_run(run_id: str) -> StreamingResponse:
        _run_doc(run_id)

        async def events():
            def line(event: dict) -> str:
                return json.dumps(event, ensure_ascii=False) + "\n"

            doc = _run_doc(run_id)
            yield line({"event": "snapshot", "run": doc})
            seen_reasoning = doc["reasoning"]
            seen_state = doc["state"]
            while doc["state"] not in ("Applied", "ExhaustedRetries",
                                       "TransportFailed"):
                await asyncio.sleep(0.025)
                doc = _run_doc(run_id)
                if doc["reasoning"] != seen_reasoning:
                    yield line({"event": "reasoning",
                                "delta": doc["reasoning"][len(seen_reasoning):]})
                    seen_reasoning = doc["reasoning"]
                if doc["state"] != seen_state:
                    yield line({"event": "state", "state": doc["state"]})
                    seen_state = doc["state"]
            yield line({"event": "done", "run": doc})

        return StreamingResponse(events(), media_type="application/x-ndjson")

    @app.post("/runs/{run_id}/apply")
    def apply_run(run_id: str, body: dict) -> dict:
        doc = _run_doc(run_id)
        accept = body.get("accept")
        if not isinstance(accept, list) or not all(
                isinstance(i, int) for i in accept):
            raise ApiError(400, "InvalidBody",
                           "'accept' must be a list of item indexes")
        if doc["state"] != "Applied":
            raise ApiError(
                409, "RunNotApplied",
                f"run {run_id} is {doc['state']}; only Applied runs apply")
        state = _project(doc["project"])
        items_by_index = {item["index"]: item for item in doc["items"]}
        chosen = []
        for index in accept:
            item = items_by_index.get(index)
            if item is None:
                raise ApiError(400, "UnknownItem",
                               f"run has no item {index}")
            if not item["ok"]:
                raise ApiError(400, "InvalidItem",
                               f"item {index} failed validation",
                               violations=item["violations"])
            chosen.append(item)
        lock = manager.apply_lock(run_id)
        if not lock.acquire(blocking=False):
            raise ApiError(409, "ConcurrentApply",
                           f"another apply for run {run_id} is in progress")
        try:
            overlay_items = [{
                "kind": item["kind"], "function": item["function"],
                "old": item["old"], "new_name": item["new_name"],
                "new_type": item["new_type"]} for item in chosen]
            with state.writer_lock:
                state.audit_seq += 1
                event = {"schema": "audit.v1", "seq": state.audit_seq,
                         "run_id": run_id, "created_at": _now(),
                         "items": overlay_items}
                store.append_audit(doc["project"], event)
                state.overlay = state.overlay.with_items(overlay_items)
                overlay = state.overlay
        finally:
            lock.release()
        return {"schema": "apply_result.v1", "run": run_id,
                "project": doc["project"], "audit_seq": event["seq"],
                "applied": overlay_items, "overlay": overlay.to_json()}

    # -- reports ----------------------------------------------------------

    @app.post("/reports", status_code=201)
    def create_report(body: dict) -> dict:
        dataset_dir = body.get("dataset_dir")
        if not isinstance(dataset_dir, str):
            raise ApiError(400, "InvalidBody",
                           "body must name 'dataset_dir'")
        kind = body.get("adapter", "replay")
        tasks = body.get("tasks")
        if tasks is not None and not (
                isinstance(tasks, list)
                and all(isinstance(t, str) for t in tasks)):
            raise ApiError(400, "InvalidBody",
                           "'tasks' must be a list of task tags")
        if kind == "replay":
            adapter = ReplayAdapter(clusters=clusters)
        elif kind == "live":
            model = body.get("model", DEFAULT_MODEL)
            cfg = LlmConfig(endpoint=body.get("endpoint", DEFAULT_ENDPOINT),
                            model=model)
            adapter = LiveAdapter(cfg=cfg, transport=transport_factory(model),
                                  clusters=clusters)
        else:
            raise ApiError(400, "UnknownAdapter",
                           f"adapter must be 'replay' or 'live', not {kind!r}")
        bench_cfg = BenchConfig(clusters=clusters,
                                metadata={"adapter": kind,
                                          "dataset_dir": dataset_dir},
                                **({"tasks": tuple(tasks)} if tasks else {}))
        try:
            report = run_benchmark(dataset_dir, adapter, bench_cfg)
        except DatasetError as exc:
            raise ApiError(400, "DatasetError", str(exc))
        report_id = "b-" + secrets.token_hex(6)
        doc = {"schema": "report.v1", "id": report_id, "created_at": _now(),
               "report": report.to_json()}
        store.save_report(doc)
        return doc

    @app.get("/reports/{report_id}")
    def get_report(report_id: str) -> dict:
        doc = store.load_report(report_id)
        if doc is None:
            raise ApiError(404, "UnknownReport", f"no report {report_id!r}")
        return doc

    @app.get("/reports")
    def list_reports() -> dict:
        return {"schema": "report_list.v1", "reports": store.list_reports()}

    return app
