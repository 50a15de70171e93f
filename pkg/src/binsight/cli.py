"""Command-line interface over the analysis library.

Subcommands mirror the library modules: ``ctx`` (context selection),
``trace`` (variable data flow), ``run`` (one model task), ``bench run``
(benchmark a dataset), ``corpus`` (sanitize/dedup/render/mix), ``synth
sft`` (reasoning-trace synthesis), and ``serve`` (the HTTP service).

Exit codes: 0 on success; 1 when the operation ran but the outcome was
negative (a model run that could not be applied); 2 on bad input —
missing files, malformed dumps, unknown functions, variables, or tasks.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench.clusters import TypeClusterTable
from .bench.runner import (BenchConfig, DatasetError, LiveAdapter,
                           ReplayAdapter, run_benchmark)
from .cgraph import (CallGraph, ContextConfig, UnknownFunction,
                     collect_context, select_context)
from .corpus import (DedupParams, MissingSegment, SanitizePolicy, load_corpus,
                     minhash_dedup, mix_plan, render_pretrain_sample, sanitize)
from .dflow import annotate, reached_functions, trace_all, trace_variable
from .llmgate import LlmConfig, RunStatus, load_config, run_task
from .promptkit import TASK_TAGS, UnknownTask, task_for
from .pseudoc import DumpError, parse_dump
from .synth import (CotMode, SynthError, default_guide, load_guide,
                    load_raw_records, synthesize)


class CliError(Exception):
    """Bad input; rendered as one stderr line, exit code 2."""


def _print_json(doc, out: str | None = None) -> None:
    text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    if out and out != "-":
        Path(out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)


def _load_graph(dump_path: str) -> CallGraph:
    path = Path(dump_path)
    if not path.is_file():
        raise CliError(f"no such dump file: {path}")
    try:
        return CallGraph(parse_dump(path))
    except DumpError as exc:
        raise CliError(f"{path}: {exc}")


def _context_config(args) -> ContextConfig:
    base = ContextConfig()
    depth = getattr(args, "depth", None)
    callee = getattr(args, "depth_callee", None)
    caller = getattr(args, "depth_caller", None)
    cfg = ContextConfig(
        depth_callee=callee if callee is not None else (
            depth if depth is not None else base.depth_callee),
        depth_caller=caller if caller is not None else (
            depth if depth is not None else base.depth_caller),
        k=args.k if getattr(args, "k", None) is not None else base.k,
        beta=args.beta if getattr(args, "beta", None) is not None else base.beta,
    )
    if cfg.depth_callee < 0 or cfg.depth_caller < 0 or cfg.k < 0:
        raise CliError("depth and k must be non-negative")
    return cfg


def _task(tag: str):
    try:
        return task_for(tag)
    except UnknownTask:
        raise CliError(f"unknown task {tag!r}; expected one of: "
                       + " ".join(TASK_TAGS))


def _model_config(args) -> tuple[LlmConfig, object | None]:
    """(config, transport) from --model-config / --mock."""
    if getattr(args, "mock", False):
        from .server.mockmodel import MockTransport
        return LlmConfig(endpoint="mock://local", model="mock"), MockTransport()
    if getattr(args, "model_config", None):
        path = Path(args.model_config)
        if not path.is_file():
            raise CliError(f"no such model config: {path}")
        return load_config(path), None
    raise CliError("a model is required: pass --model-config cfg.toml "
                   "or --mock for the built-in offline model")


def _add_context_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--depth", type=int, default=None,
                        help="call-graph depth in both directions")
    parser.add_argument("--depth-callee", type=int, default=None)
    parser.add_argument("--depth-caller", type=int, default=None)
    parser.add_argument("--k", type=int, default=None,
                        help="max context functions to select")
    parser.add_argument("--beta", type=float, default=None,
                        help="string-density weight in the candidate score")


# -- ctx -------------------------------------------------------------------


def cmd_ctx(args) -> int:
    graph = _load_graph(args.dump)
    cfg = _context_config(args)
    try:
        traces = trace_all(graph, args.target, cfg)
        sel = collect_context(graph, args.target, cfg)
    except UnknownFunction as exc:
        raise CliError(str(exc))
    sel = select_context(sel, cfg, reached_functions(traces, args.target))
    if args.json:
        _print_json(sel.to_json(), args.out)
        return 0
    doc = sel.to_json()
    print(f"target {doc['target']}")
    for chain in doc["chains"]:
        print(f"  chain [{chain['direction']}] " + " -> ".join(chain["nodes"]))
    print("candidates:")
    for cand in sorted(doc["candidates"],
                       key=lambda c: (-c["dataflow_priority"], -c["score"],
                                      c["depth"], c["name"])):
        flag = " dataflow" if cand["dataflow_priority"] else ""
        print(f"  {cand['name']}  depth={cand['depth']} "
              f"score={cand['score']:.3f}{flag}")
    print("selected (emission order): " + " ".join(doc["selected"]))
    return 0


# -- trace -----------------------------------------------------------------


def cmd_trace(args) -> int:
    graph = _load_graph(args.dump)
    cfg = _context_config(args)
    try:
        target_fn = graph.function(args.target)
    except UnknownFunction as exc:
        raise CliError(str(exc))
    if args.var not in target_fn.var_names():
        raise CliError(f"{args.target} has no variable {args.var!r}")
    report = trace_variable(graph, args.target, args.var, cfg)
    names = [args.target] + sorted({rec.function for rec in report.usages
                                    if rec.function != args.target})
    functions = [graph.nodes[n] for n in names if n in graph.nodes]
    annotated = annotate(functions, report)
    if args.json:
        _print_json({"annotated": annotated, "report": report.to_json()},
                    args.out)
        return 0
    for name in names:
        if name in annotated:
            print(f"// {name}")
            print(annotated[name].rstrip("\n"))
            print()
    _print_json(report.to_json(), args.out)
    return 0


# -- run -------------------------------------------------------------------


def cmd_run(args) -> int:
    graph = _load_graph(args.dump)
    task = _task(args.task)
    cfg, transport = _model_config(args)
    ctxcfg = _context_config(args)
    try:
        graph.function(args.target)
    except UnknownFunction as exc:
        raise CliError(str(exc))
    run = run_task(graph, args.target, task, cfg, ctxcfg=ctxcfg,
                   transport=transport, clusters=TypeClusterTable(),
                   super_thought=args.super_thought)
    _print_json(run.to_json(), args.out)
    return 0 if run.status is RunStatus.Applied else 1


# -- bench -----------------------------------------------------------------


def cmd_bench_run(args) -> int:
    clusters = TypeClusterTable()
    if args.adapter == "replay":
        adapter = ReplayAdapter(clusters=clusters)
    else:
        cfg, transport = _model_config(args)
        adapter = LiveAdapter(cfg=cfg, transport=transport, clusters=clusters)
    tasks = tuple(t.strip() for t in args.tasks.split(",")) if args.tasks else None
    for tag in tasks or ():
        _task(tag)
    bench_cfg = BenchConfig(clusters=clusters,
                            metadata={"adapter": args.adapter},
                            **({"tasks": tasks} if tasks else {}))
    try:
        report = run_benchmark(args.dataset, adapter, bench_cfg)
    except DatasetError as exc:
        raise CliError(str(exc))
    _print_json(report.to_json(), args.out)
    print(f"success ratio {report.success_ratio:.4f} over "
          f"{len(report.rows)} runs", file=sys.stderr)
    return 0


# -- corpus ----------------------------------------------------------------


def _write_jsonl(path: str, docs) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")


def _load_corpus(path: str):
    if not Path(path).is_file():
        raise CliError(f"no such corpus file: {path}")
    try:
        return load_corpus(path)
    except ValueError as exc:
        raise CliError(str(exc))


def cmd_corpus_sanitize(args) -> int:
    records = _load_corpus(args.inp)
    policy = SanitizePolicy(
        min_lines=args.min_lines, max_lines=args.max_lines,
        drop_thunks=not args.keep_thunks,
        require_source=args.require_source)
    result = sanitize(records, policy)
    _write_jsonl(args.out, (r.to_json() for r in result.kept))
    audit = args.audit or args.out + ".audit.jsonl"
    _write_jsonl(audit, (
        {"name": rec.name, "project": rec.project, "binary": rec.binary,
         "address": rec.address, "reason": reason.value}
        for rec, reason in result.dropped))
    reasons: dict[str, int] = {}
    for _, reason in result.dropped:
        reasons[reason.value] = reasons.get(reason.value, 0) + 1
    _print_json({"kept": len(result.kept), "dropped": len(result.dropped),
                 "reasons": reasons, "audit": audit})
    return 0


def cmd_corpus_dedup(args) -> int:
    records = _load_corpus(args.inp)
    params = DedupParams(
        shingle_size=args.shingle_size, num_hashes=args.num_hashes,
        jaccard_threshold=args.threshold, lsh_bands=args.bands,
        lsh_rows=args.rows, seed=args.seed)
    result = minhash_dedup(records, params)
    _write_jsonl(args.out, (r.to_json() for r in result.kept))
    audit = args.audit or args.out + ".audit.jsonl"
    _write_jsonl(audit, (
        {"kept": cluster[0].name,
         "members": [{"name": r.name, "address": r.address}
                     for r in cluster]}
        for cluster in result.duplicate_clusters))
    _print_json({"kept": len(result.kept),
                 "dropped": len(records) - len(result.kept),
                 "clusters": len(result.duplicate_clusters),
                 "audit": audit})
    return 0


def cmd_corpus_render(args) -> int:
    records = _load_corpus(args.inp)
    docs = []
    for record in records:
        try:
            sample = render_pretrain_sample(record, args.seed)
        except MissingSegment as exc:
            raise CliError(str(exc))
        docs.append({"name": record.name, "address": record.address,
                     "order": list(sample.order),
                     "rendered": sample.rendered})
    if args.out and args.out != "-":
        _write_jsonl(args.out, docs)
        _print_json({"rendered": len(docs), "out": args.out})
    else:
        for doc in docs:
            sys.stdout.write(json.dumps(doc, ensure_ascii=False) + "\n")
    return 0


def _parse_mapping(text: str, what: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise CliError(f"bad {what} entry {part!r}; expected name=count")
        try:
            out[key.strip()] = int(value)
        except ValueError:
            raise CliError(f"bad {what} count {value!r} for {key.strip()!r}")
    if not out:
        raise CliError(f"empty {what}")
    return out


def cmd_corpus_mix(args) -> int:
    available = _parse_mapping(args.available, "--available")
    kwargs = {}
    if args.ratio:
        kwargs["ratio"] = _parse_mapping(args.ratio, "--ratio")
    try:
        plan = mix_plan(available, args.total, **kwargs)
    except ValueError as exc:
        raise CliError(str(exc))
    _print_json({"plan": plan, "total": sum(plan.values()),
                 "requested": args.total})
    return 0


# -- synth -----------------------------------------------------------------


def cmd_synth_sft(args) -> int:
    if not Path(args.raw).is_file():
        raise CliError(f"no such raw file: {args.raw}")
    try:
        records = load_raw_records(args.raw)
    except ValueError as exc:
        raise CliError(str(exc))
    if not records:
        raise CliError(f"{args.raw}: no raw records")
    cfg, transport = _model_config(args)
    if args.guide:
        if not Path(args.guide).is_file():
            raise CliError(f"no such guide: {args.guide}")
        guide = load_guide(args.guide)
    else:
        guide = default_guide(records[0].task)
    try:
        stats = synthesize(records, guide, cfg, args.out,
                           mode=CotMode(args.mode), transport=transport,
                           max_attempts=args.max_attempts,
                           shard_size=args.shard_size, workers=args.workers)
    except SynthError as exc:
        raise CliError(str(exc))
    _print_json(stats.to_json())
    return 0


# -- serve -----------------------------------------------------------------


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(args.state, max_parallel_llm=args.max_parallel)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level)
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="binsight",
        description="Decompilation-assistant toolkit: context selection, "
                    "data-flow tracing, model tasks, benchmarking, corpus "
                    "hygiene, reasoning-data synthesis, and an HTTP service.")
    sub = parser.add_subparsers(dest="command", required=True)

    ctx = sub.add_parser("ctx", help="select context functions for a target")
    ctx.add_argument("--dump", required=True)
    ctx.add_argument("--target", required=True)
    _add_context_flags(ctx)
    ctx.add_argument("--json", action="store_true",
                     help="emit the selection as JSON")
    ctx.add_argument("--out", default=None, help="write JSON here instead of stdout")
    ctx.set_defaults(func=cmd_ctx)

    trace = sub.add_parser("trace", help="trace one variable's data flow")
    trace.add_argument("--dump", required=True)
    trace.add_argument("--target", required=True)
    trace.add_argument("--var", required=True)
    _add_context_flags(trace)
    trace.add_argument("--json", action="store_true",
                       help="emit annotated texts and the report as one JSON doc")
    trace.add_argument("--out", default=None)
    trace.set_defaults(func=cmd_trace)

    run = sub.add_parser("run", help="run one analysis task against a target")
    run.add_argument("--dump", required=True)
    run.add_argument("--target", required=True)
    run.add_argument("--task", required=True,
                     help="task tag, e.g. '<funcname>' or '<var:v3>'")
    run.add_argument("--model-config", default=None,
                     help="TOML file with endpoint/model settings")
    run.add_argument("--mock", action="store_true",
                     help="use the built-in deterministic offline model")
    run.add_argument("--super-thought", action="store_true",
                     help="ask for step-structured reasoning")
    _add_context_flags(run)
    run.add_argument("--out", default=None)
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="benchmark a dataset")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    brun = bench_sub.add_parser("run", help="run the benchmark")
    brun.add_argument("--dataset", required=True)
    brun.add_argument("--adapter", choices=("live", "replay"),
                      default="replay")
    brun.add_argument("--model-config", default=None)
    brun.add_argument("--mock", action="store_true")
    brun.add_argument("--tasks", default=None,
                      help="comma-separated task tags (default: standard set)")
    brun.add_argument("--out", default=None, help="write the report JSON here")
    brun.set_defaults(func=cmd_bench_run)

    corpus = sub.add_parser("corpus", help="corpus hygiene utilities")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)

    csan = corpus_sub.add_parser("sanitize", help="drop unusable records")
    csan.add_argument("--in", dest="inp", required=True)
    csan.add_argument("--out", required=True)
    csan.add_argument("--audit", default=None,
                      help="dropped-record log (default: <out>.audit.jsonl)")
    defaults = SanitizePolicy()
    csan.add_argument("--min-lines", type=int, default=defaults.min_lines)
    csan.add_argument("--max-lines", type=int, default=defaults.max_lines)
    csan.add_argument("--keep-thunks", action="store_true")
    csan.add_argument("--require-source", action="store_true")
    csan.set_defaults(func=cmd_corpus_sanitize)

    cdd = corpus_sub.add_parser("dedup", help="drop near-duplicate records")
    cdd.add_argument("--in", dest="inp", required=True)
    cdd.add_argument("--out", required=True)
    cdd.add_argument("--audit", default=None)
    dparams = DedupParams()
    cdd.add_argument("--shingle-size", type=int, default=dparams.shingle_size)
    cdd.add_argument("--num-hashes", type=int, default=dparams.num_hashes)
    cdd.add_argument("--threshold", type=float,
                     default=dparams.jaccard_threshold)
    cdd.add_argument("--bands", type=int, default=dparams.lsh_bands)
    cdd.add_argument("--rows", type=int, default=dparams.lsh_rows)
    cdd.add_argument("--seed", type=int, default=dparams.seed)
    cdd.set_defaults(func=cmd_corpus_dedup)

    crender = corpus_sub.add_parser(
        "render", help="render three-segment pretraining samples")
    crender.add_argument("--in", dest="inp", required=True)
    crender.add_argument("--out", default=None)
    crender.add_argument("--seed", type=int, default=0)
    crender.set_defaults(func=cmd_corpus_render)

    cmix = corpus_sub.add_parser("mix", help="plan a domain token mixture")
    cmix.add_argument("--available", required=True,
                      help="per-domain availability, e.g. binary=900,code=400,text=150")
    cmix.add_argument("--total", type=int, required=True)
    cmix.add_argument("--ratio", default=None,
                      help="override the default 60:25:15 ratio, same syntax")
    cmix.set_defaults(func=cmd_corpus_mix)

    synth = sub.add_parser("synth", help="synthesize reasoning training data")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    ssft = synth_sub.add_parser("sft", help="build reasoning-trace records")
    ssft.add_argument("--raw", required=True, help="raw ground-truth JSONL")
    ssft.add_argument("--out", required=True, help="shard output directory")
    ssft.add_argument("--mode", choices=("standard", "super"),
                      default="standard")
    ssft.add_argument("--guide", default=None,
                      help="step-guide TOML (default: built-in for the task)")
    ssft.add_argument("--model-config", required=True,
                      help="TOML file with endpoint/model settings")
    ssft.add_argument("--max-attempts", type=int, default=3)
    ssft.add_argument("--shard-size", type=int, default=1000)
    ssft.add_argument("--workers", type=int, default=1)
    ssft.set_defaults(func=cmd_synth_sft)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--state", required=True,
                       help="state directory (created if missing)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8421)
    serve.add_argument("--max-parallel", type=int, default=4,
                       help="cap on concurrent model calls")
    serve.add_argument("--log-level", default="info")
    serve.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"binsight: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
