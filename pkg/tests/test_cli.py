"""Command-line interface tests.

Every test drives ``binsight.cli.main`` with an argv list, asserting on
exit codes, stdout/stderr text, and files the commands write.  The synth
test runs against a scripted local HTTP endpoint so the full transport
path is exercised without a network.
"""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from binsight.cli import main
from binsight.cgraph import CallGraph, ContextConfig, collect_context, \
    select_context
from binsight.dflow import reached_functions, trace_all, trace_variable
from binsight.pseudoc import parse_dump

from test_runner import CASES, write_case
from test_server import xor_dump_text


@pytest.fixture()
def dump_file(tmp_path):
    path = tmp_path / "dump.jsonl"
    path.write_text(xor_dump_text(), "utf-8")
    return str(path)


def run_cli(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


# -- ctx -------------------------------------------------------------------


class TestCtx:
    def test_json_matches_library(self, capsys, dump_file):
        rc, out, _ = run_cli(capsys, "ctx", "--dump", dump_file,
                             "--target", "sub_1909", "--depth", "1",
                             "--k", "10", "--json")
        assert rc == 0
        doc = json.loads(out)
        graph = CallGraph(parse_dump(xor_dump_text()))
        cfg = ContextConfig(depth_callee=1, depth_caller=1, k=10)
        traced = reached_functions(
            trace_all(graph, "sub_1909", cfg), "sub_1909")
        sel = select_context(
            collect_context(graph, "sub_1909", cfg), cfg, traced)
        assert doc == sel.to_json()

    def test_human_output_lists_selection(self, capsys, dump_file):
        rc, out, _ = run_cli(capsys, "ctx", "--dump", dump_file,
                             "--target", "sub_1909")
        assert rc == 0
        assert "target sub_1909" in out
        assert "selected (emission order):" in out
        assert "sub_14F7" in out

    def test_out_file(self, capsys, dump_file, tmp_path):
        dest = tmp_path / "sel.json"
        rc, out, _ = run_cli(capsys, "ctx", "--dump", dump_file,
                             "--target", "sub_1909", "--json",
                             "--out", str(dest))
        assert rc == 0
        assert out == ""
        assert json.loads(dest.read_text())["target"] == "sub_1909"

    def test_unknown_function_exits_2(self, capsys, dump_file):
        rc, _, err = run_cli(capsys, "ctx", "--dump", dump_file,
                             "--target", "nope")
        assert rc == 2
        assert "nope" in err

    def test_missing_dump_exits_2(self, capsys, tmp_path):
        rc, _, err = run_cli(capsys, "ctx", "--dump",
                             str(tmp_path / "absent.jsonl"),
                             "--target", "sub_1909")
        assert rc == 2
        assert "absent.jsonl" in err

    def test_malformed_dump_exits_2(self, capsys, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json\n", "utf-8")
        rc, _, err = run_cli(capsys, "ctx", "--dump", str(bad),
                             "--target", "sub_1909")
        assert rc == 2
        assert "bad.jsonl" in err

    def test_negative_depth_exits_2(self, capsys, dump_file):
        rc, _, err = run_cli(capsys, "ctx", "--dump", dump_file,
                             "--target", "sub_1909", "--depth", "-1")
        assert rc == 2
        assert "non-negative" in err

    def test_usage_error_exits_2(self, capsys, dump_file):
        assert run_cli(capsys, "ctx", "--dump", dump_file)[0] == 2

    def test_help_exits_0(self, capsys):
        assert run_cli(capsys, "--help")[0] == 0


# -- trace -----------------------------------------------------------------


class TestTrace:
    def test_json_document(self, capsys, dump_file):
        rc, out, _ = run_cli(capsys, "trace", "--dump", dump_file,
                             "--target", "sub_1909", "--var", "a1",
                             "--depth", "1", "--json")
        assert rc == 0
        doc = json.loads(out)
        report = trace_variable(CallGraph(parse_dump(xor_dump_text())),
                                "sub_1909", "a1", ContextConfig())
        expected = report.to_json()
        doc["report"].pop("stats"), expected.pop("stats")  # wall-clock time
        assert doc["report"] == expected
        assert "sub_1909" in doc["annotated"]
        assert "alias of" in doc["annotated"]["sub_1909"]

    def test_plain_output_has_annotations_and_report(self, capsys, dump_file):
        rc, out, _ = run_cli(capsys, "trace", "--dump", dump_file,
                             "--target", "sub_1909", "--var", "a1")
        assert rc == 0
        assert "// sub_1909" in out
        assert "alias of" in out
        tail = out[out.rindex("\n{\n") + 1:]
        doc = json.loads(tail)
        assert doc["origin"] == {"function": "sub_1909", "variable": "a1"}

    def test_unknown_variable_exits_2(self, capsys, dump_file):
        rc, _, err = run_cli(capsys, "trace", "--dump", dump_file,
                             "--target", "sub_1909", "--var", "zz")
        assert rc == 2
        assert "zz" in err


# -- run -------------------------------------------------------------------


class TestRun:
    def test_mock_applied_exit_0(self, capsys, dump_file):
        rc, out, _ = run_cli(capsys, "run", "--dump", dump_file,
                             "--target", "sub_1909", "--task", "<vars>",
                             "--mock")
        assert rc == 0
        doc = json.loads(out)
        assert doc["status"] == "Applied"
        olds = [e["old"] for e in doc["final"]["payload"]["variables"]]
        assert olds == ["a1", "a2", "v3", "v4"]

    def test_failed_run_exit_1(self, capsys, dump_file, tmp_path,
                               monkeypatch):
        # A transport that never produces valid output: point the live
        # path at a closed port so the run ends TransportFailed.
        cfg = tmp_path / "model.toml"
        cfg.write_text('endpoint = "http://127.0.0.1:9/v1/chat"\n'
                       'model = "m"\nmax_retries = 0\ntimeout = 0.2\n',
                       "utf-8")
        rc, out, _ = run_cli(capsys, "run", "--dump", dump_file,
                             "--target", "sub_1909", "--task", "<vars>",
                             "--model-config", str(cfg))
        assert rc == 1
        assert json.loads(out)["status"] == "TransportFailed"

    def test_no_model_exits_2(self, capsys, dump_file):
        rc, _, err = run_cli(capsys, "run", "--dump", dump_file,
                             "--target", "sub_1909", "--task", "<vars>")
        assert rc == 2
        assert "--model-config" in err

    def test_unknown_task_exits_2(self, capsys, dump_file):
        rc, _, err = run_cli(capsys, "run", "--dump", dump_file,
                             "--target", "sub_1909", "--task", "<bogus>",
                             "--mock")
        assert rc == 2
        assert "<bogus>" in err

    def test_run_out_file(self, capsys, dump_file, tmp_path):
        dest = tmp_path / "run.json"
        rc, out, _ = run_cli(capsys, "run", "--dump", dump_file,
                             "--target", "sub_1909", "--task", "<funcname>",
                             "--mock", "--out", str(dest))
        assert rc == 0
        doc = json.loads(dest.read_text())
        assert doc["final"]["payload"] == {"function_name": "renamed_sub_1909"}


# -- bench -----------------------------------------------------------------


class TestBenchRun:
    @pytest.fixture()
    def dataset(self, tmp_path):
        root = tmp_path / "dataset"
        root.mkdir()
        for idx, case in enumerate(CASES[:3], start=1):
            write_case(root, idx, case)
        return str(root)

    def test_replay_report(self, capsys, dataset, tmp_path):
        dest = tmp_path / "report.json"
        rc, _, err = run_cli(capsys, "bench", "run", "--dataset", dataset,
                             "--adapter", "replay",
                             "--tasks", "<funcname>,<vars>",
                             "--out", str(dest))
        assert rc == 0
        doc = json.loads(dest.read_text())
        assert len(doc["rows"]) == 6
        assert doc["success_ratio"] == 1.0
        assert doc["metadata"]["adapter"] == "replay"
        assert "success ratio 1.0000 over 6 runs" in err

    def test_report_to_stdout(self, capsys, dataset):
        rc, out, _ = run_cli(capsys, "bench", "run", "--dataset", dataset,
                             "--tasks", "<funcname>")
        assert rc == 0
        doc = json.loads(out)
        assert doc["version"] == "1" and len(doc["rows"]) == 3

    def test_empty_dataset_exits_2(self, capsys, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc, _, err = run_cli(capsys, "bench", "run", "--dataset", str(empty))
        assert rc == 2
        assert "no cases" in err

    def test_bad_adapter_exits_2(self, capsys, dataset):
        rc, _, _ = run_cli(capsys, "bench", "run", "--dataset", dataset,
                           "--adapter", "other")
        assert rc == 2

    def test_live_requires_model(self, capsys, dataset):
        rc, _, err = run_cli(capsys, "bench", "run", "--dataset", dataset,
                             "--adapter", "live")
        assert rc == 2
        assert "--model-config" in err


# -- corpus ----------------------------------------------------------------


def corpus_rows():
    code = ("__int64 f%d(__int64 a1)\n{\n  __int64 v1; // rbx\n\n"
            "  v1 = a1 * %d;\n  return v1 + %d;\n}")
    rows = []
    for i in range(6):
        rows.append({"project": "p", "binary": "b", "name": f"fn_{i}",
                     "address": 0x1000 + i, "pseudocode": code % (i, i + 2, i),
                     "source": "long f(long a){return a;}",
                     "comment": "Scales and offsets."})
    rows.append({"project": "p", "binary": "b", "name": "tiny",
                 "address": 0x9999, "pseudocode": "int t(void)\n{\n}",
                 "source": "", "comment": ""})
    rows.append(dict(rows[0], name="fn_0_copy", address=0x8888))
    return rows


@pytest.fixture()
def corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for row in corpus_rows():
            fh.write(json.dumps(row) + "\n")
    return str(path)


class TestCorpus:
    def test_sanitize_writes_audit(self, capsys, corpus_file, tmp_path):
        out = tmp_path / "clean.jsonl"
        rc, text, _ = run_cli(capsys, "corpus", "sanitize",
                              "--in", corpus_file, "--out", str(out),
                              "--min-lines", "4")
        assert rc == 0
        summary = json.loads(text)
        assert summary["kept"] == 7
        assert summary["reasons"] == {"TooShort": 1}
        audit_lines = [json.loads(l) for l in
                       (tmp_path / "clean.jsonl.audit.jsonl")
                       .read_text().splitlines()]
        assert audit_lines == [{"name": "tiny", "project": "p",
                                "binary": "b", "address": 0x9999,
                                "reason": "TooShort"}]
        kept = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(kept) == 7 and "tiny" not in {r["name"] for r in kept}

    def test_dedup_drops_near_copy(self, capsys, corpus_file, tmp_path):
        out = tmp_path / "uniq.jsonl"
        audit = tmp_path / "clusters.jsonl"
        rc, text, _ = run_cli(capsys, "corpus", "dedup",
                              "--in", corpus_file, "--out", str(out),
                              "--audit", str(audit), "--threshold", "0.8")
        assert rc == 0
        summary = json.loads(text)
        assert summary["dropped"] == 1
        clusters = [json.loads(l) for l in audit.read_text().splitlines()]
        assert len(clusters) == 1
        members = {m["name"] for m in clusters[0]["members"]}
        assert members == {"fn_0", "fn_0_copy"}

    def test_render_jsonl(self, capsys, corpus_file, tmp_path):
        clean = tmp_path / "full.jsonl"
        rows = [r for r in corpus_rows() if r["source"] and r["comment"]]
        clean.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        rc, out, _ = run_cli(capsys, "corpus", "render",
                             "--in", str(clean), "--seed", "7")
        assert rc == 0
        lines = [json.loads(l) for l in out.splitlines()]
        assert len(lines) == len(rows)
        first = lines[0]
        assert sorted(first["order"]) == ["comment", "pseudo", "source"]
        assert "<<<segment:" in first["rendered"]

    def test_render_missing_segment_exits_2(self, capsys, corpus_file):
        rc, _, err = run_cli(capsys, "corpus", "render",
                             "--in", corpus_file)
        assert rc == 2
        assert "tiny" in err

    def test_render_deterministic_per_seed(self, capsys, tmp_path):
        clean = tmp_path / "full.jsonl"
        rows = [r for r in corpus_rows() if r["source"] and r["comment"]]
        clean.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        rc1, out1, _ = run_cli(capsys, "corpus", "render",
                               "--in", str(clean), "--seed", "3")
        rc2, out2, _ = run_cli(capsys, "corpus", "render",
                               "--in", str(clean), "--seed", "3")
        assert rc1 == rc2 == 0 and out1 == out2

    def test_mix_plan(self, capsys):
        rc, out, _ = run_cli(capsys, "corpus", "mix",
                             "--available", "binary=900,code=400,text=150",
                             "--total", "1000")
        assert rc == 0
        doc = json.loads(out)
        assert doc["plan"] == {"binary": 600, "code": 250, "text": 150}
        assert doc["total"] == 1000

    def test_mix_bad_mapping_exits_2(self, capsys):
        rc, _, err = run_cli(capsys, "corpus", "mix",
                             "--available", "binary", "--total", "10")
        assert rc == 2
        assert "name=count" in err

    def test_missing_corpus_exits_2(self, capsys, tmp_path):
        rc, _, err = run_cli(capsys, "corpus", "sanitize",
                             "--in", str(tmp_path / "gone.jsonl"),
                             "--out", str(tmp_path / "o.jsonl"))
        assert rc == 2
        assert "gone.jsonl" in err


# -- synth -----------------------------------------------------------------


COT_BODY = ("<cot>\nThe loop walks the buffer sixteen bytes at a stride and "
            "mixes each lane against the round key, so the routine is a "
            "block whitener; the result register is returned unchanged.\n"
            "</cot>")
VERDICT_BODY = json.dumps({"correct": True, "consistent": True,
                           "helpful": True, "pure": True})


class _ScriptedModelHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        prompt = body["messages"][0]["content"]
        content = (VERDICT_BODY if "reviewing a candidate" in prompt
                   else COT_BODY)
        out = json.dumps({"choices": [{"message": {"content": content}}],
                          "usage": {}}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture()
def scripted_model(tmp_path):
    server = HTTPServer(("127.0.0.1", 0), _ScriptedModelHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    cfg = tmp_path / "model.toml"
    cfg.write_text(
        f'endpoint = "http://127.0.0.1:{server.server_address[1]}/v1/chat"\n'
        'model = "scripted"\nmax_retries = 1\n', "utf-8")
    yield str(cfg)
    server.shutdown()


class TestSynthSft:
    @pytest.fixture()
    def raw_file(self, tmp_path):
        path = tmp_path / "raw.jsonl"
        path.write_text(json.dumps({
            "task": "<funcname>",
            "prompt": "## Target Function\n\n```c\nvoid f(void){}\n```\n",
            "answer": {"function_name": "xor_whiten_block"}}) + "\n", "utf-8")
        return str(path)

    def test_full_pipeline_over_http(self, capsys, raw_file, scripted_model,
                                     tmp_path):
        out_dir = tmp_path / "shards"
        rc, out, _ = run_cli(capsys, "synth", "sft", "--raw", raw_file,
                             "--out", str(out_dir), "--mode", "standard",
                             "--model-config", scripted_model)
        assert rc == 0
        stats = json.loads(out)
        assert stats["total"] == 1
        assert stats["accepted"] == 1
        assert stats["accept_rate"] == 1.0
        shards = list(out_dir.glob("sft-*.jsonl"))
        assert len(shards) == 1
        record = json.loads(shards[0].read_text().splitlines()[0])
        assert "block whitener" in record["cot"]

    def test_missing_raw_exits_2(self, capsys, scripted_model, tmp_path):
        rc, _, err = run_cli(capsys, "synth", "sft",
                             "--raw", str(tmp_path / "none.jsonl"),
                             "--out", str(tmp_path / "s"),
                             "--model-config", scripted_model)
        assert rc == 2
        assert "none.jsonl" in err

    def test_bad_record_exits_2(self, capsys, scripted_model, tmp_path):
        raw = tmp_path / "raw.jsonl"
        raw.write_text(json.dumps({"task": "<funcname>", "prompt": "p",
                                   "answer": {"wrong": 1}}) + "\n", "utf-8")
        rc, _, err = run_cli(capsys, "synth", "sft", "--raw", str(raw),
                             "--out", str(tmp_path / "s"),
                             "--model-config", scripted_model)
        assert rc == 2

    def test_model_config_required(self, capsys, raw_file, tmp_path):
        rc, _, _ = run_cli(capsys, "synth", "sft", "--raw", raw_file,
                           "--out", str(tmp_path / "s"))
        assert rc == 2
