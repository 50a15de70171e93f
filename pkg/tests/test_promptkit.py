"""Task registry, prompt assembly, response parsing, and validation."""

import json

import jsonschema
import pytest

from binsight import dflow, promptkit
from binsight.bench.clusters import TypeClusterTable
from binsight.cgraph import CallGraph, ContextConfig, collect_context, select_context
from binsight.promptkit import (
    BudgetTooSmall,
    FormatError,
    HEADER_CHAINS,
    HEADER_CONTEXT,
    HEADER_DATAFLOW,
    HEADER_TARGET,
    Prediction,
    SchemaError,
    SUPER_THINKING_TAG,
    TASK_TAGS,
    THINKING_TAG,
    UnknownTask,
    ViolationCode,
    all_tasks,
    build_prompt,
    estimate_tokens,
    golden_example,
    load_schema,
    parse_response,
    render_chains,
    render_dataflow,
    render_prompt,
    task_for,
    validate_prediction,
)
from binsight.pseudoc import parse_dump

TGT = """int tgt(int a1, int a2)
{
  int v1;

  v1 = a1;
  helper(v1, a2);
  return v1;
}"""
HELPER = """int helper(int p, int q)
{
  return p + q;
}"""
CALLER = """int caller(int x)
{
  int r;

  r = tgt(x, 5);
  return r;
}"""
SOLO = """int solo(int z)
{
  return z;
}"""


def make_graph():
    lines = []
    for i, (name, code) in enumerate(
            [("tgt", TGT), ("helper", HELPER), ("caller", CALLER),
             ("solo", SOLO)]):
        lines.append(json.dumps({
            "project": "p", "binary": "b", "name": name,
            "address": 0x1000 + i * 0x100, "pseudocode": code,
        }))
    return CallGraph(parse_dump("\n".join(lines)))


@pytest.fixture(scope="module")
def graph():
    return make_graph()


@pytest.fixture(scope="module")
def selection(graph):
    cfg = ContextConfig()
    return select_context(collect_context(graph, "tgt", cfg), cfg,
                          traced={"helper"})


@pytest.fixture(scope="module")
def trace(graph):
    return dflow.trace_variable(graph, "tgt", "a1")


@pytest.fixture(scope="module")
def bundle(graph, selection, trace):
    return build_prompt(graph, "tgt", selection, [trace],
                        task_for("<arg:a1>"))


class TestTaskRegistry:
    def test_fourteen_families(self):
        tasks = all_tasks()
        assert len(tasks) == 14
        assert len({t.tag for t in tasks}) == 14
        assert len({t.family for t in tasks}) == 14
        assert [t.tag for t in tasks] == list(TASK_TAGS)

    def test_variable_scoped_tags_carry_the_name(self):
        task = task_for("<arg:a1>")
        assert task.family == "arg"
        assert task.variable == "a1"
        assert task.output_schema == "rename_single.v1"
        assert task_for("<var:v3>").variable == "v3"

    def test_plain_tags_have_no_variable(self):
        task = task_for("<funcname>")
        assert task.variable is None
        assert task.output_schema == "funcname.v1"

    @pytest.mark.parametrize("bad", [
        "<var>", "<arg>", "<funcname:x>", "funcname", "<bogus>",
        "<VAR:a1>", "<summary-en> ", "", "<var:9bad>",
    ])
    def test_unknown_tags_rejected(self, bad):
        with pytest.raises(UnknownTask):
            task_for(bad)

    def test_every_schema_is_well_formed(self):
        for task in all_tasks():
            schema = load_schema(task.output_schema)
            jsonschema.Draft202012Validator.check_schema(schema)

    def test_every_family_has_a_validating_golden_example(self):
        for task in all_tasks():
            payload = golden_example(task)
            jsonschema.validate(payload, load_schema(task.output_schema))

    def test_golden_examples_are_copies(self):
        task = task_for("<funcname>")
        golden_example(task)["function_name"] = "mutated"
        assert golden_example(task)["function_name"] != "mutated"


class TestPromptLayout:
    def test_exact_prompt_text(self, bundle):
        expected = """## Context Functions

int helper(int p, int q)  // p ~ alias of a1@tgt
{
  return p + q;  // p ~ alias of a1@tgt
}

int caller(int x)
{
  int r;

  r = tgt(x, 5);  // x ~ alias of a1@tgt
  return r;
}

## Call Chains

tgt -> helper
caller -> tgt

## Data Flow

x@caller ~ a1@tgt
p@helper ~ a1@tgt
v1@tgt ~ a1@tgt

## Target Function

int tgt(int a1, int a2)  // a1 ~ alias of a1@tgt
{
  int v1;

  v1 = a1;  // v1 ~ alias of a1@tgt, a1 ~ alias of a1@tgt
  helper(v1, a2);  // v1 ~ alias of a1@tgt
  return v1;  // v1 ~ alias of a1@tgt
}

<arg:a1>
<Thought>
"""
        assert bundle.text() == expected

    def test_section_order_context_first_target_last(self, bundle):
        text = bundle.text()
        positions = [text.index(h) for h in
                     (HEADER_CONTEXT, HEADER_CHAINS, HEADER_DATAFLOW,
                      HEADER_TARGET, "<arg:a1>", THINKING_TAG)]
        assert positions == sorted(positions)
        assert text.index(HEADER_TARGET) > text.index(HEADER_DATAFLOW)

    def test_task_tag_is_the_literal_line(self, bundle):
        assert bundle.part5_task == "<arg:a1>"
        assert "\n<arg:a1>\n<Thought>\n" in bundle.text()

    def test_super_thought_switches_the_tag(self, graph, selection, trace):
        b = build_prompt(graph, "tgt", selection, [trace],
                         task_for("<arg:a1>"), super_thought=True)
        assert b.thinking_tag == SUPER_THINKING_TAG
        assert b.text().endswith("<arg:a1>\n<Super-Thought>\n")

    def test_token_estimate_matches_text(self, bundle):
        assert bundle.token_estimate == estimate_tokens(bundle.text())
        assert bundle.token_estimate == -(-len(bundle.text()) // 4)

    def test_deterministic(self, graph, selection, trace):
        a = build_prompt(graph, "tgt", selection, [trace], task_for("<vars>"))
        b = build_prompt(graph, "tgt", selection, [trace], task_for("<vars>"))
        assert a == b

    def test_no_context_sections_for_isolated_target(self, graph):
        cfg = ContextConfig()
        sel = select_context(collect_context(graph, "solo", cfg), cfg)
        b = build_prompt(graph, "solo", sel, [], task_for("<funcname>"))
        text = b.text()
        assert HEADER_CONTEXT not in text
        assert HEADER_CHAINS not in text
        assert HEADER_DATAFLOW not in text
        assert text == "## Target Function\n\n" + SOLO + "\n\n<funcname>\n<Thought>\n"


class TestBudgetPressure:
    def test_drop_cascade(self, graph, selection, trace):
        task = task_for("<arg:a1>")

        def bld(budget):
            return build_prompt(graph, "tgt", selection, [trace], task,
                                budget=budget)

        full = bld(10_000)
        assert full.part2_context != () and full.part3_chains
        assert full.token_estimate <= 10_000

        one_dropped = bld(full.token_estimate - 1)
        assert len(one_dropped.part2_context) == 1
        assert "int helper" in one_dropped.part2_context[0]
        assert one_dropped.part3_chains == full.part3_chains

        no_context = bld(one_dropped.token_estimate - 1)
        assert no_context.part2_context == ()
        assert no_context.part3_chains == full.part3_chains

        no_chains = bld(no_context.token_estimate - 1)
        assert no_chains.part3_chains == ""
        assert no_chains.part4_dataflow == full.part4_dataflow

        no_annotations = bld(no_chains.token_estimate - 1)
        assert no_annotations.part4_dataflow == ""
        assert no_annotations.part1_target == TGT
        assert "alias of" not in no_annotations.text()

        with pytest.raises(BudgetTooSmall) as err:
            bld(no_annotations.token_estimate - 1)
        assert err.value.needed == no_annotations.token_estimate

    def test_every_bundle_respects_its_budget(self, graph, selection, trace):
        task = task_for("<arg:a1>")
        floor = None
        for budget in range(40, 400, 7):
            try:
                b = build_prompt(graph, "tgt", selection, [trace], task,
                                 budget=budget)
            except BudgetTooSmall:
                continue
            floor = b if floor is None else floor
            assert b.token_estimate <= budget

    def test_dropping_never_reorders_survivors(self, graph, trace):
        cfg = ContextConfig()
        sel = select_context(collect_context(graph, "tgt", cfg), cfg)
        full = build_prompt(graph, "tgt", sel, [trace], task_for("<vars>"))
        order = list(full.part2_context)
        for budget in range(60, full.token_estimate + 1, 5):
            try:
                b = build_prompt(graph, "tgt", sel, [trace],
                                 task_for("<vars>"), budget=budget)
            except BudgetTooSmall:
                continue
            survivors = list(b.part2_context)
            assert survivors == [t for t in order if t in survivors]

    def test_zero_budget_raises(self, graph, selection, trace):
        with pytest.raises(BudgetTooSmall):
            build_prompt(graph, "tgt", selection, [trace],
                         task_for("<funcname>"), budget=0)


class TestRenderers:
    def test_chain_lines_follow_call_direction(self, selection):
        assert render_chains(selection.chains) == "tgt -> helper\ncaller -> tgt"

    def test_chain_dedup(self, selection):
        doubled = list(selection.chains) + list(selection.chains)
        assert render_chains(doubled) == render_chains(selection.chains)

    def test_dataflow_digest_skips_origin(self, trace):
        digest = render_dataflow([trace])
        assert digest == ("x@caller ~ a1@tgt\n"
                          "p@helper ~ a1@tgt\n"
                          "v1@tgt ~ a1@tgt")
        assert "a1@tgt ~" not in digest

    def test_estimate_tokens_ceil_and_ratio(self):
        assert estimate_tokens("abcd") == 1
        assert estimate_tokens("abcde") == 2
        assert estimate_tokens("abcd", chars_per_token=2.0) == 2
        assert estimate_tokens("") == 0


class TestParseResponse:
    def test_reasoning_and_fenced_payload(self):
        task = task_for("<funcname>")
        text = ("The loop XORs each block.\n```json\n"
                "{\"function_name\": \"xor_block\"}\n```")
        pred = parse_response(task, text)
        assert pred.payload == {"function_name": "xor_block"}
        assert pred.reasoning == "The loop XORs each block."
        assert pred.raw == text

    def test_last_json_object_wins(self):
        task = task_for("<funcname>")
        text = ('first {"function_name": "a"} then {"function_name": "b"} end')
        assert parse_response(task, text).payload == {"function_name": "b"}

    def test_outer_object_wins_over_nested(self):
        task = task_for("<signature>")
        payload = {"return_type": "int", "function_name": "f",
                   "args": [{"name": "n", "type": "int"}]}
        pred = parse_response(task, "x " + json.dumps(payload))
        assert pred.payload == payload

    def test_no_json_is_a_format_error(self):
        with pytest.raises(FormatError):
            parse_response(task_for("<funcname>"), "no structured answer here")

    def test_broken_json_is_a_format_error(self):
        with pytest.raises(FormatError):
            parse_response(task_for("<funcname>"), "{\"function_name\": ")

    def test_wrong_shape_is_a_schema_error(self):
        with pytest.raises(SchemaError):
            parse_response(task_for("<funcname>"), '{"name": "missing key"}')

    def test_schema_error_when_last_object_is_nested_wrapper(self):
        with pytest.raises(SchemaError):
            parse_response(task_for("<funcname>"),
                           '{"wrapper": {"function_name": "inner"}}')

    @pytest.mark.parametrize("tag", TASK_TAGS)
    def test_round_trip_on_golden_payloads(self, tag):
        task = task_for(tag)
        payload = golden_example(task)
        text = ("step by step\n```json\n"
                + json.dumps(payload, ensure_ascii=False, indent=2)
                + "\n```\n")
        pred = parse_response(task, text)
        assert pred.payload == payload
        assert pred.reasoning == "step by step"


@pytest.fixture(scope="module")
def target(graph):
    return graph.nodes["tgt"]


@pytest.fixture(scope="module")
def clusters():
    return TypeClusterTable()


class TestValidatePrediction:
    def mk(self, tag, payload):
        return Prediction(task_for(tag), "", payload, json.dumps(payload))

    def codes(self, report):
        return [v.code for v in report.violations]

    def test_clean_rename_passes(self, target, clusters):
        pred = self.mk("<var:v1>", {"variables": [
            {"old": "v1", "new_name": "iv_ptr", "new_type": "uint8_t *"}]})
        report = validate_prediction(pred, target, clusters)
        assert report.ok and report.violations == ()

    def test_unknown_variable(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v99", "new_name": "n", "new_type": "int"}]})
        report = validate_prediction(pred, target, clusters)
        assert ViolationCode.UnknownVariable in self.codes(report)
        assert not report.ok

    def test_invalid_identifier(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v1", "new_name": "9abc", "new_type": "int"}]})
        assert self.codes(validate_prediction(pred, target, clusters)) == [
            ViolationCode.FormatError]

    def test_keyword_rejected_as_name(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v1", "new_name": "while", "new_type": "int"}]})
        assert ViolationCode.FormatError in self.codes(
            validate_prediction(pred, target, clusters))

    def test_empty_name_is_empty_field_only(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v1", "new_name": "", "new_type": "int"}]})
        assert self.codes(validate_prediction(pred, target, clusters)) == [
            ViolationCode.EmptyField]

    def test_undeclared_named_type(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v1", "new_name": "ctx", "new_type": "FooBar *"}]})
        assert self.codes(validate_prediction(pred, target, clusters)) == [
            ViolationCode.UnknownType]

    def test_declared_struct_type_accepted(self, target, clusters):
        pred = self.mk("<vars>", {
            "variables": [
                {"old": "v1", "new_name": "ctx",
                 "new_type": "struct FooBar *"}],
            "structs": [{"name": "FooBar", "members": [
                {"name": "x", "type": "int", "offset": 0, "size": 4}]}],
        })
        assert validate_prediction(pred, target, clusters).ok

    def test_unparseable_type(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v1", "new_name": "n", "new_type": "int int"}]})
        assert ViolationCode.UnknownType in self.codes(
            validate_prediction(pred, target, clusters))

    def test_scoped_task_must_answer_about_its_variable(self, target, clusters):
        pred = self.mk("<arg:a1>", {"variables": [
            {"old": "a2", "new_name": "len", "new_type": "size_t"}]})
        report = validate_prediction(pred, target, clusters)
        assert ViolationCode.UnknownVariable in self.codes(report)

    def test_empty_summary(self, target, clusters):
        pred = self.mk("<summary-en>", {"summary": "   "})
        assert self.codes(validate_prediction(pred, target, clusters)) == [
            ViolationCode.EmptyField]

    def test_good_summary(self, target, clusters):
        pred = self.mk("<summary-brief-cn>", {"summary": "按位异或两个数据块。"})
        assert validate_prediction(pred, target, clusters).ok

    def test_funcname_with_space(self, target, clusters):
        pred = self.mk("<funcname>", {"function_name": "do work"})
        assert ViolationCode.FormatError in self.codes(
            validate_prediction(pred, target, clusters))

    def test_signature_checks_every_arg(self, target, clusters):
        pred = self.mk("<signature>", {
            "return_type": "void", "function_name": "f",
            "args": [{"name": "n", "type": "size_t"},
                     {"name": "bad name", "type": "&&&"}]})
        codes = self.codes(validate_prediction(pred, target, clusters))
        assert ViolationCode.FormatError in codes
        assert ViolationCode.UnknownType in codes

    def test_empty_algorithm_and_code(self, target, clusters):
        r1 = validate_prediction(
            self.mk("<algorithm>", {"algorithm": "", "confidence": 0.5}),
            target, clusters)
        r2 = validate_prediction(
            self.mk("<decompilation>", {"code": ""}), target, clusters)
        assert self.codes(r1) == [ViolationCode.EmptyField]
        assert self.codes(r2) == [ViolationCode.EmptyField]

    def test_func_analysis_comment_text(self, target, clusters):
        pred = self.mk("<func-analysis>", {
            "function_name": "copy_block", "summary": "copies a block",
            "comments": [{"line": 2, "text": ""}]})
        assert self.codes(validate_prediction(pred, target, clusters)) == [
            ViolationCode.EmptyField]

    def test_report_json_shape(self, target, clusters):
        pred = self.mk("<vars>", {"variables": [
            {"old": "v99", "new_name": "n", "new_type": "int"}]})
        got = validate_prediction(pred, target, clusters).to_json()
        assert got["ok"] is False
        assert got["violations"][0]["code"] == "UnknownVariable"
        assert "v99" in got["violations"][0]["detail"]

    def test_ok_report_json(self, target, clusters):
        pred = self.mk("<funcname>", {"function_name": "copy_block"})
        assert validate_prediction(pred, target, clusters).to_json() == {
            "ok": True, "violations": []}
