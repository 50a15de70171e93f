"""Transport behavior, retry orchestration, and the summary judge."""

import json
import random

import httpx
import pytest

from binsight.cgraph import CallGraph, ContextConfig
from binsight.llmgate import (
    AttemptOutcome,
    AuthError,
    HttpError,
    HttpTransport,
    JudgeFormatError,
    LlmConfig,
    RunStatus,
    ScriptedTransport,
    Timeout,
    TransportError,
    complete,
    judge_summary,
    load_config,
    run_task,
)
from binsight.promptkit import task_for

from test_promptkit import make_graph

CFG = LlmConfig(endpoint="http://model.test/v1/chat", model="test-model")

NO_SLEEP = lambda _delay: None  # noqa: E731

GOOD_FUNCNAME = '{"function_name": "copy_and_call"}'


@pytest.fixture(scope="module")
def graph() -> CallGraph:
    return make_graph()


class TestLlmConfig:
    def test_defaults(self):
        assert CFG.max_output_tokens == 16384
        assert CFG.max_retries == 3
        assert CFG.temperature == 0.0

    def test_load_config_from_toml(self, tmp_path):
        path = tmp_path / "model.toml"
        path.write_text(
            'endpoint = "http://localhost:8080/v1/chat"\n'
            'model = "local-7b"\n'
            'temperature = 0.2\n'
            'max_retries = 1\n')
        cfg = load_config(path)
        assert cfg.model == "local-7b"
        assert cfg.temperature == 0.2
        assert cfg.max_retries == 1
        assert cfg.max_output_tokens == 16384

    def test_load_config_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / "model.toml"
        path.write_text('endpoint = "x"\nmodel = "y"\nbogus = 1\n')
        with pytest.raises(ValueError):
            load_config(path)

    def test_load_config_requires_endpoint_and_model(self, tmp_path):
        path = tmp_path / "model.toml"
        path.write_text('model = "y"\n')
        with pytest.raises(ValueError):
            load_config(path)


class TestComplete:
    def test_wire_payload_shape(self):
        transport = ScriptedTransport(["hello"])
        complete(CFG, [{"role": "user", "content": "hi"}], transport,
                 sleep=NO_SLEEP)
        payload = transport.payloads[0]
        assert set(payload) == {"model", "messages", "max_tokens",
                                "temperature"}
        assert payload["model"] == "test-model"
        assert payload["max_tokens"] == 16384
        assert payload["temperature"] == 0.0
        assert payload["messages"] == [{"role": "user", "content": "hi"}]

    def test_content_and_usage_returned(self):
        transport = ScriptedTransport([
            {"choices": [{"message": {"content": "out"}}],
             "usage": {"prompt_tokens": 7, "completion_tokens": 3}}])
        result = complete(CFG, [], transport, sleep=NO_SLEEP)
        assert result == {"content": "out",
                          "usage": {"prompt_tokens": 7,
                                    "completion_tokens": 3}}

    def test_5xx_then_success_with_backoff(self):
        transport = ScriptedTransport(
            [HttpError(500), HttpError(503), "recovered"])
        delays = []
        result = complete(CFG, [], transport, sleep=delays.append)
        assert result["content"] == "recovered"
        assert transport.calls == 3
        assert delays == [0.5, 1.0]

    def test_timeout_retried(self):
        transport = ScriptedTransport([Timeout("slow"), "ok"])
        assert complete(CFG, [], transport,
                        sleep=NO_SLEEP)["content"] == "ok"
        assert transport.calls == 2

    def test_retries_exhausted_raises_last_error(self):
        transport = ScriptedTransport([HttpError(500)] * 4)
        with pytest.raises(HttpError):
            complete(CFG, [], transport, sleep=NO_SLEEP)
        assert transport.calls == 4

    def test_auth_error_is_terminal(self):
        transport = ScriptedTransport([AuthError("bad key"), "never"])
        with pytest.raises(AuthError):
            complete(CFG, [], transport, sleep=NO_SLEEP)
        assert transport.calls == 1

    def test_client_errors_are_terminal(self):
        transport = ScriptedTransport([HttpError(404), "never"])
        with pytest.raises(HttpError):
            complete(CFG, [], transport, sleep=NO_SLEEP)
        assert transport.calls == 1

    def test_malformed_body_raises(self):
        transport = ScriptedTransport([{"unexpected": True}])
        with pytest.raises(TransportError):
            complete(CFG, [], transport, sleep=NO_SLEEP)


class _FakeResponse:
    def __init__(self, status_code: int, body=None, text: str = ""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


class _FakeClient:
    def __init__(self, script):
        self.script = list(script)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append(
            {"url": url, "json": json, "headers": headers,
             "timeout": timeout})
        item = self.script.pop(0)
        if isinstance(item, BaseException):
            raise item
        return item


class TestHttpTransport:
    def test_success_returns_body(self):
        body = {"choices": [{"message": {"content": "x"}}]}
        client = _FakeClient([_FakeResponse(200, body)])
        assert HttpTransport(client).send(CFG, {"k": 1}) == body
        assert client.requests[0]["url"] == CFG.endpoint
        assert client.requests[0]["timeout"] == CFG.timeout

    def test_bearer_header_from_env(self, monkeypatch):
        monkeypatch.setenv(CFG.api_key_env, "sekrit")
        client = _FakeClient([_FakeResponse(200, {})])
        HttpTransport(client).send(CFG, {})
        assert client.requests[0]["headers"]["Authorization"] == "Bearer sekrit"

    def test_no_header_without_key(self, monkeypatch):
        monkeypatch.delenv(CFG.api_key_env, raising=False)
        client = _FakeClient([_FakeResponse(200, {})])
        HttpTransport(client).send(CFG, {})
        assert "Authorization" not in client.requests[0]["headers"]

    @pytest.mark.parametrize("status", [401, 403])
    def test_auth_statuses(self, status):
        client = _FakeClient([_FakeResponse(status)])
        with pytest.raises(AuthError):
            HttpTransport(client).send(CFG, {})

    def test_http_error_carries_status(self):
        client = _FakeClient([_FakeResponse(502, text="bad gateway")])
        with pytest.raises(HttpError) as err:
            HttpTransport(client).send(CFG, {})
        assert err.value.status == 502

    def test_timeout_maps_to_timeout(self):
        client = _FakeClient([httpx.TimeoutException("slow")])
        with pytest.raises(Timeout):
            HttpTransport(client).send(CFG, {})

    def test_connect_error_maps_to_transport_error(self):
        client = _FakeClient([httpx.ConnectError("refused")])
        with pytest.raises(TransportError):
            HttpTransport(client).send(CFG, {})

    def test_non_json_body(self):
        client = _FakeClient([_FakeResponse(200, body=None, text="<html>")])
        with pytest.raises(TransportError):
            HttpTransport(client).send(CFG, {})

    def test_in_flight_cap_is_configurable(self):
        transport = HttpTransport(_FakeClient([]), max_in_flight=2)
        assert transport.max_in_flight == 2


class TestRunTask:
    def test_good_first_response(self, graph):
        transport = ScriptedTransport([GOOD_FUNCNAME])
        run = run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        assert run.status is RunStatus.Applied
        assert len(run.attempts) == 1
        assert run.attempts[0].outcome is AttemptOutcome.Applied
        assert run.final.payload == {"function_name": "copy_and_call"}

    def test_bad_bad_good_applies_on_third(self, graph):
        transport = ScriptedTransport(
            ["no json at all", '{"wrong": "shape"}', GOOD_FUNCNAME])
        run = run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        assert run.status is RunStatus.Applied
        assert [a.outcome for a in run.attempts] == [
            AttemptOutcome.FormatError, AttemptOutcome.SchemaError,
            AttemptOutcome.Applied]

    def test_four_bad_responses_exhaust(self, graph):
        transport = ScriptedTransport(["junk"] * 4)
        run = run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        assert run.status is RunStatus.ExhaustedRetries
        assert len(run.attempts) == 4
        assert run.final is None

    def test_validation_failure_retried(self, graph):
        bad = '{"variables": [{"old": "v99", "new_name": "n", "new_type": "int"}]}'
        good = '{"variables": [{"old": "v1", "new_name": "acc", "new_type": "int"}]}'
        transport = ScriptedTransport([bad, good])
        run = run_task(graph, "tgt", "<vars>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        assert run.status is RunStatus.Applied
        assert [a.outcome for a in run.attempts] == [
            AttemptOutcome.ValidationError, AttemptOutcome.Applied]
        assert "UnknownVariable" in run.attempts[0].detail

    def test_transport_exhaustion_is_transport_failed(self, graph):
        transport = ScriptedTransport([HttpError(500)] * 8)
        run = run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        assert run.status is RunStatus.TransportFailed
        assert run.final is None
        assert run.attempts == []
        assert "500" in run.error

    def test_auth_error_is_transport_failed(self, graph):
        transport = ScriptedTransport([AuthError("nope")])
        run = run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        assert run.status is RunStatus.TransportFailed
        assert transport.calls == 1

    def test_same_prompt_reasked_verbatim(self, graph):
        transport = ScriptedTransport(["junk", GOOD_FUNCNAME])
        run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                 sleep=NO_SLEEP)
        assert transport.payloads[0] == transport.payloads[1]

    def test_prompt_carries_context_and_task_tag(self, graph):
        transport = ScriptedTransport(
            ['{"variables": [{"old": "a1", "new_name": "src", '
             '"new_type": "int"}]}'])
        run = run_task(graph, "tgt", "<arg:a1>", CFG, transport=transport,
                       sleep=NO_SLEEP)
        text = transport.payloads[0]["messages"][0]["content"]
        assert run.prompt.part5_task == "<arg:a1>"
        assert text.rstrip().endswith("<arg:a1>\n<Thought>")
        assert "p@helper ~ a1@tgt" in text
        assert "## Target Function" in text

    def test_accepts_dump_and_task_spec(self, graph):
        transport = ScriptedTransport([GOOD_FUNCNAME])
        run = run_task(graph, "tgt", task_for("<funcname>"), CFG,
                       transport=transport, sleep=NO_SLEEP)
        assert run.status is RunStatus.Applied

    def test_deterministic_with_deterministic_mock(self, graph):
        def go():
            transport = ScriptedTransport(["junk", GOOD_FUNCNAME])
            return run_task(graph, "tgt", "<funcname>", CFG,
                            transport=transport, sleep=NO_SLEEP).to_json()

        assert go() == go()

    def test_run_json_shape(self, graph):
        transport = ScriptedTransport([GOOD_FUNCNAME])
        got = run_task(graph, "tgt", "<funcname>", CFG, transport=transport,
                       sleep=NO_SLEEP).to_json()
        assert got["status"] == "Applied"
        assert got["target"] == "tgt"
        assert got["task"]["tag"] == "<funcname>"
        assert got["final"]["payload"] == {"function_name": "copy_and_call"}
        assert got["prompt"]["part5_task"] == "<funcname>"
        assert got["attempts"][0]["outcome"] == "applied"


class TestRetryFuzz:
    """Storm the retry loop with a thousand random mock behaviors."""

    GOOD = GOOD_FUNCNAME
    INVALID_NAME = '{"function_name": "9bad"}'
    WRONG_SHAPE = '{"something": "else"}'
    NO_JSON = "thinking forever..."

    def test_attempt_count_never_exceeds_cap(self, graph):
        rng = random.Random(0xBEEF)
        outcomes = {RunStatus.Applied: 0, RunStatus.ExhaustedRetries: 0,
                    RunStatus.TransportFailed: 0}
        for _ in range(1000):
            max_retries = rng.randint(0, 3)
            cfg = LlmConfig(endpoint="http://x", model="m",
                            max_retries=max_retries)
            script = [
                rng.choice([
                    self.GOOD, self.INVALID_NAME, self.WRONG_SHAPE,
                    self.NO_JSON, HttpError(500), HttpError(404),
                    Timeout("t"), AuthError("a"),
                ])
                for _ in range(40)
            ]
            transport = ScriptedTransport(script)
            run = run_task(graph, "tgt", "<funcname>", cfg,
                           transport=transport, sleep=NO_SLEEP)
            outcomes[run.status] += 1
            assert len(run.attempts) <= 1 + max_retries
            assert transport.calls <= (1 + max_retries) ** 2
            assert (run.status is RunStatus.Applied) == (run.final is not None)
            if run.status is RunStatus.Applied:
                assert run.attempts[-1].outcome is AttemptOutcome.Applied
                assert run.final.payload == {"function_name": "copy_and_call"}
            if run.status is RunStatus.TransportFailed:
                assert run.error
            for attempt in run.attempts[:-1]:
                assert attempt.outcome is not AttemptOutcome.Applied
        assert all(count > 0 for count in outcomes.values())


JUDGE_OK = ('{"coverage": true, "accuracy": true, "misleading": false, '
            '"readable": true}')


class TestJudgeSummary:
    def judge(self, content, **kwargs):
        transport = ScriptedTransport([content])
        return judge_summary(CFG, "int f(void) { return 0; }", "returns zero",
                             transport=transport, sleep=NO_SLEEP, **kwargs), transport

    def test_all_pass(self):
        result, _ = self.judge(JUDGE_OK)
        assert result == {"coverage": True, "accuracy": True,
                          "misleading_free": True, "readable": True,
                          "score": 1.0}

    def test_three_pass_one_fail(self):
        result, _ = self.judge(
            '{"coverage": true, "accuracy": true, "misleading": false, '
            '"readable": false}')
        assert result["score"] == 0.75

    def test_all_fail(self):
        result, _ = self.judge(
            '{"coverage": false, "accuracy": false, "misleading": true, '
            '"readable": false}')
        assert result["score"] == 0.0

    def test_misleading_is_inverted(self):
        result, _ = self.judge(
            '{"coverage": true, "accuracy": true, "misleading": true, '
            '"readable": true}')
        assert result["misleading_free"] is False
        assert result["score"] == 0.75

    def test_score_always_quarter_step(self):
        for mask in range(16):
            verdict = json.dumps({
                "coverage": bool(mask & 1), "accuracy": bool(mask & 2),
                "misleading": bool(mask & 4), "readable": bool(mask & 8)})
            result, _ = self.judge(verdict)
            assert result["score"] in {0.0, 0.25, 0.5, 0.75, 1.0}
            assert result["score"] == (
                result["coverage"] + result["accuracy"]
                + result["misleading_free"] + result["readable"]) / 4

    def test_judge_runs_at_temperature_zero(self):
        hot = LlmConfig(endpoint="http://x", model="m", temperature=0.9)
        transport = ScriptedTransport([JUDGE_OK])
        judge_summary(hot, "code", "summary", transport=transport,
                      sleep=NO_SLEEP)
        assert transport.payloads[0]["temperature"] == 0.0

    def test_prompt_interpolation(self):
        transport = ScriptedTransport([JUDGE_OK])
        judge_summary(CFG, "PSEUDO_BODY", "THE_SUMMARY",
                      reference_source="REAL_SOURCE", transport=transport,
                      sleep=NO_SLEEP)
        text = transport.payloads[0]["messages"][0]["content"]
        assert "PSEUDO_BODY" in text
        assert "THE_SUMMARY" in text
        assert "REAL_SOURCE" in text
        for word in ("coverage", "accuracy", "misleading", "readable"):
            assert word in text

    def test_reference_block_omitted_when_absent(self):
        transport = ScriptedTransport([JUDGE_OK])
        judge_summary(CFG, "code", "summary", transport=transport,
                      sleep=NO_SLEEP)
        assert "Reference source" not in transport.payloads[0]["messages"][0][
            "content"]

    def test_bad_verdict_retried_then_ok(self):
        transport = ScriptedTransport(
            ["not a verdict", '{"coverage": true}', JUDGE_OK])
        result = judge_summary(CFG, "code", "summary", transport=transport,
                               sleep=NO_SLEEP)
        assert result["score"] == 1.0
        assert transport.calls == 3

    def test_judge_format_error_after_retries(self):
        transport = ScriptedTransport(["nope"] * 8)
        with pytest.raises(JudgeFormatError):
            judge_summary(CFG, "code", "summary", transport=transport,
                          sleep=NO_SLEEP)
        assert transport.calls == 1 + CFG.max_retries

    def test_empty_summary_rejected(self):
        with pytest.raises(ValueError):
            judge_summary(CFG, "code", "   ",
                          transport=ScriptedTransport([JUDGE_OK]),
                          sleep=NO_SLEEP)

    def test_non_boolean_verdicts_rejected(self):
        transport = ScriptedTransport(
            ['{"coverage": "yes", "accuracy": true, "misleading": false, '
             '"readable": true}'] * 8)
        with pytest.raises(JudgeFormatError):
            judge_summary(CFG, "code", "summary", transport=transport,
                          sleep=NO_SLEEP)

    def test_judge_prompt_file_is_frozen_in_repo(self):
        from importlib import resources
        text = (resources.files("binsight.prompts")
                .joinpath("judge_summary.v1.txt").read_text("utf-8"))
        for marker in ("<<PSEUDOCODE>>", "<<SUMMARY>>", "<<REFERENCE_BLOCK>>"):
            assert marker in text
