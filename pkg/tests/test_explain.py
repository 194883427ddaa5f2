import json
from pathlib import Path

import httpx
import numpy as np
import pytest

from hgnid.attribution import Attribution
from hgnid.explain import (
    LlmClient,
    LlmConfig,
    LlmError,
    build_flow_query,
    build_payload_query,
    compose_explanation,
    payload_to_ascii,
    rank_flow_features,
)
from hgnid.temporal import EXTENDED_FEATURE_NAMES

GOLDEN = Path(__file__).parent / "golden"


# --- feature ranking ---


def test_rank_sorts_by_descending_score():
    scores = np.zeros(92)
    values = np.arange(92, dtype=np.float64)
    scores[10], scores[3], scores[50] = 5.0, 9.0, 1.0
    top = rank_flow_features(scores, values, n=3)
    assert [t[0] for t in top] == [
        EXTENDED_FEATURE_NAMES[3], EXTENDED_FEATURE_NAMES[10], EXTENDED_FEATURE_NAMES[50]]
    assert top[0][1] == 3.0 and top[0][2] == 9.0


def test_rank_ties_keep_schema_order():
    scores = np.zeros(92)
    values = np.zeros(92)
    top = rank_flow_features(scores, values, n=4)
    assert [t[0] for t in top] == EXTENDED_FEATURE_NAMES[:4]


def test_rank_n_clamped_and_validated():
    scores = np.arange(92, dtype=np.float64)
    assert len(rank_flow_features(scores, scores, n=500)) == 92
    with pytest.raises(ValueError):
        rank_flow_features(scores, scores, n=0)


# --- golden prompts ---


def test_flow_query_matches_golden():
    scores = np.zeros(92)
    values = np.zeros(92)
    idx = {n: i for i, n in enumerate(EXTENDED_FEATURE_NAMES)}
    scores[idx["packets_per_s"]], values[idx["packets_per_s"]] = 3.0, 2000.0
    scores[idx["Rolling_SYN_Sum"]], values[idx["Rolling_SYN_Sum"]] = 2.0, 37.0
    scores[idx["duration_s"]], values[idx["duration_s"]] = 1.0, 0.25
    query = build_flow_query("DDoS", rank_flow_features(scores, values, n=3))
    assert query == (GOLDEN / "flow_query.txt").read_text().rstrip("\n")


def test_payload_query_matches_golden():
    ascii_payload = "GET /login.php?user=admin' OR '1'='1 HTTP/1.1"
    query = build_payload_query(ascii_payload, "WebBased")
    assert query == (GOLDEN / "payload_query.txt").read_text().rstrip("\n")


def test_payload_query_gated_to_payload_classes():
    with pytest.raises(ValueError):
        build_payload_query("x", "DoS")
    # the gate set is configurable
    assert build_payload_query("x", "DoS", frozenset({"DoS"})).startswith("Analyze")


# --- payload rendering ---


def pad(row, n=1500):
    return np.array(list(row) + [0] * (n - len(row)), dtype=np.uint8)


def test_ascii_rendering_rules():
    matrix = np.stack([pad([0x00, 0x41, 0x00, 0x42])])  # ".A.B", trailing zeros gone
    scores = np.ones((1, 1500))
    assert payload_to_ascii(scores, matrix) == ".A.B"


def test_ascii_all_zero_payload_renders_empty():
    matrix = np.stack([pad([])])
    assert payload_to_ascii(np.ones((1, 1500)), matrix) == ""


def test_ascii_nonprintables_become_dots():
    matrix = np.stack([pad([0x1F, 0x20, 0x7E, 0x7F, 0xFF])])
    assert payload_to_ascii(np.ones((1, 1500)), matrix) == ". ~.."


def test_ascii_selects_top_packets_by_normalized_importance():
    matrix = np.stack([pad(b"low"), pad(b"high"), pad(b"mid")])
    scores = np.zeros((3, 1500))
    # after min-max normalization the mean decides; packet 1 wins, then 2
    scores[0, :10] = 1.0
    scores[1, :1000] = 1.0
    scores[2, :500] = 1.0
    assert payload_to_ascii(scores, matrix, top_n=2) == "high\nmid"


def test_ascii_constant_scores_fall_back_to_packet_order():
    matrix = np.stack([pad(b"first"), pad(b"second")])
    assert payload_to_ascii(np.zeros((2, 1500)), matrix, top_n=1) == "first"


def test_ascii_requires_a_packet():
    with pytest.raises(ValueError):
        payload_to_ascii(np.zeros((0, 1500)), np.zeros((0, 1500), dtype=np.uint8))


def test_ascii_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        payload_to_ascii(np.zeros((2, 1500)), np.zeros((1, 1500), dtype=np.uint8))


# --- LLM client ---


def test_offline_placeholder_preserves_query():
    out = LlmClient().query("hello query")
    assert out.startswith("[offline]")
    assert "hello query" in out


def test_online_request_shape(monkeypatch):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={
            "choices": [{"message": {"content": "analysis text"}}]})

    monkeypatch.setenv("HGNID_API_KEY", "sk-test")
    client = LlmClient(
        LlmConfig(base_url="http://llm.example/v1", model="m1", backoff_s=0),
        transport=httpx.MockTransport(handler),
    )
    assert client.query("the question") == "analysis text"
    assert seen["url"] == "http://llm.example/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"]["model"] == "m1"
    assert seen["body"]["messages"][0]["role"] == "system"
    assert seen["body"]["messages"][1] == {"role": "user", "content": "the question"}
    assert client.last_retries == 0


def test_retry_then_success():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            return httpx.Response(500)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    client = LlmClient(LlmConfig(base_url="http://x", backoff_s=0),
                       transport=httpx.MockTransport(handler))
    assert client.query("q") == "ok"
    assert calls["n"] == 2
    assert client.last_retries == 1


def test_retries_exhausted_raises():
    client = LlmClient(
        LlmConfig(base_url="http://x", backoff_s=0, max_retries=3),
        transport=httpx.MockTransport(lambda r: httpx.Response(503)),
    )
    with pytest.raises(LlmError):
        client.query("q")
    assert client.last_retries == 2


def test_malformed_body_raises():
    client = LlmClient(
        LlmConfig(base_url="http://x", backoff_s=0),
        transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"oops": 1})),
    )
    with pytest.raises(LlmError):
        client.query("q")


# --- report composition ---


def make_attribution(n=2):
    rng = np.random.RandomState(0)
    return Attribution(
        flow=rng.randn(92), payload=rng.randn(n, 1500), contain=rng.randn(n, 4),
        link=rng.randn(n - 1, 1), target_class=1, steps=8, fx=-0.1, fx0=-2.0,
        completeness_gap=0.01,
    )


def test_compose_payload_class_includes_both_sections():
    matrix = np.stack([pad(b"GET /a"), pad(b"POST /b")])
    report = compose_explanation(
        "WebBased", {"WebBased": 0.9, "Benign": 0.1}, make_attribution(),
        flow_values=np.arange(92, dtype=np.float64), payload_matrix=matrix,
    )
    assert report.offline
    assert report.flow_query.startswith("The predicted class from GNN is WebBased.")
    assert report.payload_query is not None
    assert report.payload_response is not None
    assert report.combined == report.flow_response + "\n" + report.payload_response
    md = report.to_markdown()
    assert "## Flow analysis" in md and "## Payload analysis" in md


def test_compose_non_payload_class_skips_payload():
    report = compose_explanation(
        "DoS", {"DoS": 1.0}, make_attribution(),
        flow_values=np.zeros(92), payload_matrix=np.stack([pad(b"x")]),
    )
    assert report.payload_query is None
    assert report.combined == report.flow_response
    assert "## Payload analysis" not in report.to_markdown()


def test_report_dict_json_roundtrip():
    report = compose_explanation(
        "Bruteforce", {"Bruteforce": 1.0}, make_attribution(n=1),
        flow_values=np.zeros(92), payload_matrix=np.stack([pad(b"ssh login")]),
    )
    d = json.loads(json.dumps(report.to_dict()))
    assert d["predicted_class"] == "Bruteforce"
    assert d["offline"] is True
    assert d["explanation"] == report.combined
    assert d["template_version"] == report.template_version
