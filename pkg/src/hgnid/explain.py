"""Zero-shot prompt construction and the chat-completion client.

Flow queries state the predicted class and the top attributed features
with their actual values; payload-specific predictions additionally get a
payload query built from the highest-importance packets rendered as ASCII.
Offline mode is first class: no network access is ever required.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import httpx
import numpy as np

from .attribution import Attribution
from .labels import PAYLOAD_SPECIFIC_CLASSES
from .temporal import EXTENDED_FEATURE_NAMES

PROMPT_TEMPLATE_VERSION = "hgnid-prompts-1"

P_INIT_TEMPLATE = "The predicted class from GNN is {predicted_class}."
P_PART2_HEADER = "The top features contributing to this prediction are:"
P_ALIGN = (
    "Don't expect any values on your own. Explain the predicted outcome and its "
    "potential reason along with the potential mitigation. "
    'Start your answer with "The predicted outcome is."'
)
P_PAYLOAD_PREFIX = (
    "Analyze whether this payload of network flow is malicious or not. "
    "Give reason concisely."
)
SYSTEM_MESSAGE = (
    "You are a network security analyst. Answer based only on the information "
    "provided in the prompt."
)

DEFAULT_TOP_FLOW_FEATURES = 5
DEFAULT_TOP_PAYLOAD_PACKETS = 3


@dataclass
class PromptParts:
    p_init: str
    p_part2: str
    p_align: str = P_ALIGN
    p_payload_prefix: str = P_PAYLOAD_PREFIX
    template_version: str = PROMPT_TEMPLATE_VERSION


def _format_value(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return f"{value:g}"


def rank_flow_features(
    scores: np.ndarray,
    values: np.ndarray,
    names: list[str] = EXTENDED_FEATURE_NAMES,
    n: int = DEFAULT_TOP_FLOW_FEATURES,
) -> list[tuple[str, float, float]]:
    """Top-n (name, value, score) by descending score; ties keep schema order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n = min(n, len(names))
    order = sorted(range(len(names)), key=lambda i: (-scores[i], i))
    return [(names[i], float(values[i]), float(scores[i])) for i in order[:n]]


def build_flow_query(predicted_class: str, top: list[tuple[str, float, float]]) -> str:
    p_init = P_INIT_TEMPLATE.format(predicted_class=predicted_class)
    lines = [p_init, P_PART2_HEADER]
    for name, value, _score in top:
        lines.append(f"{name} with actual value {_format_value(value)}")
    lines.append(P_ALIGN)
    return "\n".join(lines)


def payload_to_ascii(
    payload_scores: np.ndarray,
    payload_matrix: np.ndarray,
    top_n: int = DEFAULT_TOP_PAYLOAD_PACKETS,
) -> str:
    """Render the top-n packets (by mean min-max-normalized importance) as
    ASCII: printable bytes as characters, others as '.', trailing zero
    padding stripped."""
    if payload_matrix.shape[0] < 1:
        raise ValueError("at least one packet required")
    scores = np.asarray(payload_scores, dtype=np.float64)
    if scores.shape != payload_matrix.shape:
        raise ValueError(
            f"score shape {scores.shape} does not match payload matrix {payload_matrix.shape}"
        )
    norm = np.zeros_like(scores)
    for i, row in enumerate(scores):
        lo, hi = row.min(), row.max()
        if hi > lo:
            norm[i] = (row - lo) / (hi - lo)
    means = norm.mean(axis=1)
    order = sorted(range(len(means)), key=lambda i: (-means[i], i))[:top_n]

    rendered = []
    for i in order:
        row = payload_matrix[i]
        nz = np.nonzero(row)[0]
        trimmed = row[: nz[-1] + 1] if nz.size else row[:0]
        text = "".join(chr(b) if 0x20 <= b <= 0x7E else "." for b in trimmed)
        if text:
            rendered.append(text)
    return "\n".join(rendered)


def build_payload_query(
    ascii_payload: str,
    predicted_class: str,
    payload_classes: frozenset[str] = PAYLOAD_SPECIFIC_CLASSES,
) -> str:
    if predicted_class not in payload_classes:
        raise ValueError(
            f"payload query requested for non-payload class {predicted_class!r}"
        )
    return "\n".join([P_PAYLOAD_PREFIX, ascii_payload, P_ALIGN])


@dataclass
class LlmConfig:
    base_url: str | None = None  # None -> offline mode
    model: str = "llama3-8b"
    api_key_env: str = "HGNID_API_KEY"
    temperature: float = 0.0
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_s: float = 0.5
    system_message: str = SYSTEM_MESSAGE

    @property
    def offline(self) -> bool:
        return self.base_url is None


class LlmError(Exception):
    pass


class LlmClient:
    """Minimal OpenAI-compatible chat-completions client with bounded
    retries; offline mode returns a deterministic placeholder."""

    def __init__(self, config: LlmConfig | None = None, transport: httpx.BaseTransport | None = None):
        self.config = config or LlmConfig()
        self._transport = transport
        self.last_retries = 0

    def query(self, text: str) -> str:
        if self.config.offline:
            return f"[offline] no model endpoint configured; query preserved:\n{text}"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": self.config.system_message},
                {"role": "user", "content": text},
            ],
        }
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        self.last_retries = 0
        last_error: Exception | None = None
        with httpx.Client(transport=self._transport, timeout=self.config.timeout_s) as client:
            for attempt in range(self.config.max_retries):
                if attempt:
                    time.sleep(self.config.backoff_s * 2 ** (attempt - 1))
                    self.last_retries += 1
                try:
                    resp = client.post(url, headers=headers, json=body)
                except httpx.HTTPError as exc:
                    last_error = LlmError(f"request failed: {exc}")
                    continue
                if resp.status_code != 200:
                    last_error = LlmError(f"endpoint returned HTTP {resp.status_code}")
                    continue
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, json.JSONDecodeError) as exc:
                    last_error = LlmError(f"malformed completion body: {exc}")
                    continue
        raise last_error or LlmError("chat completion failed")


@dataclass
class ExplanationReport:
    predicted_class: str
    probabilities: dict[str, float]
    flow_query: str
    flow_response: str
    payload_query: str | None = None
    payload_response: str | None = None
    offline: bool = True
    llm_model: str | None = None
    llm_latency_s: float | None = None
    retries: int = 0
    template_version: str = PROMPT_TEMPLATE_VERSION

    @property
    def combined(self) -> str:
        if self.payload_response is not None:
            return self.flow_response + "\n" + self.payload_response
        return self.flow_response

    def to_dict(self) -> dict:
        return {
            "predicted_class": self.predicted_class,
            "probabilities": self.probabilities,
            "flow_query": self.flow_query,
            "flow_response": self.flow_response,
            "payload_query": self.payload_query,
            "payload_response": self.payload_response,
            "explanation": self.combined,
            "offline": self.offline,
            "llm_model": self.llm_model,
            "llm_latency_s": self.llm_latency_s,
            "retries": self.retries,
            "template_version": self.template_version,
        }

    def to_markdown(self) -> str:
        lines = [
            f"# Explanation: {self.predicted_class}",
            "",
            "## Flow analysis",
            "",
            "**Query**",
            "```",
            self.flow_query,
            "```",
            "**Response**",
            "",
            self.flow_response,
        ]
        if self.payload_query is not None:
            lines += [
                "",
                "## Payload analysis",
                "",
                "**Query**",
                "```",
                self.payload_query,
                "```",
                "**Response**",
                "",
                self.payload_response or "",
            ]
        return "\n".join(lines)


def compose_explanation(
    predicted_class: str,
    probabilities: dict[str, float],
    attribution: Attribution,
    flow_values: np.ndarray,
    payload_matrix: np.ndarray,
    client: LlmClient | None = None,
    n_top_features: int = DEFAULT_TOP_FLOW_FEATURES,
    n_top_packets: int = DEFAULT_TOP_PAYLOAD_PACKETS,
    payload_classes: frozenset[str] = PAYLOAD_SPECIFIC_CLASSES,
) -> ExplanationReport:
    """Build flow (and, for payload-specific classes, payload) queries from
    an attribution, run them through the LLM client, and combine."""
    client = client or LlmClient()
    top = rank_flow_features(attribution.flow, flow_values, n=n_top_features)
    flow_query = build_flow_query(predicted_class, top)

    start = time.monotonic()
    flow_response = client.query(flow_query)
    retries = client.last_retries

    payload_query = payload_response = None
    if predicted_class in payload_classes:
        ascii_payload = payload_to_ascii(attribution.payload, payload_matrix, n_top_packets)
        payload_query = build_payload_query(ascii_payload, predicted_class, payload_classes)
        payload_response = client.query(payload_query)
        retries += client.last_retries
    latency = time.monotonic() - start

    return ExplanationReport(
        predicted_class=predicted_class,
        probabilities=probabilities,
        flow_query=flow_query,
        flow_response=flow_response,
        payload_query=payload_query,
        payload_response=payload_response,
        offline=client.config.offline,
        llm_model=None if client.config.offline else client.config.model,
        llm_latency_s=latency,
        retries=retries,
    )
