"""Chat-completions client plus a deterministic offline mock.

The live client speaks the OpenAI-compatible wire format: one POST to
``<endpoint_url>/v1/chat/completions`` per prompt, system and user messages,
sampling parameters from :class:`LlmConfig`. Transport failures and 5xx
responses retry with exponential backoff; 4xx responses do not retry.

The mock backend replays the bundle's ground truth (optionally corrupted)
so the whole parse/score pipeline can run offline with known expected
metric outcomes.
"""

from __future__ import annotations

import json
import os
import time
import zlib
from dataclasses import dataclass

import numpy as np
import requests

from .verbalize import PromptBundle

__all__ = [
    "LlmConfig",
    "LlmResponse",
    "CorruptionSpec",
    "LlmError",
    "EndpointError",
    "RequestError",
    "EmptyResponseError",
    "LlmTimeoutError",
    "encode_request",
    "complete",
    "mock_complete",
    "CORRUPTIBLE_FIELDS",
]

CORRUPTIBLE_FIELDS = (
    "target_node",
    "factual_class",
    "counterfactual_class",
    "factual_neighbors",
    "counterfactual_neighbors",
    "factual_features",
    "counterfactual_features",
)


class LlmError(RuntimeError):
    """Base class for completion failures."""


class EndpointError(LlmError):
    """Transport failure or persistent 5xx after all retries."""


class RequestError(LlmError):
    """4xx response; the request itself is wrong, retrying cannot help."""


class EmptyResponseError(LlmError):
    """Well-formed response carrying no choices."""


class LlmTimeoutError(LlmError):
    """Request timed out on every attempt."""


@dataclass(frozen=True)
class LlmConfig:
    """Sampling and transport configuration.

    The sampling defaults (temperature 0.1, top_p 0.8, top_k 30, repetition
    penalty 1.05, 2048 max output tokens) are the pinned evaluation
    configuration; override per run via config.
    """

    model_name: str = "qwen2.5-14b-instruct"
    endpoint_url: str | None = None
    temperature: float = 0.1
    top_p: float = 0.8
    top_k: int = 30
    repetition_penalty: float = 1.05
    max_output_tokens: int = 2048
    timeout_seconds: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base_seconds: float = 0.5
    api_key_env: str = "GRAPHCFX_API_KEY"

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1 (it counts total attempts)")
        if self.timeout_seconds <= 0 or self.backoff_base_seconds < 0:
            raise ValueError("timeout must be positive and backoff non-negative")


@dataclass(frozen=True)
class LlmResponse:
    """Verbatim completion text plus transport bookkeeping."""

    raw_text: str
    latency_ms: float
    model_name_echoed: str | None
    attempt_count: int


def encode_request(bundle: PromptBundle, cfg: LlmConfig) -> bytes:
    """Byte-deterministic JSON body for one completion request."""
    body = {
        "model": cfg.model_name,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": bundle.user_text},
        ],
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "top_k": cfg.top_k,
        "repetition_penalty": cfg.repetition_penalty,
        "max_tokens": cfg.max_output_tokens,
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def complete(bundle: PromptBundle, cfg: LlmConfig) -> LlmResponse:
    """POST the bundle to the configured endpoint and return the first choice.

    Retries transport errors and 5xx responses with exponential backoff up
    to cfg.max_retries total attempts. 4xx raises :class:`RequestError`
    immediately; a response with no choices raises
    :class:`EmptyResponseError`.
    """
    if not cfg.endpoint_url:
        raise ValueError("cfg.endpoint_url is required for live completion")
    url = cfg.endpoint_url.rstrip("/") + "/v1/chat/completions"
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = encode_request(bundle, cfg)

    start = time.monotonic()
    timed_out = False
    last_error: Exception | None = None
    for attempt in range(1, cfg.max_retries + 1):
        if attempt > 1 and cfg.backoff_base_seconds:
            time.sleep(cfg.backoff_base_seconds * 2 ** (attempt - 2))
        try:
            resp = requests.post(url, data=body, headers=headers, timeout=cfg.timeout_seconds)
        except requests.Timeout as err:
            timed_out = True
            last_error = err
            continue
        except requests.RequestException as err:
            last_error = err
            continue
        if resp.status_code >= 500:
            last_error = EndpointError(f"server returned {resp.status_code}")
            continue
        if resp.status_code >= 400:
            raise RequestError(f"endpoint rejected request: {resp.status_code} {resp.text[:200]}")
        try:
            payload = resp.json()
        except ValueError as err:
            raise EndpointError(f"endpoint returned non-JSON body: {err}") from err
        choices = payload.get("choices") or []
        if not choices:
            raise EmptyResponseError("response carried no choices")
        content = choices[0].get("message", {}).get("content")
        if content is None:
            raise EmptyResponseError("first choice carried no message content")
        return LlmResponse(
            raw_text=content,
            latency_ms=(time.monotonic() - start) * 1000.0,
            model_name_echoed=payload.get("model"),
            attempt_count=attempt,
        )
    if timed_out:
        raise LlmTimeoutError(
            f"request timed out after {cfg.max_retries} attempts"
        ) from last_error
    raise EndpointError(
        f"endpoint unreachable after {cfg.max_retries} attempts: {last_error}"
    ) from last_error


@dataclass(frozen=True)
class CorruptionSpec:
    """Optional single-field corruption for the mock backend.

    field None means pure echo. Otherwise the named record field is
    perturbed with the given probability: wrong target id, one neighbor
    dropped (or a bogus one added to an empty set), a mangled class name,
    or one extra word.
    """

    field: str | None = None
    probability: float = 0.0

    def __post_init__(self):
        if self.field is not None and self.field not in CORRUPTIBLE_FIELDS:
            raise ValueError(
                f"unknown corruption field {self.field!r}; choose from {CORRUPTIBLE_FIELDS}"
            )
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")


def _corrupt(record: dict, field_name: str, rng) -> None:
    value = record[field_name]
    if field_name == "target_node":
        record[field_name] = value + 1
    elif field_name in ("factual_class", "counterfactual_class"):
        record[field_name] = f"{value} (wrong)"
    elif field_name in ("factual_neighbors", "counterfactual_neighbors"):
        if value:
            drop = int(rng.integers(len(value)))
            record[field_name] = value[:drop] + value[drop + 1 :]
        else:
            record[field_name] = [999999]
    else:  # feature word sets
        extra = "xq_added_word"
        while extra in value:
            extra += "_x"
        record[field_name] = sorted(value + [extra])


def mock_complete(
    bundle: PromptBundle, corruption: CorruptionSpec = CorruptionSpec(), seed: int = 0
) -> LlmResponse:
    """Deterministic offline completion echoing the bundle's ground truth.

    The draw stream is keyed by (seed, target, a digest of the user text),
    so outcomes are reproducible per bundle and independent across bundles.
    """
    truth = bundle.ground_truth
    if truth is None:
        raise ValueError("mock_complete needs a bundle with ground_truth")
    rng = np.random.default_rng(
        [seed, bundle.target, zlib.crc32(bundle.user_text.encode("utf-8"))]
    )
    record = truth.to_json_dict()
    if corruption.field is not None and rng.random() < corruption.probability:
        _corrupt(record, corruption.field, rng)

    paragraph = (
        f"The target node {record['target_node']} was originally classified as "
        f"\"{truth.factual_class}\". In the counterfactual graph the removed "
        f"connections or words no longer support that class, so the classifier "
        f"assigns \"{truth.counterfactual_class}\" instead."
    )
    raw = (
        paragraph
        + "\n\n```json\n"
        + json.dumps(record, indent=2, sort_keys=True)
        + "\n```\n"
    )
    return LlmResponse(raw_text=raw, latency_ms=0.0, model_name_echoed="mock", attempt_count=1)
