"""VLM protocol: match decision, missing concepts, retrieval captions.

The protocol is a staged chat conversation.  Each operation rebuilds the
minimal deterministic conversation it needs, so operations stay independently
callable and testable:

  decide_match          user(image + decision text)
  missing_concepts      user(image + decision text), assistant("no"),
                        user(missing-concepts text)
  captions_for_concepts user(missing-concepts text), assistant(concept lines),
                        user(caption-generation text)

The caption request deliberately omits the original prompt and image: the
captions must be standalone retrieval queries, and the concepts arrive as the
assistant's own prior turn.

Retry behavior: the first attempt runs at the policy's initial temperature
(0.0 by default, for consistency); an attempt that yields no concepts or no
captions is retried at the next temperature in the schedule.  When every
attempt fails, the operation falls back to treating the whole prompt as the
single retrieval caption.  Transport failures are different: they abort the
operation instead of burning schedule steps.
"""

from __future__ import annotations

import base64
import json
import mimetypes
import re
from dataclasses import dataclass
from pathlib import Path

import requests

from .errors import ConfigError, TransportError, VlmProtocolError, VlmRefusalError
from .prompts import (
    CAPTION_GENERATION_PROMPT,
    MATCH_DECISION_PROMPT,
    MISSING_CONCEPTS_PROMPT,
    REPHRASE_PROMPT,
)

DEFAULT_MAX_CONCEPTS = 3

_REFUSAL_PHRASE = "unable to respond"
_YES_NO = re.compile(r"[^A-Za-z]*(yes|no)\b", re.IGNORECASE)
_LINE_PREFIX = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


@dataclass(frozen=True)
class MatchDecision:
    matches: bool
    raw_response: str


@dataclass(frozen=True)
class ConceptCaption:
    """A missing concept paired with the standalone caption used to retrieve it."""

    concept: str
    caption: str


@dataclass(frozen=True)
class RetryPolicy:
    max_repetitions: int = 3
    temperature_schedule: tuple[float, ...] = (0.4, 0.7, 1.0)
    initial_temperature: float = 0.0

    def __post_init__(self):
        if len(self.temperature_schedule) != self.max_repetitions:
            raise ConfigError("temperature_schedule length must equal max_repetitions")
        temps = (self.initial_temperature, *self.temperature_schedule)
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ConfigError("temperatures must be strictly increasing across attempts")


@dataclass(frozen=True)
class Attempt:
    temperature: float
    outcome: str  # "ok" | "no-concepts" | "no-captions"


@dataclass
class CaptionBatch:
    captions: list[ConceptCaption]
    count_mismatch: bool = False


@dataclass
class CaptionGenerationResult:
    captions: list[ConceptCaption]
    fallback_used: bool
    attempts: list[Attempt]
    count_mismatch: bool = False


def image_part(ref: str) -> dict:
    """Chat-content image part: URLs and data URIs pass through, local files
    are inlined as base64 data URIs."""
    if not ref:
        raise ValueError("image ref must be non-empty")
    if ref.startswith("data:") or "://" in ref:
        return {"type": "image_url", "image_url": {"url": ref}}
    data = Path(ref).read_bytes()
    mime = mimetypes.guess_type(ref)[0] or "application/octet-stream"
    encoded = base64.b64encode(data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}}


def _text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def _decision_messages(prompt: str, image: str) -> list[dict]:
    return [
        {
            "role": "user",
            "content": [image_part(image), _text_part(MATCH_DECISION_PROMPT.format(prompt=prompt))],
        }
    ]


class HttpVlmClient:
    """Chat-completion client: POST {model, temperature, messages} and read the
    first choice's message content.  Transport errors are retried up to
    `transport_retries` extra times before raising TransportError."""

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        timeout: float = 60.0,
        transport_retries: int = 2,
        api_key: str | None = None,
    ):
        if timeout <= 0:
            raise ConfigError("timeout must be > 0")
        self.endpoint = endpoint
        self.model_name = model_name
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.api_key = api_key

    def chat(self, messages: list[dict], temperature: float = 0.0) -> str:
        body = {"model": self.model_name, "temperature": temperature, "messages": messages}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for _ in range(self.transport_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                payload = resp.json()
                return payload["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last = exc
        raise TransportError(
            f"VLM request failed after {self.transport_retries + 1} attempts: {last}"
        )


class MockVlmClient:
    """Scripted stand-in: responses consumed in order, requests recorded.

    Transcript entries are JSONL objects {"content": ...} for a normal answer
    or {"error": "transport"} to simulate a dead endpoint.  An exhausted
    transcript raises TransportError, which surfaces scripting mistakes as a
    hard failure rather than a silent wrong answer.
    """

    def __init__(self, responses: list | None = None, model_name: str = "mock-vlm"):
        self.responses = list(responses or [])
        self.model_name = model_name
        self.requests: list[dict] = []

    @classmethod
    def from_jsonl(cls, path: str | Path, model_name: str = "mock-vlm") -> "MockVlmClient":
        responses = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line:
                responses.append(json.loads(line))
        return cls(responses, model_name=model_name)

    def chat(self, messages: list[dict], temperature: float = 0.0) -> str:
        body = {"model": self.model_name, "temperature": temperature, "messages": messages}
        self.requests.append(body)
        if not self.responses:
            raise TransportError("mock transcript exhausted")
        entry = self.responses.pop(0)
        if isinstance(entry, str):
            return entry
        if entry.get("error"):
            raise TransportError(f"scripted transport failure: {entry['error']}")
        return entry["content"]


def decide_match(vlm, prompt: str, image: str, temperature: float = 0.0) -> MatchDecision:
    """Ask whether the image matches the prompt; strict leading yes/no parse."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    response = vlm.chat(_decision_messages(prompt, image), temperature=temperature)
    match = _YES_NO.match(response)
    if not match:
        raise VlmProtocolError(
            f"expected a yes/no answer, got {response[:80]!r}", raw_response=response
        )
    return MatchDecision(matches=match.group(1).lower() == "yes", raw_response=response)


def _split_lines(response: str) -> list[str]:
    lines = []
    for raw in response.splitlines():
        line = _LINE_PREFIX.sub("", raw).strip()
        if line:
            lines.append(line)
    return lines


def missing_concepts(
    vlm,
    prompt: str,
    image: str,
    temperature: float,
    max_concepts: int = DEFAULT_MAX_CONCEPTS,
) -> list[str]:
    """Concepts the image is missing, one per response line.

    Refusals ("unable to respond") and empty answers return an empty list,
    which the retry loop treats as a failed attempt.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    messages = _decision_messages(prompt, image) + [
        {"role": "assistant", "content": "no"},
        {"role": "user", "content": [_text_part(MISSING_CONCEPTS_PROMPT)]},
    ]
    response = vlm.chat(messages, temperature=temperature)
    if _REFUSAL_PHRASE in response.lower():
        return []
    return _split_lines(response)[:max_concepts]


def captions_for_concepts(vlm, concepts: list[str], temperature: float) -> CaptionBatch:
    """One standalone retrieval caption per concept, paired by line order.

    A count mismatch pairs up to the shorter list and sets the flag; zero
    parseable captions raises VlmRefusalError (a retryable failure).
    """
    if not concepts:
        raise ValueError("concepts must be non-empty")
    messages = [
        {"role": "user", "content": [_text_part(MISSING_CONCEPTS_PROMPT)]},
        {"role": "assistant", "content": "\n".join(concepts)},
        {"role": "user", "content": [_text_part(CAPTION_GENERATION_PROMPT)]},
    ]
    response = vlm.chat(messages, temperature=temperature)
    if _REFUSAL_PHRASE in response.lower():
        raise VlmRefusalError("VLM refused to produce captions", raw_response=response)
    lines = _split_lines(response)
    if not lines:
        raise VlmRefusalError("zero parseable captions", raw_response=response)
    paired = [ConceptCaption(concept=c, caption=cap) for c, cap in zip(concepts, lines)]
    return CaptionBatch(captions=paired, count_mismatch=len(lines) != len(concepts))


def retrieval_caption_generation(
    vlm,
    prompt: str,
    image: str,
    policy: RetryPolicy = RetryPolicy(),
    max_concepts: int = DEFAULT_MAX_CONCEPTS,
) -> CaptionGenerationResult:
    """Run the concepts->captions loop with rising-temperature retries.

    Attempt 0 runs at the initial temperature; each failed attempt moves to
    the next schedule temperature.  After the schedule is exhausted the
    operation falls back to a single caption equal to the prompt itself
    (fallback_used=True), so callers always get at least one retrieval query.
    TransportError aborts the whole operation.
    """
    attempts: list[Attempt] = []
    for temperature in (policy.initial_temperature, *policy.temperature_schedule):
        concepts = missing_concepts(vlm, prompt, image, temperature, max_concepts)
        if not concepts:
            attempts.append(Attempt(temperature, "no-concepts"))
            continue
        try:
            batch = captions_for_concepts(vlm, concepts, temperature)
        except VlmRefusalError:
            attempts.append(Attempt(temperature, "no-captions"))
            continue
        attempts.append(Attempt(temperature, "ok"))
        return CaptionGenerationResult(
            captions=batch.captions,
            fallback_used=False,
            attempts=attempts,
            count_mismatch=batch.count_mismatch,
        )
    return CaptionGenerationResult(
        captions=[ConceptCaption(concept=prompt, caption=prompt)],
        fallback_used=True,
        attempts=attempts,
    )


def rephrase_prompt(vlm, prompt: str, image: str, temperature: float = 0.0) -> str:
    """Ask for a clearer equivalent prompt (ablation baseline); response verbatim, trimmed."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    messages = [
        {
            "role": "user",
            "content": [image_part(image), _text_part(REPHRASE_PROMPT.format(prompt=prompt))],
        }
    ]
    return vlm.chat(messages, temperature=temperature).strip()
