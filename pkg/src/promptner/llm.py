"""Chat-completion clients: a real OpenAI-compatible HTTP client with retry,
rate limiting, and a content-addressed response cache; and a deterministic
mock for offline experiments and tests."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .errors import ConfigError, ProtocolError, TransportError
from .prompting import PromptBundle, render_output_list

logger = logging.getLogger(__name__)

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class GenerationParams:
    model_id: str
    temperature: float = 0.0
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    max_output_tokens: int | None = None

    def __post_init__(self):
        for name in ("temperature", "top_p", "frequency_penalty", "presence_penalty"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")


GPT4_PRESET = GenerationParams(model_id="gpt-4", temperature=0.2, top_p=0.1)
GPT35_PRESET = GenerationParams(model_id="gpt-3.5-turbo", temperature=0.2, top_p=0.1)
LLAMA3_PRESET = GenerationParams(model_id="Meta-Llama-3-70B-Instruct",
                                 temperature=0.5, top_p=0.95)
PARAM_PRESETS = {"gpt-4": GPT4_PRESET, "gpt-3.5": GPT35_PRESET, "llama-3": LLAMA3_PRESET}


@dataclass
class CompletionRecord:
    prompt_digest: str
    raw_text: str
    latency_ms: float
    attempt_count: int
    endpoint: str


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    max_delay: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.base_delay * 2 ** (attempt - 1), self.max_delay)


def prompt_digest(bundle: PromptBundle, params: GenerationParams) -> str:
    payload = json.dumps({
        "system": bundle.system_message,
        "user": bundle.user_message,
        "params": {
            "model_id": params.model_id,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
            "max_output_tokens": params.max_output_tokens,
        },
    }, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Completer(Protocol):
    def complete(self, bundle: PromptBundle, params: GenerationParams,
                 policy: RetryPolicy | None = None) -> CompletionRecord:
        ...


def _requests_transport(url: str, body: dict, headers: dict, timeout: float):
    import requests

    try:
        resp = requests.post(url, json=body, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise ConnectionError(str(exc)) from exc
    try:
        payload = resp.json()
    except ValueError:
        payload = None
    return resp.status_code, payload


class ChatClient:
    """OpenAI-compatible chat client with bounded concurrency and caching.

    The transport is injectable so tests can observe retries and in-flight
    counts without a network.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 cache_dir: str | Path | None = None, max_concurrency: int = 4,
                 timeout: float = 60.0,
                 transport: Callable | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        import os

        self.endpoint = endpoint or os.environ.get("PROMPTNER_LLM_ENDPOINT", "")
        self.api_key = api_key or os.environ.get(
            "PROMPTNER_API_KEY", os.environ.get("OPENAI_API_KEY", ""))
        if not self.endpoint:
            raise ConfigError(
                "no endpoint configured (set PROMPTNER_LLM_ENDPOINT or pass endpoint=)")
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._transport = transport or _requests_transport
        self._sleep = sleep
        self.timeout = timeout

    def _cache_path(self, digest: str) -> Path | None:
        return self.cache_dir / f"{digest}.json" if self.cache_dir else None

    def cached(self, digest: str) -> CompletionRecord | None:
        path = self._cache_path(digest)
        if path is None or not path.exists():
            return None
        payload = json.loads(path.read_text(encoding="utf-8"))
        return CompletionRecord(
            prompt_digest=digest, raw_text=payload["raw_text"], latency_ms=0.0,
            attempt_count=payload.get("attempt_count", 1),
            endpoint=payload.get("endpoint", self.endpoint))

    def _cache_put(self, record: CompletionRecord) -> None:
        path = self._cache_path(record.prompt_digest)
        if path is None:
            return
        path.write_text(json.dumps({
            "raw_text": record.raw_text,
            "attempt_count": record.attempt_count,
            "endpoint": record.endpoint,
        }, sort_keys=True), encoding="utf-8")

    def complete(self, bundle: PromptBundle, params: GenerationParams,
                 policy: RetryPolicy | None = None) -> CompletionRecord:
        policy = policy or RetryPolicy()
        digest = prompt_digest(bundle, params)
        hit = self.cached(digest)
        if hit is not None:
            return hit

        messages = []
        if bundle.system_message:
            messages.append({"role": "system", "content": bundle.system_message})
        messages.append({"role": "user", "content": bundle.user_message})
        max_tokens = params.max_output_tokens
        if max_tokens is None and bundle.query_token_count:
            max_tokens = 4 * bundle.query_token_count  # room for the label list
        body = {
            "model": params.model_id,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
        }
        if max_tokens is not None:
            body["max_tokens"] = max_tokens
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        started = time.perf_counter()
        last_status: int | None = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._semaphore:
                    status, payload = self._transport(
                        self.endpoint, body, headers, self.timeout)
            except ConnectionError as exc:
                last_status = None
                if attempt == policy.max_attempts:
                    raise TransportError(f"connection failed: {exc}") from exc
                logger.warning("attempt %d failed (%s); retrying in %.1fs",
                               attempt, exc, policy.delay(attempt))
                self._sleep(policy.delay(attempt))
                continue
            if status == 200:
                try:
                    text = payload["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError):
                    raise ProtocolError(f"unexpected response body: {payload!r}")
                if not isinstance(text, str):
                    raise ProtocolError("first-choice content is not text")
                record = CompletionRecord(
                    prompt_digest=digest, raw_text=text,
                    latency_ms=(time.perf_counter() - started) * 1000.0,
                    attempt_count=attempt, endpoint=self.endpoint)
                self._cache_put(record)
                return record
            last_status = status
            if status in RETRYABLE_STATUSES and attempt < policy.max_attempts:
                logger.warning("endpoint returned %d; retrying in %.1fs",
                               status, policy.delay(attempt))
                self._sleep(policy.delay(attempt))
                continue
            raise TransportError(f"endpoint returned {status}", status=status)
        raise TransportError("retries exhausted", status=last_status)


class MockBehavior(str, Enum):
    GOLD_ECHO = "gold_echo"
    CORRUPT = "corrupt"
    FIXTURE = "fixture"


def corrupt_labels(labels: Sequence[str], alphabet: Sequence[str], rate: float,
                   seed: int, key: str) -> list[str]:
    """Flip each label to a seeded-random wrong label with probability rate.

    The RNG stream depends only on (seed, key), so the same sentence corrupts
    identically no matter when or how often it is requested.
    """
    rng = random.Random(f"{seed}:{key}")
    out = []
    for label in labels:
        if rate > 0 and rng.random() < rate:
            out.append(rng.choice([l for l in alphabet if l != label]))
        else:
            out.append(label)
    return out


class MockLLM:
    """Offline completer: echoes gold labels, corrupts them, or replays fixtures.

    gold_echo and corrupt need the query's gold labels registered out-of-band
    (the runner knows them; the prompt deliberately does not contain them).
    """

    def __init__(self, behavior: MockBehavior | str = MockBehavior.GOLD_ECHO,
                 rate: float = 0.0, seed: int = 0,
                 fixtures: dict[str, str] | None = None,
                 alphabet: Sequence[str] = ()):
        self.behavior = MockBehavior(behavior)
        self.rate = rate
        self.seed = seed
        self.fixtures = fixtures or {}
        self.alphabet = tuple(alphabet)
        self._gold: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {}
        self.emitted: dict[str, tuple[str, ...]] = {}

    def register_gold(self, sentence_id: str, texts: Sequence[str],
                      labels: Sequence[str]) -> None:
        self._gold[sentence_id] = (tuple(texts), tuple(labels))

    def register_sentences(self, sentences) -> None:
        for s in sentences:
            self.register_gold(s.id, s.texts, s.labels)

    def complete(self, bundle: PromptBundle, params: GenerationParams,
                 policy: RetryPolicy | None = None) -> CompletionRecord:
        digest = prompt_digest(bundle, params)
        if self.behavior is MockBehavior.FIXTURE:
            if digest not in self.fixtures:
                raise ConfigError(f"no fixture response for digest {digest}")
            text = self.fixtures[digest]
        else:
            if bundle.query_id is None or bundle.query_id not in self._gold:
                raise ConfigError(
                    f"gold labels not registered for query {bundle.query_id!r}")
            texts, labels = self._gold[bundle.query_id]
            if self.behavior is MockBehavior.CORRUPT:
                if not self.alphabet:
                    raise ConfigError("corrupt behavior needs a label alphabet")
                labels = tuple(corrupt_labels(
                    labels, self.alphabet, self.rate, self.seed, bundle.query_id))
            self.emitted[bundle.query_id] = labels
            text = render_output_list(texts, labels)
        return CompletionRecord(
            prompt_digest=digest, raw_text=text, latency_ms=0.0,
            attempt_count=1, endpoint="mock")
