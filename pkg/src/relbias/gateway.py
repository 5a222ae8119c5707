"""Chat-completion client with retries, rate limiting and record/replay.

Wire format is the OpenAI-style ``POST {base_url}/chat/completions``. A
cassette is a JSONL file with one exchange per line; in REPLAY mode
requests are matched by (model_id, digest of the messages) and a miss
means the rendered prompt has drifted from what was recorded.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

from .prompts import ChatMessage

log = logging.getLogger(__name__)

BACKOFF_BASE = 1.0
BACKOFF_CAP = 60.0


class GatewayError(RuntimeError):
    pass


class AuthError(GatewayError):
    pass


class GatewayTimeout(GatewayError):
    """Transient failures persisted through every retry."""


class MalformedResponse(GatewayError):
    pass


class CassetteMiss(GatewayError):
    pass


class Mode(str, enum.Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str
    temperature: Optional[float] = None  # None: omit from the request, server default applies
    timeout: float = 60.0
    max_retries: int = 5
    api_key_env_var: Optional[str] = "OPENAI_API_KEY"
    requests_per_minute: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Exchange:
    model_id: str
    digest: str
    messages: list
    temperature: Optional[float]
    response_text: str
    latency: float
    attempt_count: int
    timestamp: float
    tag: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)


def _as_dicts(messages: Sequence) -> list[dict]:
    return [m.to_dict() if isinstance(m, ChatMessage) else {"role": m["role"], "content": m["content"]} for m in messages]


def message_digest(messages: Sequence) -> str:
    """SHA-256 over role/content pairs, NUL separated, UTF-8."""
    parts = []
    for m in messages:
        if isinstance(m, ChatMessage):
            parts += [m.role.value, m.content]
        else:
            parts += [m["role"], m["content"]]
    return hashlib.sha256(("\0".join(parts) + "\0").encode("utf-8")).hexdigest()


def build_request_body(config: EndpointConfig, messages: Sequence) -> dict:
    body = {"model": config.model_id, "messages": _as_dicts(messages)}
    if config.temperature is not None:
        body["temperature"] = config.temperature
    return body


def backoff_delay(attempt: int, jitter: random.Random, base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP) -> float:
    """Delay before retry number ``attempt`` (1-based): capped exponential, jittered to 50-100%."""
    return min(cap, base * 2 ** (attempt - 1)) * (0.5 + 0.5 * jitter.random())


class RateLimiter:
    def __init__(self, requests_per_minute: Optional[float], clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


def read_cassette(path: Path) -> list[Exchange]:
    exchanges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                exchanges.append(Exchange(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise GatewayError(f"{path}:{lineno}: bad cassette record: {exc}") from exc
    return exchanges


@dataclass
class _Slot:
    exchanges: list = field(default_factory=list)
    used: int = 0


class Gateway:
    """Thread-safe handle shared by all sessions of a batch."""

    def __init__(
        self,
        config: EndpointConfig,
        mode: "Mode | str" = Mode.LIVE,
        cassette: Optional["str | Path"] = None,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: Optional[int] = None,
    ):
        self.config = config
        self.mode = Mode(mode)
        self.cassette = Path(cassette) if cassette else None
        self._sleep = sleep
        self._jitter = random.Random(jitter_seed)
        self._limiter = RateLimiter(config.requests_per_minute, sleep=sleep)
        self._lock = threading.Lock()
        self._transport = transport
        self._client: Optional[httpx.Client] = None
        self._replay: dict = {}
        self.network_calls = 0

        if self.mode is not Mode.LIVE and self.cassette is None:
            raise ValueError(f"{self.mode.value} mode needs a cassette path")
        if self.mode is Mode.REPLAY:
            if not self.cassette.exists():
                raise FileNotFoundError(f"replay cassette not found: {self.cassette}")
            for ex in read_cassette(self.cassette):
                self._replay.setdefault((ex.model_id, ex.digest), _Slot()).exchanges.append(ex)

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(transport=self._transport, timeout=self.config.timeout)
        return self._client

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def chat_complete(self, messages: Sequence, tag: Optional[str] = None) -> str:
        return self.exchange(messages, tag).response_text

    def exchange(self, messages: Sequence, tag: Optional[str] = None) -> Exchange:
        """Run one request and return the full :class:`Exchange`.

        ``tag`` (e.g. ``"run3/learning/7"``) is stored with recorded
        exchanges and used in replay to pick among identical prompts.
        """
        if self.mode is Mode.REPLAY:
            return self._lookup(messages, tag)
        ex = self._send(messages, tag)
        if self.mode is Mode.RECORD:
            with self._lock:
                with open(self.cassette, "a", encoding="utf-8") as fh:
                    fh.write(ex.to_json() + "\n")
        return ex

    def _lookup(self, messages: Sequence, tag: Optional[str]) -> Exchange:
        digest = message_digest(messages)
        with self._lock:
            slot = self._replay.get((self.config.model_id, digest))
            if slot is None:
                raise CassetteMiss(f"no recorded exchange for model {self.config.model_id} digest {digest[:12]}")
            if tag is not None:
                for ex in slot.exchanges:
                    if ex.tag == tag:
                        return ex
            ex = slot.exchanges[min(slot.used, len(slot.exchanges) - 1)]
            slot.used += 1
            return ex

    def _api_key(self) -> Optional[str]:
        var = self.config.api_key_env_var
        if not var:
            return None
        key = os.environ.get(var)
        if not key:
            raise AuthError(f"environment variable {var} is not set")
        return key

    def _send(self, messages: Sequence, tag: Optional[str]) -> Exchange:
        key = self._api_key()
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        body = build_request_body(self.config, messages)
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        attempts = 0
        last_error = "no attempt made"
        start = time.monotonic()
        while attempts <= self.config.max_retries:
            if attempts:
                delay = backoff_delay(attempts, self._jitter)
                log.warning("retry %d/%d in %.1fs after %s", attempts, self.config.max_retries, delay, last_error)
                self._sleep(delay)
            attempts += 1
            self._limiter.acquire()
            try:
                self.network_calls += 1
                resp = self._http().post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            text = _extract_content(resp)
            return Exchange(
                model_id=self.config.model_id,
                digest=message_digest(messages),
                messages=_as_dicts(messages),
                temperature=self.config.temperature,
                response_text=text,
                latency=round(time.monotonic() - start, 6),
                attempt_count=attempts,
                timestamp=time.time(),
                tag=tag,
            )
        raise GatewayTimeout(f"gave up after {attempts} attempts: {last_error}")


def _extract_content(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"no assistant content in response: {resp.text[:200]}") from exc
    if not isinstance(content, str):
        raise MalformedResponse(f"assistant content is not text: {content!r}")
    return content
