"""Chat-completion access for the generator and evaluator roles.

Three backends sit behind one ``Gateway.complete`` call:

* live   -- an OpenAI-compatible ``/chat/completions`` endpoint over HTTP
* mock   -- an ordered rule list, first matching rule answers
* replay -- lookup in a recorded cassette (JSON lines)

Any non-replay call can additionally be recorded into the active cassette.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence, Union

import httpx

from .errors import (
    CassetteMissError,
    ConfigurationError,
    EmptyCompletionError,
    MockNoMatchError,
    RetriesExhaustedError,
)

logger = logging.getLogger(__name__)

Role = Literal["generator", "evaluator"]
Backend = Literal["live", "mock", "replay"]
Message = tuple[str, str]  # (speaker tag, text)

API_KEY_ENV = "VERA_API_KEY"
_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ModelProfile:
    """One configured model.

    ``endpoint`` is either an http(s) base URL (live backend), ``mock:<name>``
    for a registered scripted backend, or ``replay``.
    """

    name: str
    role: Role
    endpoint: str
    model: str | None = None
    temperature: float | None = None
    max_output_tokens: int = 1024
    request_timeout: float = 60.0
    max_retries: int = 2
    api_key_env: str = API_KEY_ENV

    def __post_init__(self) -> None:
        if self.role not in ("generator", "evaluator"):
            raise ConfigurationError(f"profile {self.name!r}: unknown role {self.role!r}")
        if self.temperature is None:
            # evaluator defaults to greedy decoding; generator keeps a mild default
            object.__setattr__(self, "temperature", 0.0 if self.role == "evaluator" else 0.7)
        if self.temperature < 0:
            raise ConfigurationError(f"profile {self.name!r}: temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ConfigurationError(f"profile {self.name!r}: max_output_tokens must be positive")
        if self.max_retries < 0:
            raise ConfigurationError(f"profile {self.name!r}: max_retries must be >= 0")

    @property
    def model_name(self) -> str:
        return self.model or self.name

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "endpoint": self.endpoint,
            "model": self.model,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "request_timeout": self.request_timeout,
            "max_retries": self.max_retries,
            "api_key_env": self.api_key_env,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelProfile":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def check_unique_names(profiles: Iterable[ModelProfile]) -> None:
    seen: set[str] = set()
    for p in profiles:
        if p.name in seen:
            raise ConfigurationError(f"duplicate profile name {p.name!r}")
        seen.add(p.name)


@dataclass(frozen=True)
class ChatExchange:
    request: tuple[Message, ...]
    response_text: str
    latency: float = 0.0
    token_usage: tuple[int, int] = (0, 0)
    backend: Backend = "mock"

    def __post_init__(self) -> None:
        if not self.request:
            raise ValueError("request must contain at least one message")
        if self.request[-1][0] != "user":
            raise ValueError("final request message must carry the user role")

    def to_dict(self) -> dict:
        return {
            "request": [{"role": r, "content": c} for r, c in self.request],
            "response_text": self.response_text,
            "latency": self.latency,
            "token_usage": {"prompt_tokens": self.token_usage[0], "completion_tokens": self.token_usage[1]},
            "backend": self.backend,
        }


def _as_messages(messages: Sequence) -> tuple[Message, ...]:
    out = []
    for m in messages:
        if isinstance(m, dict):
            out.append((str(m["role"]), str(m["content"])))
        else:
            role, content = m
            out.append((str(role), str(content)))
    return tuple(out)


def fingerprint(messages: Sequence) -> str:
    """Stable hash of a message list.

    Trailing whitespace of each message is ignored; order, speaker tags and
    case are significant.
    """
    msgs = _as_messages(messages)
    if not msgs:
        raise ValueError("cannot fingerprint an empty message list")
    normalized = [[role, text.rstrip()] for role, text in msgs]
    blob = json.dumps(normalized, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- cassette ------------------------------------------------------------


@dataclass
class CassetteEntry:
    fingerprint: str
    exchange: ChatExchange

    def to_json(self) -> str:
        ex = self.exchange
        record = {
            "fingerprint": self.fingerprint,
            "request": [{"role": r, "content": c} for r, c in ex.request],
            "response_text": ex.response_text,
            "token_usage": {"prompt_tokens": ex.token_usage[0], "completion_tokens": ex.token_usage[1]},
            "latency": ex.latency,
        }
        return json.dumps(record, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CassetteEntry":
        rec = json.loads(line)
        usage = rec.get("token_usage") or {}
        ex = ChatExchange(
            request=_as_messages(rec["request"]),
            response_text=rec["response_text"],
            latency=float(rec.get("latency", 0.0)),
            token_usage=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            backend="replay",
        )
        return cls(rec["fingerprint"], ex)


class Cassette:
    """Ordered record of exchanges, persisted as UTF-8 JSON lines."""

    def __init__(self, entries: Iterable[CassetteEntry] = ()) -> None:
        self.entries: list[CassetteEntry] = list(entries)
        self._lock = threading.Lock()
        self._cursors: dict[str, int] = defaultdict(int)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, exchange: ChatExchange) -> CassetteEntry:
        entry = CassetteEntry(fingerprint(exchange.request), exchange)
        with self._lock:
            self.entries.append(entry)
        return entry

    def rewind(self) -> None:
        with self._lock:
            self._cursors.clear()

    def lookup(self, fp: str) -> ChatExchange:
        """Return the next recorded exchange for ``fp``.

        Duplicate fingerprints replay in recorded order; once exhausted the
        last one keeps being returned.
        """
        with self._lock:
            matches = [e for e in self.entries if e.fingerprint == fp]
            if not matches:
                raise CassetteMissError(fp)
            i = self._cursors[fp]
            self._cursors[fp] = i + 1
            entry = matches[min(i, len(matches) - 1)]
        ex = entry.exchange
        return ChatExchange(ex.request, ex.response_text, ex.latency, ex.token_usage, "replay")

    def dumps(self) -> str:
        with self._lock:
            return "".join(e.to_json() + "\n" for e in self.entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Cassette":
        return cls(CassetteEntry.from_json(line) for line in text.splitlines() if line.strip())

    @classmethod
    def load(cls, path: str | Path) -> "Cassette":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# --- mock backend --------------------------------------------------------

Matcher = Union[str, "re.Pattern[str]", Callable[[tuple[Message, ...]], bool]]
Responder = Union[str, Callable[[tuple[Message, ...]], str]]


def render_prompt(messages: Sequence[Message]) -> str:
    return "\n\n".join(f"[{role}]\n{text}" for role, text in messages)


class MockBackend:
    """Scripted model: ordered ``(matcher, response)`` rules, first match wins.

    A string matcher is a regular expression searched in the final user
    message; a callable receives the whole message tuple.  Responses may be
    fixed strings or callables of the messages.  No match is an error.
    """

    def __init__(self, rules: Iterable[tuple[Matcher, Responder]] = ()) -> None:
        self.rules: list[tuple[Matcher, Responder]] = list(rules)
        self.calls = 0
        self._lock = threading.Lock()

    def add(self, matcher: Matcher, response: Responder) -> "MockBackend":
        self.rules.append((matcher, response))
        return self

    def _matches(self, matcher: Matcher, messages: tuple[Message, ...]) -> bool:
        if callable(matcher) and not isinstance(matcher, re.Pattern):
            return bool(matcher(messages))
        pattern = matcher if isinstance(matcher, re.Pattern) else re.compile(matcher, re.S)
        return pattern.search(messages[-1][1]) is not None

    def respond(self, messages: tuple[Message, ...]) -> str:
        with self._lock:
            self.calls += 1
        for matcher, response in self.rules:
            if self._matches(matcher, messages):
                return response(messages) if callable(response) else response
        tail = messages[-1][1][-200:]
        raise MockNoMatchError(f"no mock rule matched request ending: {tail!r}")


# --- gateway -------------------------------------------------------------


def _approx_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class Gateway:
    """Routes ``complete`` calls to the backend a profile names.

    ``cassette_mode`` is ``"off"``, ``"record"`` (append every non-replay
    exchange) or ``"replay"`` (answer every call from the cassette, whatever
    the profile endpoint says).
    """

    mocks: dict[str, MockBackend] = field(default_factory=dict)
    cassette: Cassette | None = None
    cassette_mode: Literal["off", "record", "replay"] = "off"
    http_client: httpx.Client | None = None
    retry_backoff: float = 0.5
    calls_by_profile: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def __post_init__(self) -> None:
        if self.cassette_mode != "off" and self.cassette is None:
            self.cassette = Cassette()
        self._lock = threading.Lock()

    def register_mock(self, name: str, backend: MockBackend) -> MockBackend:
        self.mocks[name] = backend
        return backend

    def call_count(self, profile: ModelProfile | str) -> int:
        name = profile if isinstance(profile, str) else profile.name
        return self.calls_by_profile.get(name, 0)

    def complete(self, profile: ModelProfile, messages: Sequence) -> ChatExchange:
        msgs = _as_messages(messages)
        if not msgs:
            raise ValueError("messages must be non-empty")
        if msgs[-1][0] != "user":
            raise ValueError("final message must carry the user role")
        with self._lock:
            self.calls_by_profile[profile.name] += 1

        if self.cassette_mode == "replay" or profile.endpoint == "replay":
            if self.cassette is None:
                raise ConfigurationError("replay requested but no cassette loaded")
            exchange = self.cassette.lookup(fingerprint(msgs))
        elif profile.endpoint.startswith("mock:"):
            exchange = self._mock(profile, msgs)
        elif profile.endpoint.startswith(("http://", "https://")):
            exchange = self._live(profile, msgs)
        else:
            raise ConfigurationError(f"profile {profile.name!r}: cannot resolve endpoint {profile.endpoint!r}")

        if not exchange.response_text.strip():
            raise EmptyCompletionError(f"{profile.name}: model returned an empty completion")
        if self.cassette_mode == "record" and exchange.backend != "replay":
            # appended once per logical call, after retries settled
            self.cassette.append(exchange)
        return exchange

    def _mock(self, profile: ModelProfile, msgs: tuple[Message, ...]) -> ChatExchange:
        key = profile.endpoint[len("mock:"):]
        backend = self.mocks.get(key)
        if backend is None:
            raise ConfigurationError(f"profile {profile.name!r}: no mock backend registered as {key!r}")
        text = backend.respond(msgs)
        usage = (sum(_approx_tokens(t) for _, t in msgs), _approx_tokens(text))
        return ChatExchange(msgs, text, 0.0, usage, "mock")

    def _live(self, profile: ModelProfile, msgs: tuple[Message, ...]) -> ChatExchange:
        api_key = os.environ.get(profile.api_key_env)
        if not api_key:
            raise ConfigurationError(f"profile {profile.name!r}: environment variable {profile.api_key_env} is not set")
        url = profile.endpoint.rstrip("/") + "/chat/completions"
        payload = {
            "model": profile.model_name,
            "messages": [{"role": r, "content": c} for r, c in msgs],
            "temperature": profile.temperature,
            "max_tokens": profile.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {api_key}"}
        client = self.http_client or httpx.Client()
        last_error: BaseException | None = None
        attempts = profile.max_retries + 1
        try:
            for attempt in range(attempts):
                if attempt:
                    time.sleep(self.retry_backoff * 2 ** (attempt - 1))
                start = time.perf_counter()
                try:
                    resp = client.post(url, json=payload, headers=headers, timeout=profile.request_timeout)
                except httpx.TransportError as exc:
                    last_error = exc
                    logger.warning("%s: transport error on attempt %d: %s", profile.name, attempt + 1, exc)
                    continue
                if resp.status_code in _RETRY_STATUS:
                    last_error = httpx.HTTPStatusError(f"HTTP {resp.status_code}", request=resp.request, response=resp)
                    logger.warning("%s: HTTP %d on attempt %d", profile.name, resp.status_code, attempt + 1)
                    continue
                resp.raise_for_status()
                latency = time.perf_counter() - start
                body = resp.json()
                text = (body.get("choices") or [{}])[0].get("message", {}).get("content") or ""
                usage = body.get("usage") or {}
                return ChatExchange(
                    msgs,
                    text,
                    latency,
                    (int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
                    "live",
                )
        finally:
            if self.http_client is None:
                client.close()
        raise RetriesExhaustedError(profile.name, attempts, last_error)
