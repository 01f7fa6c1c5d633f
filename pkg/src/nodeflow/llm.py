"""Chat-completion access shared by the agents and the judge.

Every provider implements ``send(request) -> str``. :class:`LLMClient` adds
retries with exponential backoff, a bound on in-flight requests and a JSONL
transcript of every attempt. Record/replay providers make agent runs
reproducible offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Union

import requests

log = logging.getLogger(__name__)

KNOWN_TAGS = ("thought", "plan", "action", "code", "function", "principle", "explanation", "analysis", "judgment")


class LLMError(RuntimeError):
    pass


class TransientError(LLMError):
    """Worth retrying: rate limits, 5xx, dropped connections."""


class AuthenticationError(LLMError):
    pass


class ContextLengthError(LLMError):
    pass


class RetriesExhausted(LLMError):
    pass


class ReplayMissing(LLMError):
    pass


class TagError(ValueError):
    pass


class TagMissing(TagError):
    pass


class UnterminatedTag(TagError):
    pass


class JudgmentError(ValueError):
    pass


# -- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.parts:
            raise ValueError("a message needs at least one part")
        if self.role != "user" and any(isinstance(p, ImagePart) for p in self.parts):
            raise ValueError("images are only allowed in user messages")

    @classmethod
    def user(cls, text: str, images: Iterable[tuple[str, bytes]] = ()) -> "ChatMessage":
        return cls("user", (TextPart(text),) + tuple(ImagePart(mt, data) for mt, data in images))

    @classmethod
    def system(cls, text: str) -> "ChatMessage":
        return cls("system", (TextPart(text),))

    @property
    def text(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    def to_json(self) -> dict:
        if len(self.parts) == 1 and isinstance(self.parts[0], TextPart):
            return {"role": self.role, "content": self.parts[0].text}
        content = []
        for p in self.parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                url = f"data:{p.media_type};base64,{base64.b64encode(p.data).decode()}"
                content.append({"type": "image_url", "image_url": {"url": url}})
        return {"role": self.role, "content": content}


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 4096
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def to_json(self) -> dict:
        body = {
            "model": self.model,
            "messages": [m.to_json() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body

    def digest(self) -> str:
        # images enter through their own digest so the key stays small
        messages = []
        for m in self.messages:
            parts = []
            for p in m.parts:
                if isinstance(p, TextPart):
                    parts.append(["text", p.text])
                else:
                    parts.append(["image", p.media_type, hashlib.sha256(p.data).hexdigest()])
            messages.append([m.role, parts])
        key = [self.model, messages, self.temperature, self.max_tokens, self.seed]
        return hashlib.sha256(json.dumps(key, ensure_ascii=False).encode()).hexdigest()


def user_request(model: str, text: str, images: Iterable[tuple[str, bytes]] = (), **kw) -> CompletionRequest:
    return CompletionRequest(model, (ChatMessage.user(text, images),), **kw)


# -- providers --------------------------------------------------------------


class Provider(Protocol):
    def send(self, request: CompletionRequest) -> str: ...


class HttpChatProvider:
    """OpenAI-compatible ``POST {base_url}/chat/completions``."""

    def __init__(self, base_url: str, api_key: Optional[str] = None, timeout: float = 300.0,
                 session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()
        self._api_key = api_key

    def send(self, request: CompletionRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions", json=request.to_json(), headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransientError(f"transport failure: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"provider rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            body = resp.text[:500]
            if "context_length" in body or "maximum context" in body or "too long" in body:
                raise ContextLengthError(body)
            raise LLMError(f"HTTP {resp.status_code}: {body}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientError(f"malformed response: {exc}") from exc


ScriptItem = Union[str, Exception, Callable[[CompletionRequest], str]]


class ScriptedProvider:
    """Returns canned responses in order. Items may be strings, exceptions to
    raise, or callables that build a reply from the request."""

    def __init__(self, items: Iterable[ScriptItem]):
        self.items = list(items)
        self.requests: list[CompletionRequest] = []

    def send(self, request: CompletionRequest) -> str:
        self.requests.append(request)
        if not self.items:
            raise LLMError("scripted provider ran out of responses")
        item = self.items.pop(0)
        if isinstance(item, Exception):
            raise item
        if callable(item):
            return item(request)
        return item


class _OccurrenceCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self._seen: dict[str, int] = defaultdict(int)

    def next(self, digest: str) -> int:
        with self._lock:
            n = self._seen[digest]
            self._seen[digest] += 1
            return n


def replay_path(directory: Path, digest: str, occurrence: int) -> Path:
    return directory / f"{digest}-{occurrence}.json"


class RecordingProvider:
    """Forwards to ``inner`` and saves each reply under the request digest."""

    def __init__(self, inner: Provider, directory: Union[str, Path]):
        self.inner = inner
        self.directory = Path(directory)
        self._counter = _OccurrenceCounter()

    def send(self, request: CompletionRequest) -> str:
        reply = self.inner.send(request)
        digest = request.digest()
        n = self._counter.next(digest)
        self.directory.mkdir(parents=True, exist_ok=True)
        record = {
            "request_digest": digest,
            "occurrence": n,
            "model": request.model,
            "prompt": "\n\n".join(m.text for m in request.messages),
            "response": reply,
        }
        replay_path(self.directory, digest, n).write_text(
            json.dumps(record, ensure_ascii=False, indent=1) + "\n", encoding="utf-8"
        )
        return reply


class ReplayProvider:
    """Serves replies recorded by :class:`RecordingProvider`. The n-th
    identical request gets the n-th recording."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self._counter = _OccurrenceCounter()

    def send(self, request: CompletionRequest) -> str:
        digest = request.digest()
        n = self._counter.next(digest)
        path = replay_path(self.directory, digest, n)
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ReplayMissing(f"no recording for request {digest[:12]} (occurrence {n}) in {self.directory}") from None
        return record["response"]


# -- client -----------------------------------------------------------------


class Transcript:
    """Append-only JSONL log of provider attempts; optionally mirrored to disk."""

    def __init__(self, path: Union[str, Path, None] = None):
        self.path = Path(path) if path else None
        self.lines: list[str] = []
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.lines.append(line)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self.lines)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines).encode()).hexdigest()


class LLMClient:
    def __init__(
        self,
        provider: Provider,
        max_attempts: int = 3,
        backoff: float = 1.0,
        transcript: Optional[Transcript] = None,
        concurrency: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.provider = provider
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.transcript = transcript if transcript is not None else Transcript()
        self._slots = threading.BoundedSemaphore(concurrency)
        self._sleep = sleep
        self._seq = 0
        self._seq_lock = threading.Lock()

    def _log(self, request: CompletionRequest, purpose: str, attempt: int, **fields) -> None:
        with self._seq_lock:
            self._seq += 1
            seq = self._seq
        record = {
            "seq": seq,
            "purpose": purpose,
            "attempt": attempt,
            "model": request.model,
            "request_digest": request.digest(),
            "prompt": "\n\n".join(m.text for m in request.messages),
        }
        record.update(fields)
        self.transcript.append(record)

    def complete(self, request: CompletionRequest, purpose: str = "") -> str:
        last: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._slots:
                    reply = self.provider.send(request)
            except TransientError as exc:
                last = exc
                self._log(request, purpose, attempt, status="error", error=str(exc))
                log.warning("%s attempt %d/%d failed: %s", purpose or "completion", attempt, self.max_attempts, exc)
                if attempt < self.max_attempts:
                    self._sleep(self.backoff * 2 ** (attempt - 1))
                continue
            except LLMError as exc:
                self._log(request, purpose, attempt, status="error", error=str(exc))
                raise
            self._log(request, purpose, attempt, status="ok", response=reply)
            return reply
        raise RetriesExhausted(f"gave up after {self.max_attempts} attempts: {last}")


# -- tagged responses -------------------------------------------------------


def extract_tag(text: str, tag: str) -> str:
    """Trimmed content of the first ``<tag>...</tag>`` pair."""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    start = text.find(open_tag)
    if start < 0:
        raise TagMissing(f"no <{tag}> tag in response")
    start += len(open_tag)
    end = text.find(close_tag, start)
    if end < 0:
        raise UnterminatedTag(f"<{tag}> is never closed")
    return text[start:end].strip()


def extract_tags(text: str, tags: Iterable[str] = KNOWN_TAGS) -> dict[str, str]:
    found = {}
    for tag in tags:
        try:
            found[tag] = extract_tag(text, tag)
        except TagError:
            pass
    return found


@dataclass(frozen=True)
class TaggedResponse:
    raw: str
    extracted: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, raw: str) -> "TaggedResponse":
        return cls(raw, extract_tags(raw))


def parse_judgment(text: str) -> bool:
    value = extract_tag(text, "judgment").lower()
    if value == "true":
        return True
    if value == "false":
        return False
    raise JudgmentError(f"judgment must be True or False, got {value!r}")
