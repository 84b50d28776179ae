"""Minimal zero-shot prompting of a chat-completion backend and reply parsing."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Union

from .corpus import ClinicalNote

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_API_KEY_ENV = "LLM_API_KEY"

FIELD_LABELS: tuple[tuple[str, str], ...] = (
    ("age", "Age"),
    ("gender", "Gender"),
    ("ethnicity", "Ethnicity"),
    ("social_history", "Social History"),
    ("family_history", "Family History"),
)

DEFAULT_SYSTEM_PROMPT = (
    "You are an annotator of clinical notes. Read the note and extract the "
    "patient's information. Respond in exactly this format, one line each, "
    "writing N/A when the information is not mentioned:\n"
    "Age: <text>\n"
    "Gender: <text>\n"
    "Ethnicity: <text>\n"
    "Social History: <text>\n"
    "Family History: <text>"
)


class BackendError(RuntimeError):
    """Non-retryable backend failure."""

    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class TransientBackendError(BackendError):
    """Failure worth retrying (timeouts, 429, 5xx)."""


class AuthenticationError(BackendError):
    """Credentials rejected; never retried."""


class TransportError(BackendError):
    """Retries exhausted."""

    def __init__(self, message: str, status: Optional[int], attempts: int):
        super().__init__(message, status)
        self.attempts = attempts


class UnparseableReplyError(ValueError):
    def __init__(self, note_id: str):
        super().__init__(f"reply for note {note_id!r} contains none of the expected labels")
        self.note_id = note_id


@dataclass(frozen=True)
class ChatRequest:
    system_message: str
    user_message: str
    model_id: str
    temperature: float = 0.0
    # routing key for persistence and mocks; not sent on the wire
    note_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    def payload(self) -> dict:
        return {
            "model": self.model_id,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": self.system_message},
                {"role": "user", "content": self.user_message},
            ],
        }


@dataclass(frozen=True)
class RawExtraction:
    note_id: str
    raw_text: str
    attempt_count: int = 1


@dataclass(frozen=True)
class ExtractionRecord:
    note_id: str
    age: Optional[str] = None
    gender: Optional[str] = None
    ethnicity: Optional[str] = None
    social_history: Optional[str] = None
    family_history: Optional[str] = None
    ignored_lines: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, record: Mapping) -> "ExtractionRecord":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in record.items() if k in known})


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = DEFAULT_ENDPOINT
    api_key_env_name: str = DEFAULT_API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not 0 <= self.max_retries <= 10:
            raise ValueError("max_retries must lie in [0, 10]")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be non-negative")


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


def build_prompt(
    note: ClinicalNote,
    model_id: str = DEFAULT_MODEL,
    temperature: float = 0.0,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
) -> ChatRequest:
    return ChatRequest(
        system_message=system_prompt,
        user_message=note.text,
        model_id=model_id,
        temperature=temperature,
        note_id=note.note_id,
    )


class HTTPChatBackend:
    """Chat-completions endpoint over HTTP (OpenAI-compatible request shape)."""

    def __init__(self, config: BackendConfig, client=None):
        import httpx

        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env_name, "").strip()
        if not key:
            raise AuthenticationError(
                f"environment variable {self.config.api_key_env_name} is not set"
            )
        return key

    def complete(self, request: ChatRequest) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self._api_key()}"}
        try:
            resp = self._client.post(self.config.endpoint_url, json=request.payload(), headers=headers)
        except httpx.TimeoutException as exc:
            raise TransientBackendError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc

        status = resp.status_code
        if status in (401, 403):
            raise AuthenticationError(f"backend rejected credentials (HTTP {status})", status)
        if status == 408 or status == 429 or status >= 500:
            raise TransientBackendError(f"HTTP {status}", status)
        if status >= 400:
            raise BackendError(f"HTTP {status}: {resp.text[:200]}", status)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}", status) from exc


class MockBackend:
    """Canned replies keyed by note_id, falling back to the note text."""

    def __init__(self, replies: Mapping[str, str]):
        self.replies = dict(replies)
        self.calls: list[ChatRequest] = []

    @classmethod
    def from_fixture(cls, path: Union[str, Path]) -> "MockBackend":
        """Load a JSONL fixture of ``{"note_id" | "text": ..., "reply": ...}`` lines."""
        replies = {}
        with Path(path).open(encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                record = json.loads(line)
                key = record.get("note_id", record.get("text"))
                if key is None or "reply" not in record:
                    raise ValueError(f"{path}:{lineno}: mock record needs note_id/text and reply")
                replies[key] = record["reply"]
        return cls(replies)

    def complete(self, request: ChatRequest) -> str:
        self.calls.append(request)
        for key in (request.note_id, request.user_message):
            if key in self.replies:
                return self.replies[key]
        raise BackendError(f"mock backend has no reply for note {request.note_id!r}")


def extract(
    request: ChatRequest,
    backend: ChatBackend,
    max_retries: int = 3,
    backoff_base: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> RawExtraction:
    """Send one request, retrying transient failures with exponential backoff."""
    attempts = 0
    while True:
        attempts += 1
        try:
            reply = backend.complete(request)
        except TransientBackendError as exc:
            if attempts > max_retries:
                raise TransportError(
                    f"gave up on note {request.note_id!r} after {attempts} attempts: {exc}",
                    exc.status,
                    attempts,
                ) from exc
            delay = backoff_base * 2 ** (attempts - 1)
            log.warning("note %s attempt %d failed (%s); retrying in %.2fs",
                        request.note_id, attempts, exc, delay)
            sleep(delay)
            continue
        return RawExtraction(note_id=request.note_id, raw_text=reply, attempt_count=attempts)


# -- reply parsing ------------------------------------------------------------

_LABEL_RE = re.compile(
    r"^[ \t]*(?:[-*•][ \t]*)?(?:\*\*)?[ \t]*"
    r"(age|gender|ethnicity|social[ _]history|family[ _]history)"
    r"[ \t]*(?:\*\*)?[ \t]*:(?:\*\*)?",
    re.IGNORECASE | re.MULTILINE,
)
_NULL_VALUES = {"", "n/a", "none"}


def _label_field(label: str) -> str:
    return re.sub(r"[ _]+", "_", label.lower())


def _is_null(value: str) -> bool:
    return value.strip().rstrip(".").strip().lower() in _NULL_VALUES


def parse_output(raw: RawExtraction) -> ExtractionRecord:
    """Scan the reply for the five labels and capture each labelled value.

    A value runs from the colon to the next label line or blank line,
    whichever comes first; anything else is counted in ``ignored_lines``.
    """
    text = raw.raw_text
    matches = list(_LABEL_RE.finditer(text))
    if not matches:
        raise UnparseableReplyError(raw.note_id)

    values: dict[str, Optional[str]] = {}
    ignored = _count_content_lines(text[: matches[0].start()])
    for i, match in enumerate(matches):
        name = _label_field(match.group(1))
        stop = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[match.end():stop]
        blank = re.search(r"\n[ \t]*\n", body)
        if blank:
            ignored += _count_content_lines(body[blank.end():])
            body = body[: blank.start()]
        if name in values:
            # repeated label: keep the first
            ignored += _count_content_lines(match.group(0) + body)
            continue
        values[name] = None if _is_null(body) else body.strip()

    if ignored:
        log.debug("note %s: %d unlabelled reply lines ignored", raw.note_id, ignored)
    return ExtractionRecord(note_id=raw.note_id, ignored_lines=ignored, **values)


def _count_content_lines(chunk: str) -> int:
    return sum(1 for line in chunk.splitlines() if line.strip())


def format_record(record: ExtractionRecord) -> str:
    """Render a record in the canonical five-line reply format."""
    return "\n".join(
        f"{label}: {getattr(record, name) if getattr(record, name) is not None else 'N/A'}"
        for name, label in FIELD_LABELS
    )


# -- corpus driver ------------------------------------------------------------


@dataclass
class ExtractionOutcome:
    note_id: str
    raw: Optional[RawExtraction] = None
    record: Optional[ExtractionRecord] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.record is not None


def run_extraction(
    notes: Iterable[ClinicalNote],
    backend: ChatBackend,
    model_id: str = DEFAULT_MODEL,
    temperature: float = 0.0,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
    max_retries: int = 3,
    backoff_base: float = 1.0,
    parallel: int = 4,
    sleep: Callable[[float], None] = time.sleep,
) -> list[ExtractionOutcome]:
    """Extract every note, one request per note, at most ``parallel`` in flight.

    Per-note transport and parse failures are recorded on the outcome.
    Authentication failures propagate immediately.
    """
    notes = list(notes)

    def one(note: ClinicalNote) -> ExtractionOutcome:
        request = build_prompt(note, model_id, temperature, system_prompt)
        outcome = ExtractionOutcome(note.note_id)
        try:
            outcome.raw = extract(request, backend, max_retries, backoff_base, sleep)
            outcome.record = parse_output(outcome.raw)
        except AuthenticationError:
            raise
        except (BackendError, UnparseableReplyError) as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
        return outcome

    if parallel <= 1:
        return [one(note) for note in notes]
    pool = ThreadPoolExecutor(max_workers=parallel)
    try:
        futures = [pool.submit(one, note) for note in notes]
        return [f.result() for f in futures]
    except AuthenticationError:
        pool.shutdown(wait=False, cancel_futures=True)
        raise
    finally:
        pool.shutdown(wait=True)
