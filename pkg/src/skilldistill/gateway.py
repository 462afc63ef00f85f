"""Uniform black-box completion interface for the four model roles.

A Gateway binds each role (student, teacher, judge, selector) to one
backend: either a generic HTTP chat-completion endpoint or a deterministic
scripted mock for offline runs and tests. Every call is appended to a
transcript, so two runs against the same mock script are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import requests

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 2048
DEFAULT_STRUCTURED_RETRIES = 2

FieldKind = Union[str, tuple[str, Sequence[str]]]


class Role(Enum):
    STUDENT = "student"
    TEACHER = "teacher"
    JUDGE = "judge"
    SELECTOR = "selector"


@dataclass(frozen=True)
class CompletionRequest:
    role: Role
    system_prompt: str
    user_prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0


def fingerprint(req: CompletionRequest) -> str:
    """Stable identity of a request: hash of (role, system, user)."""
    payload = "\x1f".join([req.role.value, req.system_prompt, req.user_prompt])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class GatewayError(RuntimeError):
    pass


class UnconfiguredRoleError(GatewayError):
    pass


class TransportError(GatewayError):
    """Transient backend failure; the gateway retries these."""


class ExhaustedRetriesError(GatewayError):
    pass


class StructuredParseError(GatewayError):
    """No valid structured object could be extracted after all retries."""


@dataclass
class MockRule:
    response: str
    substring: str = ""
    role: Optional[Role] = None
    once: bool = False
    consumed: bool = False

    def matches(self, req: CompletionRequest) -> bool:
        if self.consumed:
            return False
        if self.role is not None and self.role is not req.role:
            return False
        if self.substring:
            haystack = req.system_prompt + "\n" + req.user_prompt
            return self.substring in haystack
        return True


class MockScript:
    """Ordered substring-matching rules with an optional default response.

    Rules are evaluated in declaration order; the first match wins. A rule
    flagged `once` is consumed by its first match, which makes sequences of
    time-varying answers scriptable.
    """

    def __init__(self, rules: Optional[list[MockRule]] = None, default: str = ""):
        self.rules = list(rules or [])
        self.default = default
        self._lock = threading.Lock()

    def add(
        self,
        substring: str,
        response: str,
        role: Optional[Role] = None,
        once: bool = False,
    ) -> "MockScript":
        self.rules.append(
            MockRule(response=response, substring=substring, role=role, once=once)
        )
        return self

    def respond(self, req: CompletionRequest) -> str:
        with self._lock:
            for rule in self.rules:
                if rule.matches(req):
                    if rule.once:
                        rule.consumed = True
                    return rule.response
            return self.default

    @classmethod
    def from_text(cls, text: str) -> "MockScript":
        """Parse the plain-text rules format.

        One rule per line: `role<TAB>flags<TAB>substring<TAB>response`,
        where role is a role name or `*`, flags is `once` or `-`, and both
        substring and response may use `\\n` / `\\t` escapes. A line
        `default<TAB>response` sets the fallback response. Blank lines and
        lines starting with `#` are ignored.
        """
        script = cls()
        for lineno, raw in enumerate(text.split("\n"), start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if parts[0] == "default" and len(parts) == 2:
                script.default = _unescape(parts[1])
                continue
            if len(parts) != 4:
                raise ValueError(
                    f"mock rules line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            role_txt, flags, substring, response = parts
            role = None if role_txt == "*" else Role(role_txt)
            script.add(
                substring=_unescape(substring),
                response=_unescape(response),
                role=role,
                once=(flags == "once"),
            )
        return script

    @classmethod
    def from_path(cls, path: str | Path) -> "MockScript":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _unescape(text: str) -> str:
    return text.replace("\\t", "\t").replace("\\n", "\n")


class RateLimiter:
    """Token bucket; acquire() blocks until a token is available."""

    def __init__(self, rate_per_second: float, burst: int = 1):
        self.rate = rate_per_second
        self.capacity = max(1, burst)
        self._tokens = float(self.capacity)
        self._updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._updated) * self.rate
                )
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class MockBackend:
    def __init__(self, script: MockScript):
        self.script = script

    def complete(self, req: CompletionRequest) -> str:
        return self.script.respond(req)


class HttpChatBackend:
    """Generic chat-completion JSON client (messages array in, text out)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "",
        headers: Optional[dict[str, str]] = None,
        timeout: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()
        api_key = os.environ.get(api_key_env, "") if api_key_env else ""
        template = headers or {
            "Authorization": "Bearer {api_key}",
            "Content-Type": "application/json",
        }
        self.headers = {
            k: v.replace("{api_key}", api_key) for k, v in template.items()
        }

    def complete(self, req: CompletionRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        try:
            response = self.session.post(
                self.endpoint, json=payload, headers=self.headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        if response.status_code >= 500:
            raise TransportError(f"server error {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(
                f"backend error {response.status_code}: {response.text[:500]}"
            )
        body = response.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {body!r:.500}") from exc


@dataclass
class TranscriptEntry:
    role: str
    request_digest: str
    response: str


@dataclass
class RoleConfig:
    backend: object
    rate_limiter: Optional[RateLimiter] = None
    retry_cap: int = 3
    backoff_base: float = 0.5


class Gateway:
    """Routes completion requests to per-role backends with retry and logging."""

    def __init__(self, sleep: Callable[[float], None] = time.sleep):
        self._roles: dict[Role, RoleConfig] = {}
        self._transcript: list[TranscriptEntry] = []
        self._lock = threading.Lock()
        self._sleep = sleep
        self.structured_retries = DEFAULT_STRUCTURED_RETRIES

    def configure(self, role: Role, config: RoleConfig) -> None:
        self._roles[role] = config

    def configure_mock(self, script: MockScript, roles: Optional[Sequence[Role]] = None) -> None:
        backend = MockBackend(script)
        for role in roles or list(Role):
            self.configure(role, RoleConfig(backend=backend))

    @property
    def transcript(self) -> list[TranscriptEntry]:
        return list(self._transcript)

    def complete(self, req: CompletionRequest) -> str:
        config = self._roles.get(req.role)
        if config is None:
            raise UnconfiguredRoleError(f"role {req.role.value} has no backend")
        if config.rate_limiter is not None:
            config.rate_limiter.acquire()
        attempts = max(1, config.retry_cap)
        last_error: Optional[Exception] = None
        for attempt in range(attempts):
            try:
                response = config.backend.complete(req)
                break
            except TransportError as exc:
                last_error = exc
                if attempt + 1 < attempts:
                    delay = config.backoff_base * (2**attempt)
                    logger.warning(
                        "transient %s failure (attempt %d/%d): %s",
                        req.role.value,
                        attempt + 1,
                        attempts,
                        exc,
                    )
                    self._sleep(delay)
        else:
            raise ExhaustedRetriesError(
                f"{req.role.value} backend failed after {attempts} attempts: {last_error}"
            )
        with self._lock:
            self._transcript.append(
                TranscriptEntry(
                    role=req.role.value,
                    request_digest=fingerprint(req),
                    response=response,
                )
            )
        return response

    def complete_structured(
        self, req: CompletionRequest, field_schema: Sequence[tuple[str, FieldKind]]
    ) -> dict[str, str]:
        """Request a completion and extract one validated key-value object.

        Tolerates surrounding prose and code fences. On parse or validation
        failure the request is re-sent with an error-explaining suffix, up
        to the configured structured-retry cap.
        """
        if not field_schema:
            raise ValueError("field_schema must be non-empty")
        current = req
        last_problem = ""
        for _ in range(self.structured_retries + 1):
            completion = self.complete(current)
            try:
                return _validate_fields(extract_json_object(completion), field_schema)
            except ValueError as exc:
                last_problem = str(exc)
                suffix = (
                    "\n\nYour previous reply could not be used: "
                    f"{last_problem}. Reply again with ONLY a JSON object "
                    "containing the fields "
                    + ", ".join(name for name, _ in field_schema)
                    + "."
                )
                current = CompletionRequest(
                    role=req.role,
                    system_prompt=req.system_prompt,
                    user_prompt=req.user_prompt + suffix,
                    max_tokens=req.max_tokens,
                    temperature=req.temperature,
                )
        raise StructuredParseError(last_problem)


def extract_json_object(text: str) -> dict:
    """Return the first well-formed JSON object found in free text."""
    candidates = [text.strip()]
    for block in re.findall(r"```(?:json)?\s*\n(.*?)```", text, flags=re.DOTALL):
        candidates.append(block.strip())
    brace_start = text.find("{")
    if brace_start != -1:
        candidates.append(_balanced_braces(text, brace_start))
    for candidate in candidates:
        if not candidate:
            continue
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, dict):
            return parsed
    raise ValueError("no JSON object found in completion")


def _balanced_braces(text: str, start: int) -> str:
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return ""


def normalize_enum_token(value: str) -> str:
    return re.sub(r"[\s\-]+", "_", value.strip().lower())


def _validate_fields(
    obj: dict, field_schema: Sequence[tuple[str, FieldKind]]
) -> dict[str, str]:
    record: dict[str, str] = {}
    for name, kind in field_schema:
        if name not in obj:
            raise ValueError(f"missing field {name!r}")
        value = obj[name]
        if not isinstance(value, str) or not value.strip():
            raise ValueError(f"field {name!r} must be a non-empty string")
        if isinstance(kind, tuple):
            _, allowed = kind
            normalized = normalize_enum_token(value)
            if normalized not in allowed:
                raise ValueError(
                    f"field {name!r} value {value!r} is not one of the allowed names"
                )
            record[name] = normalized
        else:
            record[name] = value.strip()
    return record
