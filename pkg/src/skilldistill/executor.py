"""Program-of-thought execution boundary.

Two executors implement the same contract: a table-driven stub for offline
runs and tests, and a client that drives a real sandbox process over a
line-delimited JSON stdio protocol ({"id","code","timeout_ms"} in,
{"id","status","value","message"} out).
"""

from __future__ import annotations

import itertools
import json
import logging
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 10_000
GRACE_MS = 500
OUTPUT_CAP_BYTES = 64 * 1024


class ErrorClass(Enum):
    TIMEOUT = "timeout"
    SANDBOX_VIOLATION = "sandbox_violation"
    RUNTIME_ERROR = "runtime_error"
    PROTOCOL_ERROR = "protocol_error"


@dataclass(frozen=True)
class ExecutionResult:
    kind: str  # "value" | "error"
    value: str = ""
    error_class: Optional[ErrorClass] = None
    detail: str = ""
    elapsed: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "value" and self.error_class is not None:
            raise ValueError("value results carry no error_class")
        if self.kind == "error" and self.error_class is None:
            raise ValueError("error results need an error_class")

    @property
    def ok(self) -> bool:
        return self.kind == "value"


def value_result(value: str, elapsed: float = 0.0) -> ExecutionResult:
    return ExecutionResult(kind="value", value=value, elapsed=elapsed)


def error_result(
    error_class: ErrorClass, detail: str = "", elapsed: float = 0.0
) -> ExecutionResult:
    return ExecutionResult(
        kind="error", error_class=error_class, detail=detail, elapsed=elapsed
    )


class PotExecutor(Protocol):
    def run(self, code: str, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ExecutionResult: ...


class StubExecutor:
    """Table-driven executor: exact code text maps to a scripted outcome.

    Table values are either a plain value string or `error:<class>` to
    simulate a failure. Unknown code yields a runtime error.
    """

    def __init__(self, table: Optional[dict[str, str]] = None):
        self.table = dict(table or {})

    @classmethod
    def from_path(cls, path) -> "StubExecutor":
        from pathlib import Path

        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def run(self, code: str, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ExecutionResult:
        entry = self.table.get(code.strip())
        if entry is None:
            return error_result(ErrorClass.RUNTIME_ERROR, "no stub entry for code")
        if entry.startswith("error:"):
            name = entry.split(":", 1)[1]
            return error_result(ErrorClass(name), f"scripted {name}")
        return value_result(entry)


class _SandboxProcess:
    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self.proc: Optional[subprocess.Popen] = None
        self.lock = threading.Lock()

    def ensure_started(self) -> subprocess.Popen:
        if self.proc is None or self.proc.poll() is not None:
            self.proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        return self.proc

    def kill(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()
        self.proc = None


class SubprocessExecutor:
    """Drives a pool of sandbox processes over the stdio JSON protocol.

    One request is in flight per process; a process that fails to answer
    within timeout + grace is killed and replaced.
    """

    def __init__(self, command: Sequence[str], pool_size: int = 1, grace_ms: int = GRACE_MS):
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        self.grace_ms = grace_ms
        self._pool = [_SandboxProcess(command) for _ in range(pool_size)]
        self._counter = itertools.count(1)
        self._pool_lock = threading.Lock()

    def close(self) -> None:
        for slot in self._pool:
            with slot.lock:
                slot.kill()

    def __enter__(self) -> "SubprocessExecutor":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _acquire(self) -> _SandboxProcess:
        while True:
            with self._pool_lock:
                for slot in self._pool:
                    if slot.lock.acquire(blocking=False):
                        return slot
            time.sleep(0.005)

    def run(self, code: str, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ExecutionResult:
        request_id = f"r{next(self._counter)}"
        request = json.dumps(
            {"id": request_id, "code": code, "timeout_ms": timeout_ms}
        )
        slot = self._acquire()
        started = time.monotonic()
        try:
            line = self._exchange(slot, request, timeout_ms)
        finally:
            slot.lock.release()
        elapsed = time.monotonic() - started
        if line is None:
            return error_result(
                ErrorClass.TIMEOUT, "sandbox did not answer in time", elapsed
            )
        try:
            payload = json.loads(line)
        except json.JSONDecodeError:
            return error_result(
                ErrorClass.PROTOCOL_ERROR, f"unparseable response: {line[:200]!r}", elapsed
            )
        if payload.get("id") != request_id:
            return error_result(
                ErrorClass.PROTOCOL_ERROR,
                f"response id {payload.get('id')!r} does not echo {request_id!r}",
                elapsed,
            )
        status = payload.get("status")
        if status == "ok":
            return value_result(str(payload.get("value", ""))[:OUTPUT_CAP_BYTES], elapsed)
        message = str(payload.get("message", ""))
        if status == "timeout":
            return error_result(ErrorClass.TIMEOUT, message, elapsed)
        if status == "violation":
            return error_result(ErrorClass.SANDBOX_VIOLATION, message, elapsed)
        if status == "error":
            return error_result(ErrorClass.RUNTIME_ERROR, message, elapsed)
        return error_result(
            ErrorClass.PROTOCOL_ERROR, f"unknown status {status!r}", elapsed
        )

    def _exchange(
        self, slot: _SandboxProcess, request_line: str, timeout_ms: int
    ) -> Optional[str]:
        deadline = (timeout_ms + self.grace_ms) / 1000.0
        result: list[Optional[str]] = [None]

        def talk() -> None:
            try:
                proc = slot.ensure_started()
                assert proc.stdin is not None and proc.stdout is not None
                proc.stdin.write(request_line + "\n")
                proc.stdin.flush()
                result[0] = proc.stdout.readline().strip()
            except (OSError, ValueError) as exc:
                logger.warning("sandbox exchange failed: %s", exc)
                result[0] = None

        worker = threading.Thread(target=talk, daemon=True)
        worker.start()
        worker.join(deadline)
        if worker.is_alive() or result[0] is None or result[0] == "":
            slot.kill()
            if worker.is_alive():
                worker.join(0.1)
            return None
        return result[0]
