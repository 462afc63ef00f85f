"""Run configuration: a sectioned key-value file plus flag overrides.

Sections name the four model roles and the pipeline stages. API keys come
only from environment variables named in the file, never from the file
itself.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .evaluate import EvalConfig
from .executor import PotExecutor, StubExecutor, SubprocessExecutor
from .gateway import (
    Gateway,
    HttpChatBackend,
    MockBackend,
    MockScript,
    RateLimiter,
    Role,
    RoleConfig,
)
from .refine import RefinementConfig

ROLE_SECTIONS = ("student", "teacher", "judge", "selector")


@dataclass
class RunConfig:
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def get(self, section: str, key: str, default: str = "") -> str:
        return self.raw.get(section, {}).get(key, default)

    def getint(self, section: str, key: str, default: int) -> int:
        value = self.get(section, key)
        return int(value) if value else default

    def getfloat(self, section: str, key: str, default: float) -> float:
        value = self.get(section, key)
        return float(value) if value else default

    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            workers=self.getint("eval", "workers", 1),
            pot_timeout_ms=self.getint("eval", "pot_timeout_ms", 10_000),
            selector_mode=self.get("eval", "selector_mode", "bundle"),
            max_files=self.getint("eval", "max_files", 6),
        )

    def refinement_config(self) -> RefinementConfig:
        return RefinementConfig(
            iterations=self.getint("refine", "iterations", 2),
            tau_cov=self.getfloat("refine", "tau_cov", 0.5),
            tau_safe_retain=self.getfloat("refine", "tau_safe", 0.9),
            n_max=self.getint("refine", "n_max", 3),
            seed=self.getint("refine", "seed", 0),
        )


def load_config(
    path: Optional[str | Path] = None, overrides: Optional[dict[str, dict[str, str]]] = None
) -> RunConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        read = parser.read(str(path))
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
    raw: dict[str, dict[str, str]] = {
        section: dict(parser.items(section)) for section in parser.sections()
    }
    for section, values in (overrides or {}).items():
        bucket = raw.setdefault(section, {})
        for key, value in values.items():
            if value is not None:
                bucket[key] = str(value)
    return RunConfig(raw=raw)


def build_gateway(
    config: RunConfig, mock_script_path: Optional[str | Path] = None
) -> Gateway:
    """Wire one backend per role; a mock script file overrides everything."""
    gateway = Gateway()
    if mock_script_path is not None:
        gateway.configure_mock(MockScript.from_path(mock_script_path))
        return gateway
    for section in ROLE_SECTIONS:
        kind = config.get(section, "backend")
        if not kind:
            continue
        role = Role(section)
        rate = config.getfloat(section, "rate_limit", 0.0)
        limiter = RateLimiter(rate) if rate > 0 else None
        retry_cap = config.getint(section, "retry_cap", 3)
        if kind == "mock":
            script_file = config.get(section, "script")
            script = (
                MockScript.from_path(script_file) if script_file else MockScript()
            )
            backend: object = MockBackend(script)
        elif kind == "http":
            headers_json = config.get(section, "headers")
            backend = HttpChatBackend(
                endpoint=config.get(section, "endpoint"),
                model=config.get(section, "model"),
                api_key_env=config.get(section, "api_key_env"),
                headers=json.loads(headers_json) if headers_json else None,
            )
        else:
            raise ValueError(f"[{section}] unknown backend kind {kind!r}")
        gateway.configure(
            role, RoleConfig(backend=backend, rate_limiter=limiter, retry_cap=retry_cap)
        )
    return gateway


def build_executor(config: RunConfig) -> PotExecutor:
    kind = config.get("eval", "executor", "stub")
    if kind == "stub":
        table_path = config.get("eval", "stub_table")
        if table_path:
            return StubExecutor.from_path(table_path)
        return StubExecutor()
    if kind == "subprocess":
        command = shlex.split(config.get("eval", "sandbox_cmd"))
        if not command:
            raise ValueError("[eval] sandbox_cmd required for the subprocess executor")
        pool = config.getint("eval", "sandbox_pool", 1)
        return SubprocessExecutor(command, pool_size=pool)
    raise ValueError(f"[eval] unknown executor kind {kind!r}")
