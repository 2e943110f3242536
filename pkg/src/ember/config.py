"""Daemon configuration: defaults, environment overrides (EMBER_* vars),
and validation."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

from .errors import PreconditionError
from .transport import RetryPolicy

ENV_PREFIX = "EMBER_"

DEFAULT_LISTEN_PORT = 5896
DEFAULT_CONTROL_PORT = 7870


@dataclass
class Config:
    listen_port: int = DEFAULT_LISTEN_PORT
    control_port: int = DEFAULT_CONTROL_PORT
    control_host: str = "127.0.0.1"  # loopback only unless explicitly overridden
    local_address: str = "::1"
    display_name: str = "peer"
    identity_dir: Path = Path("~/.ember")
    default_ttl_ms: int = 300_000
    max_envelope_bytes: int = 65_536
    sweep_interval_ms: int = 60_000
    connect_timeout_ms: int = 5_000
    read_timeout_ms: int = 10_000
    write_timeout_ms: int = 10_000
    max_attempts: int = 3
    base_backoff_ms: int = 500
    webui_dir: Optional[Path] = None

    def __post_init__(self):
        self.identity_dir = Path(self.identity_dir).expanduser()
        if self.webui_dir is not None:
            self.webui_dir = Path(self.webui_dir).expanduser()
        self.validate()

    def validate(self) -> None:
        if self.listen_port == self.control_port:
            raise PreconditionError("listen_port and control_port must be distinct")
        for name in (
            "default_ttl_ms",
            "max_envelope_bytes",
            "sweep_interval_ms",
            "connect_timeout_ms",
            "read_timeout_ms",
            "write_timeout_ms",
            "base_backoff_ms",
        ):
            if getattr(self, name) <= 0:
                raise PreconditionError(f"{name} must be > 0")
        if self.max_attempts < 1:
            raise PreconditionError("max_attempts must be >= 1")
        for name in ("listen_port", "control_port"):
            port = getattr(self, name)
            if not (0 <= port <= 65_535):  # 0 lets the OS pick (tests)
                raise PreconditionError(f"{name} out of range: {port}")
        if not self.display_name:
            raise PreconditionError("display_name must be non-empty")

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(
            connect_timeout_ms=self.connect_timeout_ms,
            read_timeout_ms=self.read_timeout_ms,
            write_timeout_ms=self.write_timeout_ms,
            max_attempts=self.max_attempts,
            base_backoff_ms=self.base_backoff_ms,
        )

    @classmethod
    def from_env(cls, env: Optional[Mapping[str, str]] = None, **overrides) -> "Config":
        """Build from EMBER_* environment variables, then apply explicit
        keyword overrides (CLI flags win over the environment)."""
        env = os.environ if env is None else env
        values: dict = {}
        for field in fields(cls):
            env_name = ENV_PREFIX + field.name.upper()
            if env_name not in env:
                continue
            raw = env[env_name]
            if field.type in ("int", int):
                try:
                    values[field.name] = int(raw)
                except ValueError:
                    raise PreconditionError(f"{env_name} must be an integer: {raw!r}") from None
            elif field.name in ("identity_dir", "webui_dir"):
                values[field.name] = Path(raw)
            else:
                values[field.name] = raw
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)
