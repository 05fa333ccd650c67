"""Configuration: a TOML file, ICX_* environment overrides, then flags.

Precedence is flags > environment > file > built-in defaults.  Unknown
file keys and unparseable environment values are rejected rather than
silently ignored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 ships without it
    import tomli as tomllib

from .embed import ResourcePreference
from .errors import SchemaError
from .vecdb import RetrievalMode

ENV_PREFIX = "ICX_"
POLICY_ROLES = ("downstream", "filter", "align", "planner", "selector")
PLANNER_MODES = ("rule", "model")


@dataclass
class Config:
    corpus_path: str | None = None
    db_dir: str = "icx-db"
    policy_endpoints: dict[str, str] = field(default_factory=dict)
    policy_model: str = "default"
    planner_mode: str = "rule"
    max_steps: int = 5
    k: int = 8
    retrieval_mode: str = RetrievalMode.CASCADED_TEXT_THEN_VISUAL.value
    overfetch_factor: int = 4
    agentic_pool_factor: float = 1.5
    resource_preference: str = ResourcePreference.BALANCED.value
    bench_spec_path: str | None = None
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.k < 0:
            raise SchemaError("k must be >= 0")
        if self.max_steps < 1:
            raise SchemaError("max_steps must be >= 1")
        if self.overfetch_factor < 1:
            raise SchemaError("overfetch_factor must be >= 1")
        if self.agentic_pool_factor < 1.0:
            raise SchemaError("agentic_pool_factor must be >= 1.0")
        if self.max_concurrency < 1:
            raise SchemaError("max_concurrency must be >= 1")
        if self.planner_mode not in PLANNER_MODES:
            raise SchemaError(f"planner_mode must be one of {PLANNER_MODES}")
        try:
            RetrievalMode(self.retrieval_mode)
        except ValueError:
            raise SchemaError(f"unknown retrieval_mode {self.retrieval_mode!r}")
        try:
            ResourcePreference(self.resource_preference)
        except ValueError:
            raise SchemaError(f"unknown resource_preference {self.resource_preference!r}")
        for role in self.policy_endpoints:
            if role not in POLICY_ROLES:
                raise SchemaError(f"unknown policy role {role!r}")


_INT_FIELDS = {"max_steps", "k", "overfetch_factor", "max_concurrency"}
_FLOAT_FIELDS = {"agentic_pool_factor"}
_PATH_FIELDS = ("corpus_path", "bench_spec_path")


def _coerce(name: str, raw: str, source: str | None = None):
    label = source or name
    try:
        if name in _INT_FIELDS:
            return int(raw)
        if name in _FLOAT_FIELDS:
            return float(raw)
    except ValueError:
        raise SchemaError(f"{label} wants a number, got {raw!r}")
    return raw


def _from_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"config file {p} is not valid TOML: {exc}")
    known = {f.name for f in fields(Config)}
    unknown = set(data) - known
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    endpoints = data.get("policy_endpoints")
    if endpoints is not None and not isinstance(endpoints, dict):
        raise SchemaError("policy_endpoints must be a table of role = url")
    return data


def _from_env(env) -> dict:
    out: dict = {}
    endpoints: dict[str, str] = {}
    scalar = {f.name for f in fields(Config)} - {"policy_endpoints"}
    for name in scalar:
        var = f"{ENV_PREFIX}{name.upper()}"
        raw = env.get(var)
        if raw is not None:
            out[name] = _coerce(name, raw, source=var)
    for role in POLICY_ROLES:
        raw = env.get(f"{ENV_PREFIX}ENDPOINT_{role.upper()}")
        if raw is not None:
            endpoints[role] = raw
    if endpoints:
        out["policy_endpoints"] = endpoints
    return out


def load_config(
    path: str | Path | None = None,
    env=None,
    overrides: dict | None = None,
) -> Config:
    """Merge the three sources and validate the result.

    `overrides` holds already-typed flag values; None entries are skipped.
    Endpoint tables merge role-wise across sources instead of replacing.
    """
    env = os.environ if env is None else env
    merged: dict = {}
    endpoints: dict[str, str] = {}
    for layer in (
        _from_file(path) if path is not None else {},
        _from_env(env),
        {k: v for k, v in (overrides or {}).items() if v is not None},
    ):
        layer = dict(layer)
        endpoints.update(layer.pop("policy_endpoints", {}))
        merged.update(layer)
    if endpoints:
        merged["policy_endpoints"] = endpoints
    config = Config(**merged)
    for name in _PATH_FIELDS:
        value = getattr(config, name)
        if value is not None and not Path(value).exists():
            raise SchemaError(f"{name} does not exist: {value}")
    return config
