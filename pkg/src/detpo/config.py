"""Run configuration: one TOML or JSON file, ``${VAR}`` interpolation, CLI overrides."""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Mapping

from pydantic import BaseModel, ValidationError

from .backend import BackendDescriptor, ConfigError
from .optimizer import OptimizerConfig

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


class RunConfig(BaseModel):
    backend: BackendDescriptor = BackendDescriptor(type="mock")
    scoring_backend: BackendDescriptor | None = None
    optimizer: OptimizerConfig = OptimizerConfig()

    def scorer(self) -> BackendDescriptor:
        return self.scoring_backend or self.backend


def interpolate(value: Any, env: Mapping[str, str]) -> Any:
    """Replace ``${VAR}`` / ``${VAR:-default}`` in every string; unknown variables are an error."""
    if isinstance(value, str):

        def sub(m: re.Match) -> str:
            name, default = m.group(1), m.group(2)
            if name in env:
                return env[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set")

        return _VAR.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, env) for v in value]
    return value


def read_raw(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table/object")
    return data


def config_hash(raw: Mapping[str, Any]) -> str:
    """Hash of the config before interpolation, so secrets never influence it."""
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> tuple[RunConfig, str]:
    """Returns the validated config and its hash. ``overrides`` come from CLI flags and win."""
    raw = read_raw(path) if path is not None else {}
    if overrides:
        raw = _merge(raw, overrides)
    digest = config_hash(raw)
    resolved = interpolate(raw, os.environ if env is None else env)
    base = Path(path).parent if path is not None else Path.cwd()
    script = (resolved.get("backend") or {}).get("script")
    if script and not Path(script).is_absolute():
        resolved["backend"]["script"] = str(base / script)
    script = (resolved.get("scoring_backend") or {}).get("script")
    if script and not Path(script).is_absolute():
        resolved["scoring_backend"]["script"] = str(base / script)
    try:
        return RunConfig.model_validate(resolved), digest
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
