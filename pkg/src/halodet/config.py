"""Run configuration: flat TOML-style file, environment, and flag layering.

Precedence is flags > environment > config file. Secrets (API keys) are
accepted only from the environment; a key smuggled into a config file is a
hard error so benchmark configs stay shareable.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigInvalid
from .gateway import HttpModelBackend, MockModelBackend, ModelGateway
from .model import ImageRef, Label, Verdict
from .stages import DetectionMethod, SelfCheckDemo
from .tools import (
    DEFAULT_DETECTOR_THRESHOLD,
    DEFAULT_FACT_TOP_K,
    GatewayAttributeAnswerer,
    HttpFactSearcher,
    HttpObjectDetector,
    HttpSceneTextReader,
    NullAttributeAnswerer,
    NullFactSearcher,
    NullObjectDetector,
    NullSceneTextReader,
    ToolBackendSet,
    mock_backend_set,
)

ENV_PREFIX = "HALODET_"

# Secrets never live in config files.
MODEL_API_KEY_ENV = "HALODET_MODEL_API_KEY"
SEARCH_API_KEY_ENV = "HALODET_SEARCH_API_KEY"
TOOL_API_KEY_ENV = "HALODET_TOOL_API_KEY"

_LINE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+?)\s*$")


def parse_config_file(path: str | Path) -> dict[str, Any]:
    """Read a flat ``key = value`` file (TOML-style scalars, # comments)."""
    values: dict[str, Any] = {}
    for lineno, raw_line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        match = _LINE_RE.match(line)
        if not match:
            raise ConfigInvalid(f"{path}:{lineno}: expected key = value")
        key, raw_value = match.group(1), match.group(2)
        values[key] = _parse_scalar(raw_value, f"{path}:{lineno}")
    return values


def _parse_scalar(raw: str, where: str) -> Any:
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        try:
            return json.loads(raw)
        except ValueError as exc:
            raise ConfigInvalid(f"{where}: bad string literal {raw}") from exc
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    raise ConfigInvalid(f"{where}: unquoted value {raw!r} (strings need quotes)")


_TOOL_MODES = ("default", "null")


@dataclass
class RunConfig:
    """Everything one detection run needs, independent of how it was supplied."""

    method: str = "unihd"
    backend: str = "mock"
    fixtures: str = ""
    bench: str = ""
    out: str = "results"
    run_id: str = ""
    width: int = 4
    cache_dir: str = ".halodet-cache"
    cache: bool = True
    fact_top_k: int = DEFAULT_FACT_TOP_K
    detector_threshold: float = DEFAULT_DETECTOR_THRESHOLD
    demos: str = ""
    request_log: str = ""
    model_endpoint: str = ""
    model_name: str = ""
    detector_endpoint: str = ""
    ocr_endpoint: str = ""
    search_endpoint: str = "https://google.serper.dev/search"
    object_tool: str = "default"
    attribute_tool: str = "default"
    scene_text_tool: str = "default"
    fact_tool: str = "default"

    def validate(self) -> None:
        if self.width < 1:
            raise ConfigInvalid(f"width must be >= 1, got {self.width}")
        if self.fact_top_k < 1:
            raise ConfigInvalid(f"fact_top_k must be >= 1, got {self.fact_top_k}")
        if self.method not in {m.value for m in DetectionMethod}:
            raise ConfigInvalid(f"unknown method {self.method!r}")
        if self.backend not in ("mock", "live"):
            raise ConfigInvalid(f"backend must be mock or live, got {self.backend!r}")
        if self.backend == "mock" and not self.fixtures:
            raise ConfigInvalid("mock backend needs --fixtures")
        if self.backend == "live" and not self.model_endpoint:
            raise ConfigInvalid("live backend needs model_endpoint")
        for name in ("object_tool", "attribute_tool", "scene_text_tool", "fact_tool"):
            if getattr(self, name) not in _TOOL_MODES:
                raise ConfigInvalid(f"{name} must be one of {_TOOL_MODES}")

    @property
    def detection_method(self) -> DetectionMethod:
        return DetectionMethod(self.method)

    def echo(self) -> dict[str, Any]:
        """Config snapshot for the run manifest (no secrets are stored here)."""
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def build_config(
    file_path: str | Path | None = None,
    flag_values: dict[str, Any] | None = None,
    env: dict[str, str] | None = None,
) -> RunConfig:
    """Layer file, environment, and flags into one validated RunConfig."""
    env = dict(os.environ) if env is None else env
    merged: dict[str, Any] = {}

    if file_path is not None:
        file_values = parse_config_file(file_path)
        for key in file_values:
            if key.endswith("api_key"):
                raise ConfigInvalid(
                    f"{key}: secrets must come from the environment, not config files"
                )
            if key not in _FIELD_TYPES:
                raise ConfigInvalid(f"unknown config key {key!r}")
        merged.update(file_values)

    for name in _FIELD_TYPES:
        env_key = ENV_PREFIX + name.upper()
        if env_key in env:
            merged[name] = _coerce(name, env[env_key])

    for key, value in (flag_values or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigInvalid(f"unknown config key {key!r}")
        merged[key] = value

    config = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    config.validate()
    return config


def _coerce(name: str, value: Any) -> Any:
    target = _FIELD_TYPES[name]
    if isinstance(value, str):
        if target in (int, "int"):
            return int(value)
        if target in (float, "float"):
            return float(value)
        if target in (bool, "bool"):
            return value.lower() in ("1", "true", "yes")
    if target in (float, "float") and isinstance(value, int):
        return float(value)
    return value


# --- wiring ----------------------------------------------------------------------


def build_gateway(config: RunConfig, env: dict[str, str] | None = None) -> ModelGateway:
    env = dict(os.environ) if env is None else env
    if config.backend == "mock":
        if not Path(config.fixtures).is_dir():
            raise ConfigInvalid(f"fixture directory not found: {config.fixtures}")
        backend = MockModelBackend(fixture_dir=Path(config.fixtures) / "model")
    else:
        api_key = env.get(MODEL_API_KEY_ENV, "")
        if not api_key:
            raise ConfigInvalid(f"live backend needs {MODEL_API_KEY_ENV} set")
        backend = HttpModelBackend(
            endpoint=config.model_endpoint,
            api_key=api_key,
            model=config.model_name,
        )
    return ModelGateway(
        backend,
        request_log=config.request_log or None,
    )


def build_tools(
    config: RunConfig,
    gateway: ModelGateway,
    env: dict[str, str] | None = None,
) -> ToolBackendSet:
    env = dict(os.environ) if env is None else env
    if config.backend == "mock":
        tools = mock_backend_set(config.fixtures)
    else:
        tool_key = env.get(TOOL_API_KEY_ENV) or None
        search_key = env.get(SEARCH_API_KEY_ENV, "")
        if not config.detector_endpoint or not config.ocr_endpoint:
            raise ConfigInvalid("live tools need detector_endpoint and ocr_endpoint")
        if not search_key:
            raise ConfigInvalid(f"live fact search needs {SEARCH_API_KEY_ENV} set")
        tools = ToolBackendSet(
            object_detector=HttpObjectDetector(
                config.detector_endpoint, api_key=tool_key,
                threshold=config.detector_threshold,
            ),
            attribute_answerer=GatewayAttributeAnswerer(gateway),
            scene_text_reader=HttpSceneTextReader(config.ocr_endpoint, api_key=tool_key),
            fact_searcher=HttpFactSearcher(search_key, endpoint=config.search_endpoint),
        )
    if config.object_tool == "null":
        tools.object_detector = NullObjectDetector()
    if config.attribute_tool == "null":
        tools.attribute_answerer = NullAttributeAnswerer()
    if config.scene_text_tool == "null":
        tools.scene_text_reader = NullSceneTextReader()
    if config.fact_tool == "null":
        tools.fact_searcher = NullFactSearcher()
    return tools


def load_demos(path: str | Path) -> list[SelfCheckDemo]:
    """Read self-check demonstrations from their JSON file."""
    data = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(data, list):
        raise ConfigInvalid("demos file must hold a list")
    demos = []
    for entry in data:
        claims = tuple(str(c) for c in entry["claims"])
        verdicts = tuple(
            Verdict(
                claim_index=i,
                label=Label(v["label"]),
                rationale=str(v["reason"]),
            )
            for i, v in enumerate(entry["verdicts"], start=1)
        )
        demos.append(SelfCheckDemo(
            image=ImageRef.from_json(entry["image"]),
            claims=claims,
            verdicts=verdicts,
        ))
    return demos
