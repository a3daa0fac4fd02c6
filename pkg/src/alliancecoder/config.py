"""Run configuration: schema, validation, JSON round-trip, run manifest."""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import templates
from .gateway import MODES
from .pipeline import CONDITIONS, STUDY_CONDITIONS
from .sandbox import SandboxLimits
from .vectorindex import SOURCE_MODES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    # providers and models
    llm_provider: str = "openai"
    embed_provider: str = "hash"
    model: str = "gpt-4o-mini"
    embed_dim: int = 256
    embed_seed: int = 0
    # sampling
    temperature: float = 0.7
    k_samples: int = 5
    # retrieval
    top_k_similar: int = 5
    window_size: int = 20
    stride: int = 10
    source_mode: str = "text_description"
    # gateway
    mode: str = "replay"
    max_in_flight: int = 4
    # pipeline
    conditions: tuple = ("AllianceCoder",)
    token_budget: int = 0
    examples_per_stage: int = 2
    # paths
    corpus_root: str = ""
    benchmark_dir: str = ""
    run_dir: str = ""
    cache_path: str = ""
    exclude_globs: tuple = ("tests/*",)
    # sandbox
    sandbox_timeout: float = 10.0
    sandbox_grace: float = 2.0
    sandbox_memory_mb: int = 512
    sandbox_network: bool = False
    python_cmd: str = ""

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.source_mode not in SOURCE_MODES:
            raise ConfigError(
                f"source_mode must be one of {SOURCE_MODES}, got {self.source_mode!r}"
            )
        for name in self.conditions:
            if name != "all8" and name not in CONDITIONS:
                valid = ", ".join(sorted(set(CONDITIONS) | {"all8"}))
                raise ConfigError(f"unknown condition {name!r}; valid: {valid}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError(f"temperature must be in [0, 2], got {self.temperature}")
        for attr in ("k_samples", "top_k_similar", "window_size", "stride",
                     "max_in_flight", "embed_dim"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{attr} must be >= 1, got {getattr(self, attr)}")
        if self.token_budget < 0:
            raise ConfigError("token_budget must be >= 0 (0 disables the budget)")
        if self.sandbox_timeout <= 0 or self.sandbox_grace < 0:
            raise ConfigError("sandbox_timeout must be > 0 and sandbox_grace >= 0")
        if self.sandbox_memory_mb < 16:
            raise ConfigError("sandbox_memory_mb must be >= 16")
        if self.mode == "replay":
            if not self.cache_path:
                raise ConfigError("replay mode requires cache_path")
            if not Path(self.cache_path).exists():
                raise ConfigError(f"replay cache not found: {self.cache_path}")
        return self

    def expanded_conditions(self) -> tuple:
        out: list[str] = []
        for name in self.conditions:
            names = STUDY_CONDITIONS if name == "all8" else (name,)
            for n in names:
                if n not in out:
                    out.append(n)
        return tuple(out)

    def sandbox_limits(self) -> SandboxLimits:
        return SandboxLimits(
            timeout=self.sandbox_timeout,
            grace=self.sandbox_grace,
            memory_mb=self.sandbox_memory_mb,
            network=self.sandbox_network,
            python=self.python_cmd,
        )


_TUPLE_FIELDS = ("conditions", "exclude_globs")


def render_config(cfg: RunConfig) -> str:
    data = dataclasses.asdict(cfg)
    for name in _TUPLE_FIELDS:
        data[name] = list(getattr(cfg, name))
    data["schema_version"] = SCHEMA_VERSION
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for name in _TUPLE_FIELDS:
        if name in data:
            data[name] = tuple(data[name])
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Replace fields with non-None override values (CLI flags win)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    for name in _TUPLE_FIELDS:
        if name in changes:
            changes[name] = tuple(changes[name])
    return dataclasses.replace(cfg, **changes)


# ── run manifest ─────────────────────────────────────────────────────────────

def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + "Z"


@dataclass
class RunManifest:
    config: dict
    template_versions: dict
    corpus_hash: str
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    counters: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def start(cls, cfg: RunConfig, corpus_hash: str) -> "RunManifest":
        snapshot = dataclasses.asdict(cfg)
        for name in _TUPLE_FIELDS:
            snapshot[name] = list(getattr(cfg, name))
        return cls(
            config=snapshot,
            template_versions=dict(templates.TEMPLATE_VERSIONS),
            corpus_hash=corpus_hash,
        )

    def finalize(self, counters: dict | None = None) -> "RunManifest":
        if counters:
            self.counters.update(counters)
        self.finished_at = _now()
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(**data)


def write_manifest(manifest: RunManifest, path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(manifest.to_json(), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path) -> RunManifest:
    return RunManifest.from_json(Path(path).read_text(encoding="utf-8"))
