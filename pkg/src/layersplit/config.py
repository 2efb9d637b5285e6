"""Run configuration: nested dataclasses with a JSON round trip."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import LORA_TARGETS, DenoiserConfig
from .cues import CueConfig
from .curation import CurationConfig
from .errors import ConfigError
from .flow import FlowConfig
from .fusion import FusionConfig

ENV_OUTPUT_ROOT = "LAYERSPLIT_OUTPUT_ROOT"
ENV_WORKERS = "LAYERSPLIT_WORKERS"


@dataclass
class CodecSection:
    patch: int = 8


@dataclass
class LoRASection:
    rank: int = 8
    alpha: float | None = None
    targets: tuple[str, ...] = LORA_TARGETS
    seed: int = 0
    # adapt refuses to run when trainable / total parameters exceeds this
    max_trainable_ratio: float = 0.25


@dataclass
class MetricSection:
    feature_dim: int = 32
    feature_size: int = 16
    feature_seed: int = 0
    steps: int = 20
    seed: int = 0


@dataclass
class ProbeSection:
    k_values: tuple[int, ...] = (256, 512, 1024, 2048, 4096, 8192, 16384)
    n_tok: int = 64
    batch: int = 8
    repeats: int = 7


def _pretrain_default() -> FlowConfig:
    return FlowConfig(iterations=2000)


def _adapt_default() -> FlowConfig:
    return FlowConfig(iterations=2500)


@dataclass
class RunConfig:
    seed: int = 0
    output_root: str = "runs"
    workers: int = 1
    curation: CurationConfig = field(default_factory=CurationConfig)
    codec: CodecSection = field(default_factory=CodecSection)
    cues: CueConfig = field(default_factory=CueConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    lora: LoRASection = field(default_factory=LoRASection)
    pretrain: FlowConfig = field(default_factory=_pretrain_default)
    adapt: FlowConfig = field(default_factory=_adapt_default)
    metrics: MetricSection = field(default_factory=MetricSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    def resolved(self) -> "RunConfig":
        """Copy with widths derived from the patch size filled in.

        States and image-mask contexts are ``patch^2 * 4`` wide, cue tokens
        ``patch^2``, and the fused context feeds the denoiser's extra columns.
        """
        p = self.codec.patch
        if p < 1:
            raise ConfigError("codec.patch: must be >= 1")
        cfg = replace(self)
        cfg.fusion = replace(self.fusion, d_cue=p * p)
        cfg.denoiser = replace(self.denoiser, d_state=p * p * 4, d_ctx=p * p * 4, d_mm=self.fusion.d_out)
        return cfg

    def validate(self) -> "RunConfig":
        checks = [
            ("curation", self.curation.validate),
            ("cues", self.cues.validate),
            ("fusion", self.fusion.validate),
            ("denoiser", self.denoiser.validate),
            ("pretrain", self.pretrain.validate),
            ("adapt", self.adapt.validate),
        ]
        for section, fn in checks:
            try:
                fn()
            except ConfigError as exc:
                raise ConfigError(f"{section}: {exc}") from exc
        if self.curation.canvas_size % self.codec.patch:
            raise ConfigError(
                f"codec.patch: canvas_size {self.curation.canvas_size} is not divisible by {self.codec.patch}"
            )
        if self.lora.rank < 1:
            raise ConfigError("lora.rank: must be >= 1")
        unknown = set(self.lora.targets) - set(LORA_TARGETS)
        if unknown:
            raise ConfigError(f"lora.targets: unknown sub-layer(s) {sorted(unknown)}")
        if not 0 < self.lora.max_trainable_ratio <= 1:
            raise ConfigError("lora.max_trainable_ratio: must be in (0, 1]")
        if self.metrics.steps < 1:
            raise ConfigError("metrics.steps: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    return _build(RunConfig, data, "")


def load_config(path: str | Path | None, env: dict | None = None) -> RunConfig:
    """Read a JSON config (``None`` gives the defaults), apply environment overrides, validate."""
    env = os.environ if env is None else env
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON (line {exc.lineno}: {exc.msg})") from exc
        cfg = from_dict(data)
    if env.get(ENV_OUTPUT_ROOT):
        cfg.output_root = env[ENV_OUTPUT_ROOT]
    if env.get(ENV_WORKERS):
        try:
            cfg.workers = int(env[ENV_WORKERS])
        except ValueError as exc:
            raise ConfigError(f"workers: {ENV_WORKERS}={env[ENV_WORKERS]!r} is not an integer") from exc
    return cfg.resolved().validate()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")

