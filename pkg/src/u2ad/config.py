"""Run configuration: nested dataclasses, strict loading, env overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

ENV_PREFIX = "U2AD_"


@dataclass
class PhantomConfig:
    """Geometry and intensity model for one acquisition "site"."""

    height: int = 256
    width: int = 256
    sc_width: tuple[float, float] = (8.0, 12.0)
    csf_margin: tuple[float, float] = (5.0, 8.0)
    vertical_margin: int = 8
    curvature: float = 6.0
    background_intensity: float = 0.10
    sc_intensity: float = 0.35
    csf_intensity: float = 0.85
    background_noise: float = 0.03
    sc_noise: float = 0.02
    csf_noise: float = 0.06
    modulation: float = 0.10
    stenosis: float = 0.0
    gray_matter: float = 0.0

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError("phantom image must be at least 16x16")
        lo, hi = self.sc_width
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid sc_width range {self.sc_width}")
        mlo, mhi = self.csf_margin
        if not 0 <= mlo <= mhi:
            raise ConfigError(f"invalid csf_margin range {self.csf_margin}")
        span = hi + 2 * mhi + 2 * abs(self.curvature) + 2
        if span >= self.width:
            raise ConfigError(
                f"spinal cord band ({span:.1f} px incl. CSF and curvature) does not fit width {self.width}"
            )
        if self.height - 2 * self.vertical_margin < 6:
            raise ConfigError("vertical_margin leaves no room for six segments")
        if not 0.0 <= self.stenosis < 1.0:
            raise ConfigError("stenosis must lie in [0, 1)")
        if not (self.background_intensity < self.sc_intensity < self.csf_intensity):
            raise ConfigError("expected background < SC < CSF intensity ordering")


def _desk_target_site() -> PhantomConfig:
    # target site differs from the healthy pretraining site: disc-level narrowing,
    # brighter CSF, stronger bias field
    return PhantomConfig(stenosis=0.45, gray_matter=0.08, csf_intensity=0.9, modulation=0.18, curvature=8.0)


@dataclass
class CorpusConfig:
    healthy: PhantomConfig = field(default_factory=PhantomConfig)
    target: PhantomConfig = field(default_factory=_desk_target_site)
    n_healthy: int = 200
    n_target: int = 40
    prevalence: float = 0.3
    max_anomalies: int = 3

    def validate(self) -> None:
        self.healthy.validate()
        self.target.validate()
        if (self.healthy.height, self.healthy.width) != (self.target.height, self.target.width):
            raise ConfigError("healthy and target sites must share the image size")
        if self.n_healthy < 0 or self.n_target < 0:
            raise ConfigError("case counts must be non-negative")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ConfigError("prevalence must lie in [0, 1]")
        if not 1 <= self.max_anomalies <= 3:
            raise ConfigError("max_anomalies must lie in [1, 3]")


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    edge_weight: float = 0.1
    in_chans: int = 1

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 for 2D sine-cosine encodings")
        if self.encoder_depth < 1:
            raise ConfigError("encoder_depth must be >= 1")
        if self.decoder_depth < 0:
            raise ConfigError("decoder_depth must be >= 0")
        if self.edge_weight < 0:
            raise ConfigError("edge_weight must be >= 0")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")


@dataclass
class ScheduleConfig:
    pretrain_epochs: int = 200
    adapt_epochs: int = 200
    stage1_epochs: int = 150
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.95)
    lr_step: int = 50
    lr_gamma: float = 0.1
    batch_size: int = 8
    augment: bool = True
    adapt_augment: bool = True
    augment_noise_variance: float = 0.02

    @property
    def stage2_epochs(self) -> int:
        return self.adapt_epochs - self.stage1_epochs

    def validate(self) -> None:
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0 <= self.stage1_epochs <= self.adapt_epochs:
            raise ConfigError("stage1_epochs must lie within adapt_epochs")
        if self.lr <= 0 or self.lr_step < 1 or not 0 < self.lr_gamma <= 1:
            raise ConfigError("invalid learning-rate schedule")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class UncertaintyConfig:
    mc_samples: int = 10
    mask_ratio: float = 0.75
    temperature: float = 1.0
    refresh_interval: int = 10
    top_k: int = 3
    # quantile applied to AU before component extraction in the exclusion stage
    exclusion_quantile: float = 0.95

    def validate(self) -> None:
        if self.mc_samples < 2:
            raise ConfigError("mc_samples (K) must be >= 2")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval (Q) must be >= 1")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")
        if not 0.0 <= self.exclusion_quantile < 1.0:
            raise ConfigError("exclusion_quantile must lie in [0, 1)")


@dataclass
class DetectionConfig:
    percentile: float = 0.20
    top_k: int = 3
    connectivity: int = 8
    curve_source: str = "postprocessed"
    axis: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.percentile < 1.0:
            raise ConfigError("percentile must lie in [0, 1)")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if self.curve_source not in ("postprocessed", "raw"):
            raise ConfigError("curve_source must be 'postprocessed' or 'raw'")
        if self.axis not in (0, 1):
            raise ConfigError("axis must be 0 (rows) or 1 (columns)")


@dataclass
class EvalConfig:
    folds: int = 5
    repeats: int = 20
    target_sensitivity: float = 0.90
    noise_variances: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1, 0.4)
    downsample_factors: tuple[int, ...] = (1, 2, 4)
    k_values: tuple[int, ...] = (3, 10, 20)
    mask_ratios: tuple[float, ...] = (0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95)
    temperatures: tuple[float, ...] = (0.5, 1.0, 2.0)

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not 0.0 < self.target_sensitivity <= 1.0:
            raise ConfigError("target_sensitivity must lie in (0, 1]")
        if any(f < 1 for f in self.downsample_factors):
            raise ConfigError("downsample factors must be >= 1")


@dataclass
class IOConfig:
    data_dir: str = "data"
    run_dir: str = "runs/default"
    seed: int = 0
    device: str = "cpu"

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.device not in ("cpu", "accelerator"):
            raise ConfigError("device must be 'cpu' or 'accelerator'")


@dataclass
class RunConfig:
    phantom: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        img = self.phantom.healthy
        p = self.model.patch_size
        if img.height % p or img.width % p:
            raise ConfigError(f"patch_size {p} must divide the image size {img.height}x{img.width}")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def snapshot(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Mapping, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) at '{where or 'root'}': {sorted(unknown)}")
    base = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{where}.{f.name}" if where else f.name
        value = data[f.name]
        if dataclasses.is_dataclass(hints[f.name]) and isinstance(value, Mapping):
            merged = _to_plain(getattr(base, f.name))
            _deep_update(merged, value)
            value = merged
        kwargs[f.name] = _coerce(hints[f.name], value, sub)
    return dataclasses.replace(base, **kwargs)


def _deep_update(dst: dict, src: Mapping) -> dict:
    for k, v in src.items():
        if isinstance(v, Mapping) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v
    return dst


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Collect ``U2AD_SECTION__KEY=value`` variables into a nested mapping.

    Values are parsed as YAML scalars, so ``U2AD_UNCERTAINTY__MC_SAMPLES=5`` yields an int.
    """
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        try:
            node[path[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {key}={raw!r}") from exc
    return out


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Defaults < config file < environment < explicit overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from exc
        if not isinstance(loaded, Mapping):
            raise ConfigError("config root must be a mapping")
        _deep_update(data, loaded)
    _deep_update(data, env_overrides(environ))
    if overrides:
        _deep_update(data, overrides)
    return _build(RunConfig, data).validate()


def from_dict(data: Mapping) -> RunConfig:
    return _build(RunConfig, data).validate()
