"""Experiment configuration.

A config is one JSON document with four sections: ``net`` (architecture),
``diffusion`` (noise schedule), ``pretrain`` (toy prior) and ``apt``
(personalization). Built-in presets ship as package data and are addressed
by name; files and ``section.key=value`` overrides are layered on top.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from aptdiff.constants import (
    ADAPTER_RANK,
    BATCH_SIZE,
    BETA_END,
    BETA_START,
    DEFAULT_IDENTIFIER,
    EMA_ALPHA,
    GUIDANCE_SCALE,
    LAMBDA_ATTN,
    LAMBDA_DIST,
    NUM_BINS,
    NUM_TIMESTEPS,
    P_MAX,
    ROTATION_RANGE_DEG,
    ZOOM_OUT_RANGE,
)
from aptdiff.sanitize import validate_token
from aptdiff.tinynet import NetConfig

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "default"


@dataclass(frozen=True)
class DiffusionConfig:
    num_timesteps: int = NUM_TIMESTEPS
    beta_start: float = BETA_START
    beta_end: float = BETA_END

    def validate(self) -> None:
        if self.num_timesteps < 2:
            raise ValueError("diffusion.num_timesteps must be >= 2")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 5000
    corpus_size: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    p_uncond: float = 0.1
    val_size: int = 64
    log_every: int = 250
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("pretrain.steps must be >= 0")
        if self.corpus_size < 1:
            raise ValueError("pretrain.corpus_size must be >= 1")
        if self.batch_size < 1 or self.val_size < 1:
            raise ValueError("pretrain.batch_size and pretrain.val_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("pretrain.lr must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError("pretrain.p_uncond must be in [0, 1)")
        if self.log_every < 1:
            raise ValueError("pretrain.log_every must be >= 1")


@dataclass(frozen=True)
class AptConfig:
    """Personalization settings."""

    lambda_dist: float = LAMBDA_DIST
    lambda_attn: float = LAMBDA_ATTN
    p_max: float = P_MAX
    bins: int = NUM_BINS
    ema_alpha: float = EMA_ALPHA
    temperature_mode: str | float = "full"
    adapter_rank: int = ADAPTER_RANK
    adapter_alpha: float | None = None
    lr_adapter: float = 1e-3
    lr_token: float = 1e-4
    weight_decay: float = 0.01
    steps: int = 2000
    seed: int = 0
    ata: bool = True
    rs: bool = True
    aa: bool = True
    batch_size: int = BATCH_SIZE
    identifier: str = DEFAULT_IDENTIFIER
    num_references: int = 1
    reference_manifest: str | None = None
    scale_range: tuple[float, float] = ZOOM_OUT_RANGE
    rotation_range: tuple[float, float] = ROTATION_RANGE_DEG
    aug_fill: float | None = None
    stat_reduction: str = "channel"
    align_self_attention: bool = False
    checkpoint_every: int = 200
    num_probes: int = 64
    probe_seed: int = 1234
    delta_noise_conditioning: str = "training"
    guidance_scale: float = GUIDANCE_SCALE

    def __post_init__(self) -> None:
        for name in ("scale_range", "rotation_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self, num_timesteps: int = NUM_TIMESTEPS) -> None:
        for name in ("lambda_dist", "lambda_attn"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"apt.{name} must be finite and >= 0")
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError("apt.p_max must be in [0, 1]")
        if self.bins < 1 or num_timesteps % self.bins:
            raise ValueError(
                f"apt.bins ({self.bins}) must divide diffusion.num_timesteps ({num_timesteps})"
            )
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("apt.ema_alpha must be in (0, 1]")
        if isinstance(self.temperature_mode, str):
            if self.temperature_mode not in ("full", "tenth"):
                raise ValueError("apt.temperature_mode must be 'full', 'tenth' or a number")
        elif not self.temperature_mode > 0:
            raise ValueError("apt.temperature_mode must be positive")
        if self.adapter_rank < 1:
            raise ValueError("apt.adapter_rank must be >= 1")
        if self.lr_adapter <= 0 or self.lr_token <= 0 or self.weight_decay < 0:
            raise ValueError("apt learning rates must be > 0 and weight_decay >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("apt.steps must be >= 0 and apt.batch_size >= 1")
        validate_token(self.identifier)
        if not 1 <= self.num_references <= 10:
            raise ValueError("apt.num_references must be in [1, 10]")
        if self.scale_range[0] < 1.0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError("apt.scale_range must satisfy 1 <= min <= max")
        if self.rotation_range[0] != -self.rotation_range[1]:
            raise ValueError("apt.rotation_range must be symmetric about 0")
        if self.stat_reduction not in ("channel", "layer"):
            raise ValueError("apt.stat_reduction must be 'channel' or 'layer'")
        if self.align_self_attention:
            raise ValueError("apt.align_self_attention is not supported")
        if self.checkpoint_every < 1 or self.num_probes < 1:
            raise ValueError("apt.checkpoint_every and apt.num_probes must be >= 1")
        if self.delta_noise_conditioning not in ("training", "class"):
            raise ValueError("apt.delta_noise_conditioning must be 'training' or 'class'")

    @property
    def variant_name(self) -> str:
        return variant_name(self.ata, self.rs, self.aa)


def variant_name(ata: bool, rs: bool, aa: bool) -> str:
    flags = [name for name, on in (("ata", ata), ("rs", rs), ("aa", aa)) if on]
    return "base" if not flags else "+".join(flags)


_SECTIONS = {
    "net": NetConfig,
    "diffusion": DiffusionConfig,
    "pretrain": PretrainConfig,
    "apt": AptConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    apt: AptConfig = field(default_factory=AptConfig)

    def validate(self) -> ExperimentConfig:
        self.net.validate()
        self.diffusion.validate()
        self.pretrain.validate()
        self.apt.validate(self.diffusion.num_timesteps)
        return self

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "diffusion": asdict(self.diffusion),
            "pretrain": asdict(self.pretrain),
            "apt": {
                k: list(v) if isinstance(v, tuple) else v
                for k, v in asdict(self.apt).items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        """Build from a (possibly partial) dict; unknown keys raise ValueError."""
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"Unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for section, section_cls in _SECTIONS.items():
            values = data.get(section, {})
            if not isinstance(values, dict):
                raise ValueError(f"Config section '{section}' must be an object")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ValueError(f"Unknown keys in '{section}': {sorted(bad)}")
            kwargs[section] = section_cls(**values)
        return cls(**kwargs).validate()

    def with_apt(self, **changes: object) -> ExperimentConfig:
        return replace(self, apt=replace(self.apt, **changes)).validate()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _merge(base: dict, update: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = value
    return out


def list_presets() -> list[str]:
    root = importlib.resources.files("aptdiff") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def preset_dict(name: str) -> dict:
    """Raw dict of a built-in preset; raises KeyError for unknown names."""
    resource = importlib.resources.files("aptdiff") / "configs" / f"{name}.json"
    if not resource.is_file():
        raise KeyError(f"Unknown config preset '{name}' (available: {list_presets()})")
    return json.loads(resource.read_text(encoding="utf-8"))


def builtin_config(name: str = DEFAULT_PRESET) -> ExperimentConfig:
    return ExperimentConfig.from_dict(preset_dict(name))


def load_config(path: str | Path, preset: str | None = DEFAULT_PRESET) -> ExperimentConfig:
    """Read a config file, layered over ``preset`` when given."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"Invalid JSON in {path.name}: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path.name} must contain a JSON object")
    base = preset_dict(preset) if preset else {}
    return ExperimentConfig.from_dict(_merge(base, data))


def _parse_value(raw: str) -> object:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    if not overrides:
        return config
    data = config.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ValueError(f"Override '{item}' must look like section.key=value")
        if section not in data:
            raise ValueError(f"Unknown config section '{section}' in override '{item}'")
        data[section][name] = _parse_value(raw.strip())
    return ExperimentConfig.from_dict(data)


def resolve_config(
    preset: str | None = DEFAULT_PRESET,
    path: str | Path | None = None,
    overrides: list[str] | None = None,
) -> ExperimentConfig:
    """preset, then file, then overrides."""
    if path is not None:
        config = load_config(path, preset)
    else:
        config = builtin_config(preset or DEFAULT_PRESET)
    return apply_overrides(config, overrides or [])


# ---------------------------------------------------------------------------
# Hashing and run directories
# ---------------------------------------------------------------------------


def config_hash(config: ExperimentConfig, sections: tuple[str, ...] | None = None) -> str:
    """sha256 of the canonical JSON of ``config`` (optionally a subset of sections)."""
    data = config.to_dict()
    if sections is not None:
        data = {s: data[s] for s in sections}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


PRIOR_SECTIONS = ("net", "diffusion", "pretrain")


def prior_dir(runs_root: str | Path, config: ExperimentConfig) -> Path:
    digest = config_hash(config, PRIOR_SECTIONS)[:10]
    return Path(runs_root) / f"prior-{digest}-s{config.pretrain.seed}"


def run_dir(runs_root: str | Path, config: ExperimentConfig) -> Path:
    return Path(runs_root) / f"{config_hash(config)[:10]}-s{config.apt.seed}"


def ablation_dir(runs_root: str | Path, config: ExperimentConfig) -> Path:
    base = config.with_apt(ata=True, rs=True, aa=True)
    return Path(runs_root) / f"ablation-{config_hash(base)[:10]}-s{config.apt.seed}"
