"""Run configuration: TOML file with one section per component plus dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .bottleneck import BottleneckConfig
from .encoder import IMAGENET_MEAN, IMAGENET_STD, ConfigurationError
from .objective import SCHEMES

# train iterations, input size and top-z% per benchmark
DATASET_PRESETS: dict[str, dict[str, Any]] = {
    "mvtec_ad": {"total_iters": 40_000, "image_size": 392, "z_percent": 1.0},
    "visa": {"total_iters": 40_000, "image_size": 392, "z_percent": 1.0},
    "mpdd": {"total_iters": 20_000, "image_size": 392, "z_percent": 1.0},
    "btad": {"total_iters": 20_000, "image_size": 392, "z_percent": 1.0},
    "real_iad": {"total_iters": 100_000, "image_size": 392, "z_percent": 0.1},
    "manta_tiny": {"total_iters": 100_000, "image_size": 280, "z_percent": 1.0},
    "mvtec3d": {"total_iters": 40_000, "image_size": 392, "z_percent": 1.0},
    "mulsen_ad": {"total_iters": 20_000, "image_size": 392, "z_percent": 1.0},
    "uni_medical": {"total_iters": 40_000, "image_size": 280, "z_percent": 1.0},
    "apocell": {"total_iters": 10_000, "image_size": 280, "z_percent": 1.0},
    "miad": {"total_iters": 100_000, "image_size": 392, "z_percent": 1.0},
    "drone_anomaly": {"total_iters": 10_000, "image_size": 392, "z_percent": 1.0},
}


@dataclass
class EncoderSection:
    weight_id: str = "toy:0"
    depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    patch_size: int = 14
    num_prefix_tokens: int = 1
    layers: list[int] = field(default_factory=list)  # empty -> built-in policy
    recenter: bool = True
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


@dataclass
class DecoderSection:
    num_layers: int = 8
    num_heads: Optional[int] = None
    mixer: str = "linear_attention"
    mlp_ratio: float = 4.0


@dataclass
class ObjectiveSection:
    scheme: str = "group2"
    loss: str = "loose"  # or "plain"
    discard_rate_final: float = 0.9
    warmup_iters: int = 1000
    grad_scale: float = 0.1

    def __post_init__(self):
        if self.loss not in ("loose", "plain"):
            raise ConfigurationError("objective.loss must be 'loose' or 'plain'")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"objective.scheme {self.scheme!r} not one of {', '.join(SCHEMES)}")


@dataclass
class ScoringSection:
    z_percent: Optional[float] = None  # None -> dataset preset, else 1.0
    sigma: float = 4.0
    fpr_limit: float = 0.3


@dataclass
class DataSection:
    root: Optional[str] = None  # None -> $DINOLAB_DATA
    layout: str = "mvtec"
    dataset: str = ""
    image_size: Optional[int] = None  # None -> dataset preset, else 392
    categories: list[str] = field(default_factory=list)
    fusion: str = "none"  # or "rgb_depth"
    few_shot: int = 0
    few_shot_seed: int = 0
    augmentations: list[str] = field(default_factory=lambda: ["hflip", "vflip", "rotate", "translate"])
    rotate_degrees: float = 15.0
    translate_fraction: float = 0.1
    workers: int = 0

    def __post_init__(self):
        if self.fusion not in ("none", "rgb_depth"):
            raise ConfigurationError("data.fusion must be 'none' or 'rgb_depth'")


@dataclass
class TrainConfig:
    lr_peak: float = 2e-3
    lr_floor: float = 2e-4
    warmup_iters: int = 100
    total_iters: Optional[int] = None  # None -> dataset preset
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-10
    clip_threshold: float = 1.0
    batch_size: int = 16
    seed: int = 0
    device: str = "cpu"
    mixed_precision: bool = False
    cache_features: bool = False
    checkpoint_every: int = 0
    log_every: int = 10
    max_bad_steps: int = 10
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not 0 < self.lr_floor <= self.lr_peak:
            raise ConfigurationError("need 0 < lr_floor <= lr_peak")
        if self.total_iters is not None and self.warmup_iters >= self.total_iters:
            raise ConfigurationError("warmup_iters must be smaller than total_iters")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")


@dataclass
class RunConfig:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    # resolved values -------------------------------------------------
    @property
    def preset(self) -> dict:
        return DATASET_PRESETS.get(self.data.dataset, {})

    @property
    def image_size(self) -> int:
        return self.data.image_size or self.preset.get("image_size", 392)

    @property
    def z_percent(self) -> float:
        return self.scoring.z_percent or self.preset.get("z_percent", 1.0)

    @property
    def total_iters(self) -> int:
        it = self.train.total_iters or self.preset.get("total_iters")
        if it is None:
            raise ConfigurationError("train.total_iters unset and no dataset preset applies")
        return it

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_digest(self) -> str:
        """Hash of everything that shapes the trainable model and its targets."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("encoder", "bottleneck", "decoder")}
        keep["objective"] = {"scheme": d["objective"]["scheme"]}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "encoder": EncoderSection, "bottleneck": BottleneckConfig, "decoder": DecoderSection,
    "objective": ObjectiveSection, "scoring": ScoringSection, "data": DataSection, "train": TrainConfig,
}
_TUPLE_FIELDS = {"mean", "std", "betas"}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"[{where}]: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return RunConfig(**{name: _build(cls, d.get(name, {}), name) for name, cls in _SECTION_TYPES.items()})


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as TOML, else taken as strings)."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        section, _, name = key.strip().partition(".")
        d.setdefault(section, {})[name] = _parse_value(value.strip())
    return d


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    d: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    return config_from_dict(apply_overrides(d, overrides))


def dump_toml(cfg: RunConfig) -> str:
    """Minimal TOML writer for the flat sections of :class:`RunConfig`."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is None:
                continue
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {v!r}")
