"""Run configuration: YAML in, validated dataclasses out.

Every stage reads the same file; unknown keys are rejected so typos fail
loudly instead of silently using defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .field import FieldConfig, HashEncodingConfig
from .fusion import FusionConfig
from .rendering import RenderConfig
from .sampling import SamplingConfig
from .training import TrainConfig

SCENE_PRESETS = ("sphere", "torus", "thin_plate", "sphere_union")


@dataclass
class SceneConfig:
    preset: str = "sphere"
    n_views: int = 16
    image_size: int = 64
    camera_distance: float = 1.8
    background: str = "white"

    def validate(self):
        if self.preset not in SCENE_PRESETS:
            raise ConfigError(f"scene preset must be one of {SCENE_PRESETS}")
        if self.n_views < 2 or self.image_size < 8:
            raise ConfigError("need at least 2 views and 8px images")


@dataclass
class PriorStageConfig:
    groups: int = 2
    resolution: int = 96
    noise_std: float = 0.003
    bias_amp: float = 0.04
    bias_freq: float = 5.0
    crop: bool = True
    crop_overlap: float = 0.08

    def validate(self):
        if self.groups < 1:
            raise ConfigError("need at least one prior group")
        if self.groups > 2:
            raise ConfigError("scene presets define two opposed prior groups")
        if self.resolution < 8:
            raise ConfigError("prior resolution too small")


@dataclass
class FieldStageConfig:
    levels: int = 12
    features_per_level: int = 2
    table_size_log2: int = 15
    base_resolution: int = 16
    growth_factor: float = 1.42
    color_levels: int = 8
    color_table_size_log2: int = 15
    hidden_width: int = 64
    hidden_layers: int = 2

    def to_field_config(self) -> FieldConfig:
        geo = HashEncodingConfig(levels=self.levels,
                                 features_per_level=self.features_per_level,
                                 table_size_log2=self.table_size_log2,
                                 base_resolution=self.base_resolution,
                                 growth_factor=self.growth_factor)
        color = HashEncodingConfig(levels=self.color_levels,
                                   features_per_level=self.features_per_level,
                                   table_size_log2=self.color_table_size_log2,
                                   base_resolution=self.base_resolution,
                                   growth_factor=self.growth_factor)
        geo.validate()
        color.validate()
        return FieldConfig(geo_encoding=geo, color_encoding=color,
                           hidden_width=self.hidden_width,
                           hidden_layers=self.hidden_layers)


@dataclass
class RenderStageConfig:
    s_width_voxels: float = 2.0   # initial logistic transition width, in basis voxels
    patch_half_width: int = 2
    background: str = "white"

    def to_render_config(self, basis_spacing: float) -> RenderConfig:
        cfg = RenderConfig(s_init=4.0 / (self.s_width_voxels * basis_spacing),
                           patch_half_width=self.patch_half_width,
                           background=self.background)
        cfg.validate()
        return cfg


@dataclass
class ExtractConfig:
    resolution: int = 160

    def validate(self):
        if self.resolution < 8:
            raise ConfigError("extract resolution too small")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    scene: SceneConfig = field(default_factory=SceneConfig)
    priors: PriorStageConfig = field(default_factory=PriorStageConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    field_net: FieldStageConfig = field(default_factory=FieldStageConfig)
    render: RenderStageConfig = field(default_factory=RenderStageConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)

    def validate(self):
        self.scene.validate()
        self.priors.validate()
        self.fusion.validate()
        self.sampling.validate()
        self.train.validate()
        self.extract.validate()
        self.field_net.to_field_config()

    # stage seeds fan out from the global seed by fixed offsets
    def scene_seed(self) -> int:
        return self.seed + 1000

    def prior_seed(self, group: int) -> int:
        return self.seed + 2000 + group

    def train_seed(self) -> int:
        return self.seed + 3000


def _from_mapping(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# YAML section key -> (RunConfig attribute, dataclass)
_SECTIONS = {
    "scene": ("scene", SceneConfig),
    "priors": ("priors", PriorStageConfig),
    "fusion": ("fusion", FusionConfig),
    "sampling": ("sampling", SamplingConfig),
    "field": ("field_net", FieldStageConfig),
    "render": ("render", RenderStageConfig),
    "train": ("train", TrainConfig),
    "extract": ("extract", ExtractConfig),
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTIONS) - {"seed", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = int(data["seed"])
    if "out_dir" in data:
        cfg.out_dir = str(data["out_dir"])
    for key, (attr, cls) in _SECTIONS.items():
        if key in data:
            setattr(cfg, attr, _from_mapping(cls, data[key], key))
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for key, (attr, _) in _SECTIONS.items():
        section = asdict(getattr(cfg, attr))
        for name, value in section.items():
            if isinstance(value, tuple):
                section[name] = list(value)
        out[key] = section
    return out


def load_config(path) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    return config_from_dict(data or {})


def save_config(path, cfg: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)
