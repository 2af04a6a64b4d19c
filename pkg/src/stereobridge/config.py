"""Run configuration: INI files, CLI overrides, canonical hashing.

Every field is addressable as section.key both in config files and via
`--set section.key=value` on the command line. The output directory is
the one setting that an environment variable (STEREOBRIDGE_OUTDIR) may
override, so batch jobs can redirect artifacts without editing files.
"""

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Tuple

from .bridge import SCHEDULE_PRESETS, ScheduleParams
from .model import ModelConfig
from .objectives import LossWeights

OUTDIR_ENV = "STEREOBRIDGE_OUTDIR"


class ConfigError(Exception):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class DataConfig:
    image_height: int = 80
    image_width: int = 144
    crop_height: int = 64
    crop_width: int = 128
    max_disp_px: int = 24  # full-resolution synthetic disparity cap
    num_shapes: int = 5
    octaves: int = 3

    def __post_init__(self):
        if self.crop_height > self.image_height or self.crop_width > self.image_width:
            raise ValueError("crop larger than the generated image")
        if self.crop_height % 16 or self.crop_width % 16:
            raise ValueError("crop dims must divide by 16")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "unrolled"  # or "bridge" (teacher-forced interpolants)
    steps: int = 1200
    batch_size: int = 2
    lr: float = 2e-4
    weight_decay: float = 1e-5
    clip_value: float = 1.0
    train_iters: int = 5
    update_rule: str = "cumulative"
    plain_linear: bool = False
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if self.mode not in ("unrolled", "bridge"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.update_rule not in ("euler", "cumulative"):
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if self.steps < 1 or self.batch_size < 1 or self.train_iters < 1:
            raise ValueError("steps, batch size and train iters must be positive")
        if self.lr <= 0 or self.clip_value <= 0:
            raise ValueError("lr and clip value must be positive")


@dataclass(frozen=True)
class EvalConfig:
    iters: Tuple[int, ...] = (1, 2, 4, 8)
    samples: int = 6

    def __post_init__(self):
        if not self.iters or any(n < 1 for n in self.iters):
            raise ValueError("eval iteration counts must be positive")
        if self.samples < 1:
            raise ValueError("need at least one eval sample")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"


_SECTIONS = ("model", "schedule", "loss", "data", "train", "eval", "paths")


def _desk_model() -> ModelConfig:
    return ModelConfig(
        feature_channels=32,
        groups=4,
        max_disp=16,
        hidden_channels=64,
        context_channels=64,
        regularizer_channels=16,
        head_channels=64,
        lookup_radius=4,
    )


def desk_config() -> RunConfig:
    """Default configuration: trainable on one CPU in minutes.

    Training unrolls the full eight refinement steps with a 0.8
    discount so late iterations dominate the objective; that is what
    makes the extra inference iterations pay off at this scale.
    """
    return RunConfig(
        model=_desk_model(),
        data=DataConfig(max_disp_px=16),
        train=replace(TrainConfig(), steps=1600, train_iters=8),
        loss=LossWeights(gamma=0.8),
        out_dir="runs/desk",
    )


def mini_config() -> RunConfig:
    """Throwaway-size configuration for smoke tests and demos."""
    return RunConfig(
        model=ModelConfig(
            feature_channels=16,
            groups=4,
            max_disp=12,
            hidden_channels=48,
            context_channels=48,
            regularizer_channels=8,
            head_channels=48,
            lookup_radius=3,
        ),
        data=DataConfig(
            image_height=48,
            image_width=96,
            crop_height=32,
            crop_width=80,
            max_disp_px=16,
            num_shapes=4,
        ),
        train=replace(TrainConfig(), steps=150, batch_size=1, train_iters=3),
        eval=EvalConfig(iters=(1, 2, 4), samples=4),
        out_dir="runs/mini",
    )


def sceneflow_config() -> RunConfig:
    """Published large-scale settings; listed for completeness, never
    exercised by the test suite (days of compute)."""
    return RunConfig(
        model=ModelConfig(),  # 128-wide recurrence, 48 disparity planes
        data=DataConfig(
            image_height=540,
            image_width=960,
            crop_height=320,
            crop_width=736,
            max_disp_px=191,
        ),
        train=TrainConfig(steps=400_000, batch_size=8, train_iters=22),
        eval=EvalConfig(iters=(1, 2, 3, 4, 8, 32), samples=64),
        out_dir="runs/sceneflow",
    )


PRESETS = {
    "desk": desk_config,
    "mini": mini_config,
    "sceneflow": sceneflow_config,
}


def _section_obj(cfg: RunConfig, section: str):
    if section == "paths":
        return None
    return getattr(cfg, section)


def _field_map(obj) -> Dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(obj)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, template):
    raw = raw.strip()
    if isinstance(template, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"expected an integer, got {raw!r}") from e
    if isinstance(template, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"expected a number, got {raw!r}") from e
    if isinstance(template, tuple):
        try:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        except ValueError as e:
            raise ConfigError(f"expected a comma list of integers, got {raw!r}") from e
    return raw


def config_items(cfg: RunConfig) -> List[Tuple[str, str, str]]:
    """Canonical (section, key, value) triples, sorted."""
    items = []
    for section in _SECTIONS:
        if section == "paths":
            items.append(("paths", "out_dir", cfg.out_dir))
            continue
        obj = _section_obj(cfg, section)
        for f in fields(obj):
            items.append((section, f.name, _format_value(getattr(obj, f.name))))
    return sorted(items)


def config_hash(cfg: RunConfig) -> str:
    """Short stable digest of the settings that shape the trained model.

    Output paths and evaluation knobs are reporting parameters, not
    part of the artifact's identity, so they stay out of the digest and
    a checkpoint remains loadable when only those change.
    """
    text = "\n".join(
        f"{s}.{k}={v}" for s, k, v in config_items(cfg) if s not in ("paths", "eval")
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def to_ini_text(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for s, k, v in config_items(cfg):
            if s == section:
                lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_ini_text(cfg))


def set_options(cfg: RunConfig, updates: List[Tuple[str, str, str]]) -> RunConfig:
    """Apply (section, key, raw value) triples, one replace per section.

    Grouping keeps interdependent fields (say hidden and context width)
    changeable together without tripping validation halfway through.
    """
    grouped: Dict[str, Dict[str, object]] = {}
    for section, key, raw in updates:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if section == "paths":
            if key != "out_dir":
                raise ConfigError(f"unknown key paths.{key}")
            grouped.setdefault("paths", {})["out_dir"] = raw.strip()
            continue
        obj = _section_obj(cfg, section)
        if key not in _field_map(obj):
            raise ConfigError(f"unknown key {section}.{key}")
        grouped.setdefault(section, {})[key] = _parse_value(raw, getattr(obj, key))
    for section, kwargs in grouped.items():
        if section == "paths":
            cfg = replace(cfg, out_dir=kwargs["out_dir"])
            continue
        try:
            cfg = replace(cfg, **{section: replace(_section_obj(cfg, section), **kwargs)})
        except ValueError as e:
            raise ConfigError(f"bad value in [{section}]: {e}") from e
    return cfg


def set_option(cfg: RunConfig, section: str, key: str, raw_value: str) -> RunConfig:
    """Return a copy of cfg with one section.key replaced."""
    return set_options(cfg, [(section, key, raw_value)])


def apply_overrides(cfg: RunConfig, assignments: List[str]) -> RunConfig:
    """Apply `section.key=value` strings as one batched update."""
    updates = []
    for item in assignments:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        updates.append((section.strip(), key.strip(), value))
    return set_options(cfg, updates)


def load_config(path: str, base: RunConfig = None) -> RunConfig:
    """Read an INI file on top of a base config (desk scale by default)."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    cfg = base if base is not None else desk_config()
    updates = []
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in {path}")
        for key, raw in parser.items(section):
            updates.append((section, key, raw))
    return set_options(cfg, updates)


def schedule_from_preset(name: str) -> ScheduleParams:
    if name not in SCHEDULE_PRESETS:
        raise ConfigError(
            f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}"
        )
    return SCHEDULE_PRESETS[name]


def resolve_out_dir(cfg: RunConfig) -> str:
    """Config value unless STEREOBRIDGE_OUTDIR is set."""
    return os.environ.get(OUTDIR_ENV) or cfg.out_dir
