"""Run configuration: a sectioned key-value (INI) file mirroring each
module's config type, resolved against a scale preset.

The fully-resolved configuration serializes canonically, and its SHA-256
hash (first 12 hex digits) plus the global seed are embedded in every
artifact a run emits, so any reported number can be traced to the exact
settings that produced it.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .augment import AugmentConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration file or invalid field value."""


# Scale presets: "full" matches the production geometry (1000 px frames,
# 700 px crops, 352 px tiles, full-width model); "half" halves every linear
# dimension and shrinks the model so an end-to-end run stays minutes-scale.
PRESETS = {
    "full": {
        "image_size": 1000, "crop_size": 700, "tile": 352,
        "width_multiplier": 1.0, "final_floor": 4,
    },
    "half": {
        "image_size": 500, "crop_size": 350, "tile": 176,
        "width_multiplier": 0.0625, "final_floor": 256,
    },
}


@dataclass
class SynthSection:
    n: int = 322
    damaged_frac: float = 0.5


@dataclass
class ImagingSection:
    image_size: int = 500
    crop_size: int = 350
    tile: int = 176
    bbox_source: str = "annotation"     # annotation | detector
    brightness_quantile: float = 0.99
    min_area: int = 200


@dataclass
class ModelSection:
    arch: str = "vdcnet"                # vdcnet | reference
    width_multiplier: float = 0.0625
    head_pool_mode: str = "avg"
    final_floor: int = 256


@dataclass
class TrainSection:
    max_epochs: int = 100
    batch_size: int = 6
    early_stop_patience: int = 20
    lr_plateau_patience: int = 6
    lr_factor: float = 0.1
    learning_rate: float = 1e-3
    test_frac: float = 0.10
    folds: int = 5


@dataclass
class CamSection:
    method: str = "grad-cam"            # cam | grad-cam | score-cam
    dilation_px: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "half"
    synth: SynthSection = field(default_factory=SynthSection)
    imaging: ImagingSection = field(default_factory=ImagingSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    cam: CamSection = field(default_factory=CamSection)

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.imaging.bbox_source not in ("annotation", "detector"):
            raise ConfigError(f"bbox_source must be annotation|detector, got {self.imaging.bbox_source!r}")
        if self.model.arch not in ("vdcnet", "reference"):
            raise ConfigError(f"arch must be vdcnet|reference, got {self.model.arch!r}")
        if self.cam.method not in ("cam", "grad-cam", "score-cam"):
            raise ConfigError(f"unknown cam method {self.cam.method!r}")
        if self.imaging.tile % 16:
            raise ConfigError(f"tile size must be a multiple of 16, got {self.imaging.tile}")
        if not 0.0 < self.train.test_frac < 1.0:
            raise ConfigError("test_frac must lie in (0, 1)")
        if self.train.folds < 2:
            raise ConfigError("folds must be at least 2")
        try:
            self.augment.validate()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- derived module configs -------------------------------------------
    def train_config(self):
        t = self.train
        return TrainConfig(max_epochs=t.max_epochs, batch_size=t.batch_size,
                           early_stop_patience=t.early_stop_patience,
                           lr_plateau_patience=t.lr_plateau_patience,
                           lr_factor=t.lr_factor, learning_rate=t.learning_rate,
                           seed=self.seed)

    def build_model(self, head_pool_mode=None):
        from .models import build_reference_net, build_vdcnet
        mode = head_pool_mode or self.model.head_pool_mode
        if self.model.arch == "vdcnet":
            return build_vdcnet(width_multiplier=self.model.width_multiplier,
                                input_size=self.imaging.tile, head_pool_mode=mode,
                                seed=self.seed, final_floor=self.model.final_floor)
        return build_reference_net(width_multiplier=self.model.width_multiplier,
                                   input_size=self.imaging.tile, head_pool_mode=mode,
                                   seed=self.seed)

    # -- serialization ----------------------------------------------------
    def _sections(self):
        return {"synth": self.synth, "imaging": self.imaging, "augment": self.augment,
                "model": self.model, "train": self.train, "cam": self.cam}

    def to_ini(self):
        """Canonical fully-resolved INI text (stable field order)."""
        parser = configparser.ConfigParser()
        parser["run"] = {"seed": repr(self.seed), "preset": self.preset}
        for name, section in self._sections().items():
            parser[name] = {}
            for f in fields(section):
                value = getattr(section, f.name)
                if f.name == "seed":
                    continue        # augmentation reuses the global seed
                if isinstance(value, tuple):
                    parser[name][f.name] = ", ".join(repr(v) for v in value)
                else:
                    parser[name][f.name] = repr(value) if not isinstance(value, str) else value
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def config_hash(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]

    def stamp(self):
        """Provenance fields embedded in every emitted artifact."""
        return {"config_hash": self.config_hash(), "seed": self.seed}

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def default_config(preset="half", seed=0) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    p = PRESETS[preset]
    cfg = RunConfig(seed=seed, preset=preset)
    cfg.imaging.image_size = p["image_size"]
    cfg.imaging.crop_size = p["crop_size"]
    cfg.imaging.tile = p["tile"]
    cfg.model.width_multiplier = p["width_multiplier"]
    cfg.model.final_floor = p["final_floor"]
    cfg.augment.seed = seed
    return cfg


def _parse_value(text, template):
    if isinstance(template, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != len(template):
            raise ConfigError(f"expected {len(template)} values, got {text!r}")
        return tuple(type(t)(p) for t, p in zip(template, parts))
    return text


def load_config(path, preset=None, seed=None) -> RunConfig:
    """Read an INI file over preset defaults; ``preset``/``seed`` arguments
    override the file's [run] section."""
    parser = configparser.ConfigParser()
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not read:
        raise ConfigError(f"cannot read config file {path}")

    file_preset = parser.get("run", "preset", fallback="half")
    file_seed = parser.getint("run", "seed", fallback=0)
    cfg = default_config(preset=preset or file_preset,
                         seed=seed if seed is not None else file_seed)
    known = cfg._sections()
    for section in parser.sections():
        if section == "run":
            continue
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        target = known[section]
        valid = {f.name for f in fields(target)}
        for key, text in parser[section].items():
            if key not in valid or key == "seed":
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                setattr(target, key, _parse_value(text, getattr(target, key)))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
    cfg.augment.seed = cfg.seed
    return cfg.validate()
