"""Run configuration: training, MM-Lego and dataset settings.

Defaults are the full-size hyperparameters.  The ``desk``
profile shrinks the run to something a laptop CPU finishes in minutes;
every value it changes is listed in :attr:`RunConfig.overrides`.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .datagen import ModalitySpec, SyntheticSpec
from .encoders import EncoderConfig
from .errors import ConfigError
from .legoblock import BlockConfig
from .legofuse import FUSE_METHODS
from .spectral import PHASE_MODES
from .training import TaskSpec

log = logging.getLogger(__name__)

PROFILES = ("full", "desk")
MERGE_METHODS = ("harmonic",)
HEAD_METHODS = ("slerp",)


@dataclass
class TrainConfig:
    lr: float = 0.003
    epochs: int = 40
    patience: int = 7
    l1: float = 0.0002
    batch: int = 512
    optimizer: str = "adam"
    scheduler: str = "reduce_on_plateau"
    scheduler_patience: int = 3
    scheduler_factor: float = 0.5

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError(f"only the adam optimizer is implemented, got {self.optimizer!r}")
        if self.scheduler != "reduce_on_plateau":
            raise ConfigError(f"only reduce_on_plateau is implemented, got {self.scheduler!r}")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ConfigError("epochs must be >= 0, batch >= 1 and lr >= 0")


@dataclass
class LegoConfig:
    tune_epochs: int = 2
    tune_lr: float = 0.003
    fuse_method: str = "stack"
    merge_method: str = "harmonic"
    head_method: str = "slerp"
    alpha: float = 0.5
    phase_mode: str = "literal"
    track_imaginary: bool = True
    normalise: bool = True
    latent_dims: tuple = (17, 126)
    depth: int = 4
    attn_dim: int = 64
    head_dim: int = 64
    attn_dropout: float = 0.45
    fcnn_dropout: float = 0.36

    def __post_init__(self):
        self.latent_dims = tuple(int(v) for v in self.latent_dims)
        if self.fuse_method not in FUSE_METHODS:
            raise ConfigError(f"fuse_method must be one of {FUSE_METHODS}")
        if self.merge_method not in MERGE_METHODS:
            raise ConfigError(f"merge_method must be one of {MERGE_METHODS}")
        if self.head_method not in HEAD_METHODS:
            raise ConfigError(f"head_method must be one of {HEAD_METHODS}")
        if self.phase_mode not in PHASE_MODES:
            raise ConfigError(f"phase_mode must be one of {PHASE_MODES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")

    def block_config(self, kv_transform="2d"):
        return BlockConfig(latent_shape=self.latent_dims, depth=self.depth,
                           attn_dim=self.attn_dim, head_dim=self.head_dim,
                           attn_dropout=self.attn_dropout, fcnn_dropout=self.fcnn_dropout,
                           normalise=self.normalise, track_imaginary=self.track_imaginary,
                           kv_transform=kv_transform)


@dataclass
class EncoderSettings:
    """Encoder shape per modality kind; the input dim comes from the data."""

    snn_hidden: tuple = (256, 256, 256, 256)
    snn_dropout: float = 0.25
    abmil_hidden: tuple = (256,)
    abmil_gate: int = 128
    abmil_dropout: float = 0.25

    def __post_init__(self):
        self.snn_hidden = tuple(int(v) for v in self.snn_hidden)
        self.abmil_hidden = tuple(int(v) for v in self.abmil_hidden)

    def for_modality(self, kind, dim):
        if kind == "tabular":
            return EncoderConfig("snn", dim, self.snn_hidden, self.snn_dropout)
        return EncoderConfig("abmil", dim, self.abmil_hidden, self.abmil_dropout,
                             gate_dim=self.abmil_gate, attn_dropout=self.abmil_dropout)


DESK_OVERRIDES = {
    "train": {"batch": 128, "epochs": 10},
    "encoders": {"snn_hidden": (64, 64), "abmil_hidden": (64, 64), "abmil_gate": 32},
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    lego: LegoConfig = field(default_factory=LegoConfig)
    encoders: EncoderSettings = field(default_factory=EncoderSettings)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    profile: str = "full"
    overrides: list = field(default_factory=list)

    def to_dict(self):
        d = {"train": asdict(self.train), "lego": asdict(self.lego),
             "encoders": asdict(self.encoders), "data": self.data.to_dict(),
             "seeds": list(self.seeds), "output_dir": self.output_dir, "profile": self.profile}
        d["lego"]["latent_dims"] = list(self.lego.latent_dims)
        return json.loads(json.dumps(d, default=list))


def _check_keys(section, given, cls):
    allowed = {f.name for f in fields(cls)}
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _build_data(d):
    _check_keys("data", d, SyntheticSpec)
    d = dict(d)
    if "modalities" in d:
        mods = []
        for m in d["modalities"]:
            _check_keys("data.modalities", m, ModalitySpec)
            mods.append(ModalitySpec(**m))
        d["modalities"] = tuple(mods)
    if "task" in d:
        _check_keys("data.task", d["task"], TaskSpec)
        d["task"] = TaskSpec(**d["task"])
    return SyntheticSpec(**d)


def from_dict(raw, profile=None):
    """Build a :class:`RunConfig`; unknown keys at any level raise :class:`ConfigError`."""
    raw = dict(raw or {})
    _check_keys("config", raw, RunConfig)
    if "overrides" in raw:
        raise ConfigError("'overrides' is filled in automatically and cannot be set")
    profile = profile or raw.get("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {profile!r}")
    sections = {"train": TrainConfig, "lego": LegoConfig, "encoders": EncoderSettings}
    built, overrides = {}, []
    for name, cls in sections.items():
        given = raw.get(name, {}) or {}
        _check_keys(name, given, cls)
        values = {}
        if profile == "desk":
            for k, v in DESK_OVERRIDES.get(name, {}).items():
                if k not in given:
                    values[k] = v
                    overrides.append(f"{name}.{k}={v}")
        values.update(given)
        built[name] = cls(**values)
    data = _build_data(raw.get("data", {}) or {})
    cfg = RunConfig(built["train"], built["lego"], built["encoders"], data,
                    tuple(int(s) for s in raw.get("seeds", (0, 1, 2, 3, 4))),
                    str(raw.get("output_dir", "runs")), profile, overrides)
    for o in overrides:
        log.info("desk profile override: %s", o)
    return cfg


def load_config(path=None, profile=None):
    """Read a YAML or JSON config file (``None`` gives the defaults)."""
    if path is None:
        return from_dict({}, profile)
    text = Path(path).read_text()
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw, profile)


def with_seed(cfg, seed):
    return replace(cfg, data=replace(cfg.data, seed=seed))
