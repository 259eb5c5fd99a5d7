"""Experiment configuration: an INI file with six sections plus overrides.

Sections are ``data``, ``vocab``, ``model``, ``grounding``, ``train`` and
``decode``. Every key has a typed default below; unknown sections or keys
are rejected, and ``section.key=value`` overrides are applied on top of the
file. The resolved configuration is written back as INI into every output
directory so a run can always be reproduced from its own folder.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .grounding import check_mode
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataSection:
    source: str = "synth"          # "synth" or a directory with train/val/test manifests
    granularity: str = "video"     # visual pooling: "clip" or "video"
    synth_seed: int = 7
    n_train: int = 400
    n_val: int = 80
    n_test: int = 120
    vocab_size: int = 20
    n_contexts: int = 4
    ambiguity_rate: float = 0.2
    frames_per_token: int = 8
    noise_std: float = 0.3
    visual_noise: float = 0.3
    clips_per_video: int = 4
    frames_per_clip: int = 3
    min_tokens: int = 3
    max_tokens: int = 6
    zero_pitch: bool = True


@dataclass
class VocabSection:
    unit: str = "word"
    max_size: int = 0              # 0 keeps every type


@dataclass
class ModelSection:
    feat_dim: int = 43
    hidden: int = 320
    enc_layers: int = 6
    tie_embeddings: bool = True
    dec_feedback: str = "d2"
    init_gain: float = 6.0


@dataclass
class GroundingSection:
    mode: str = "none"
    visual_dim: int = 2048
    tie_init: bool = True


@dataclass
class TrainSection:
    lr: float = 0.0004
    clip_norm: float = 1.0
    dropout: float = 0.4
    patience_stop: int = 10
    patience_lr: int = 2
    batch_size: int = 16
    max_epochs: int = 60
    eval_beam: int = 1


@dataclass
class DecodeSection:
    beam: int = 10
    len_norm: bool = True
    rule: str = "mean-prob"
    max_len: int = 0               # 0 means 3*T'+10
    discard_shift: bool = False


SECTIONS = {
    "data": DataSection,
    "vocab": VocabSection,
    "model": ModelSection,
    "grounding": GroundingSection,
    "train": TrainSection,
    "decode": DecodeSection,
}

# The recipe above is the full-size one. This preset shrinks the network and
# speeds up the schedule so the synthetic seven-system pipeline fits on a
# single laptop core.
DESK = {
    "model.hidden": "32",
    "model.enc_layers": "2",
    "grounding.visual_dim": "16",
    "train.lr": "0.004",
    "train.dropout": "0.2",
    "train.max_epochs": "80",
    "data.n_val": "160",
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    vocab: VocabSection = field(default_factory=VocabSection)
    model: ModelSection = field(default_factory=ModelSection)
    grounding: GroundingSection = field(default_factory=GroundingSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)

    # -------------------------------------------------------------- validation

    def validate(self) -> "ExperimentConfig":
        check_mode(self.grounding.mode)
        if self.data.granularity not in ("clip", "video"):
            raise ConfigError(f"data.granularity must be clip or video, got {self.data.granularity!r}")
        if self.vocab.unit not in ("word", "char"):
            raise ConfigError(f"vocab.unit must be word or char, got {self.vocab.unit!r}")
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")
        if self.decode.rule not in ("mean-prob", "mean-logprob"):
            raise ConfigError(f"decode.rule must be mean-prob or mean-logprob, got {self.decode.rule!r}")
        self.train_config(1)
        self.model_config(len_vocab=4)
        if self.data.source == "synth":
            self.synth_config().validate()
        return self

    # -------------------------------------------------------------- views

    def synth_config(self) -> SynthConfig:
        d = asdict(self.data)
        keep = {f.name for f in fields(SynthConfig)}
        kw = {k: v for k, v in d.items() if k in keep}
        return SynthConfig(feat_dim=self.model.feat_dim, visual_dim=self.grounding.visual_dim, **kw)

    def model_config(self, len_vocab: int, mode: str | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab_size=len_vocab, feat_dim=m.feat_dim, hidden=m.hidden,
                           enc_layers=m.enc_layers, dropout=self.train.dropout,
                           mode=mode or self.grounding.mode, visual_dim=self.grounding.visual_dim,
                           tie_embeddings=m.tie_embeddings, tie_init=self.grounding.tie_init,
                           dec_feedback=m.dec_feedback, init_gain=m.init_gain)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self.train))

    def with_overrides(self, overrides) -> "ExperimentConfig":
        cfg = replace(self, **{s: replace(getattr(self, s)) for s in SECTIONS})
        for item in overrides:
            apply_override(cfg, item)
        return cfg

    # -------------------------------------------------------------- text form

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(section: str, key: str, text: str, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {text!r}") from None
    return text.strip()


def set_value(cfg: ExperimentConfig, section: str, key: str, text: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; known: {', '.join(SECTIONS)}")
    sec = getattr(cfg, section)
    names = {f.name for f in fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(sec, key, _coerce(section, key, text, getattr(sec, key)))


def apply_override(cfg: ExperimentConfig, item: str) -> None:
    """Apply one ``section.key=value`` override in place."""
    item = item[2:] if item.startswith("--") else item
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    dotted, value = item.split("=", 1)
    section, key = dotted.split(".", 1)
    set_value(cfg, section, key, value)


def parse_ini(text: str, base: ExperimentConfig | None = None, origin="<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    cfg = (base or ExperimentConfig()).with_overrides([])
    for section in cp.sections():
        for key, value in cp[section].items():
            set_value(cfg, section, key, value)
    return cfg


def load_config(path=None, overrides=(), preset: str | None = None) -> ExperimentConfig:
    """Defaults, then an optional preset, then the file, then overrides."""
    cfg = ExperimentConfig()
    if preset == "desk":
        cfg = cfg.with_overrides(f"{k}={v}" for k, v in DESK.items())
    elif preset not in (None, "full"):
        raise ConfigError(f"unknown preset {preset!r}; choose desk or full")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = parse_ini(p.read_text(encoding="utf-8"), cfg, str(p))
    return cfg.with_overrides(overrides).validate()
