"""Pipeline configuration: INI sections mapped onto dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "file"  # file | synthetic
    ratings: str = ""
    items: str = ""
    delimiter: str = "::"
    item_delimiter: str = "\t"
    threshold: float = 3.0
    min_interactions: int = 20
    keep_after: int = 0
    train_end: int = 0
    valid_end: int = 0
    train_frac: float = 0.7
    valid_frac: float = 0.8
    keywords: int = 10
    max_history: int = 10
    noun: str = "book"
    synthetic_users: int = 500
    synthetic_items: int = 300
    synthetic_groups: int = 2
    synthetic_seed: int = 0


@dataclass
class SynthSection:
    sample_n: int = 400
    max_attempts: int = 4
    seed: int = 0


@dataclass
class CollabSection:
    d1: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    optimizer: str = "adam"


@dataclass
class LmSection:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 512
    seed: int = 0
    dtype: str = "float64"
    vocab_max: int = 4096
    lora_r: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05


@dataclass
class MixSection:
    think_rate: float = 0.2
    rec_rate: float = 0.8
    batch_size: int = 8
    steps: int = 200
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    seed: int = 0
    think_loss: str = "answer"
    score_rule: str = "yes_no"
    grad_clip: float = 1.0
    train_base: bool = True


@dataclass
class LossSection:
    alpha: float = 0.1
    beta: float = 0.9
    eta: float = 0.9
    gamma: float = 0.1


@dataclass
class ExpertsSection:
    n_groups: int = 2
    seed: int = 0
    trainable_layers: int = 0  # 0 -> n_layers // 2
    steps: int = 100
    learning_rate: float = 0.0  # 0 -> mix.learning_rate
    tau: float = 0.1
    entropy_factor: float = 0.95
    conc_base: float = 0.5
    conc_slope: float = 0.6
    fusion: str = "delta"


@dataclass
class ProjectorSection:
    enabled: bool = True
    hidden: int = 0  # 0 -> 2 * d_model
    steps: int = 100
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class EvalSection:
    split: str = "test"
    mode: str = "auto"
    k: int = 5
    batch_size: int = 32
    max_users: int = 0
    reason_samples: int = 8
    max_new: int = 64
    use_features: bool = True
    seed: int = 0


@dataclass
class PipelineConfig:
    output: str = "run"
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    collab: CollabSection = field(default_factory=CollabSection)
    lm: LmSection = field(default_factory=LmSection)
    mix: MixSection = field(default_factory=MixSection)
    loss: LossSection = field(default_factory=LossSection)
    experts: ExpertsSection = field(default_factory=ExpertsSection)
    projector: ProjectorSection = field(default_factory=ProjectorSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "output"}

    def to_ini(self) -> str:
        lines = ["[pipeline]", f"output = {self.output}", ""]
        for name, sec in self.sections().items():
            lines.append(f"[{name}]")
            for f in dataclasses.fields(sec):
                lines.append(f"{f.name} = {_fmt(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def section_hash(self, *names: str) -> str:
        """Digest of the listed sections' resolved values."""
        h = hashlib.sha256()
        for name in sorted(names):
            sec = getattr(self, name)
            for f in dataclasses.fields(sec):
                h.update(f"{name}.{f.name}={_fmt(getattr(sec, f.name))}\n".encode())
        return h.hexdigest()[:16]

    def set(self, dotted: str, value: str) -> None:
        if dotted == "pipeline.output" or dotted == "output":
            self.output = value
            return
        sec_name, _, key = dotted.partition(".")
        sec = getattr(self, sec_name, None)
        if sec is None or not dataclasses.is_dataclass(sec) or key not in _field_types(type(sec)):
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(sec, key, _coerce(value, _field_types(type(sec))[key], dotted))

    def seeds(self) -> dict[str, int]:
        return {f"{n}.seed": getattr(s, "seed") for n, s in self.sections().items() if hasattr(s, "seed")}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v.replace("\t", "\\t")
    return repr(v)


def _field_types(cls) -> dict[str, type]:
    return typing.get_type_hints(cls)


def _coerce(raw: str, typ: type, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.replace("\\t", "\t")
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set("output" if section == "pipeline" else f"{section}.{key}", value)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg


def synthetic_preset(output: str = "run") -> PipelineConfig:
    """Desk-scale settings for the bundled planted-group dataset."""
    cfg = PipelineConfig(output=output)
    for key, value in {
        "data.source": "synthetic",
        "data.keywords": "4",
        "data.max_history": "4",
        "data.min_interactions": "10",
        "synth.sample_n": "600",
        "collab.d1": "16",
        "collab.epochs": "20",
        "lm.d_model": "64",
        "lm.n_layers": "2",
        "lm.n_heads": "4",
        "lm.context_len": "256",
        "lm.dtype": "float32",
        "mix.steps": "600",
        "mix.batch_size": "16",
        "mix.learning_rate": "3e-3",
        "experts.steps": "300",
        "experts.learning_rate": "3e-3",
        "experts.trainable_layers": "1",
        "projector.steps": "200",
        "projector.learning_rate": "2e-3",
        "eval.reason_samples": "8",
    }.items():
        cfg.set(key, value)
    return cfg
