"""Run configuration: dataclass sections backed by an INI-style text file.

Every field is addressable as ``section.field`` so that command-line flags of
the same dotted name can override file values.
"""

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

RELATION_KINDS = ("dot", "embedded_dot", "concat")
GCN_ACTIVATIONS = ("relu", "identity")
MASK_KINDS = ("scene_human", "action_incident")
PROTOCOLS = ("full250", "fast")


@dataclass(frozen=True)
class ModelConfig:
    n_seg: int = 3
    stem_channels: int = 16
    branch_channels: tuple[int, ...] = (16, 32, 32, 64)
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    # leading stages folded into the shared stem; 0 = only the stem is shared
    shared_stages: int = 0
    cbi_attach: tuple[str, ...] = ("res4", "res5")
    use_akg: bool = True
    relation_kind: str = "dot"
    # width of the theta/phi projections; 0 means d // 2
    embed_dim: int = 0
    gcn_activation: str = "relu"
    mask_kind: str = "scene_human"
    k_action: int = 4
    k_scene: int = 365
    input_hw: tuple[int, int] = (56, 56)
    bn_momentum: float = 0.1

    @property
    def n_stages(self):
        return len(self.branch_channels)

    @property
    def stage_names(self):
        return tuple(f"res{i + 2}" for i in range(self.n_stages))

    @property
    def branch_stage_names(self):
        return self.stage_names[self.shared_stages:]

    @property
    def d(self):
        return self.branch_channels[-1]

    @property
    def relation_dim(self):
        return self.embed_dim or max(1, self.d // 2)

    def validate(self):
        if self.n_seg < 1:
            raise ConfigError(f"model.n_seg must be >= 1, got {self.n_seg}")
        if self.n_stages < 1:
            raise ConfigError("model.branch_channels must name at least one stage")
        if len(self.stage_strides) != self.n_stages:
            raise ConfigError(
                f"model.stage_strides has {len(self.stage_strides)} entries, "
                f"expected {self.n_stages} (one per stage)"
            )
        if any(c < 1 for c in (self.stem_channels, *self.branch_channels)):
            raise ConfigError("model.branch_channels and model.stem_channels must be positive")
        if any(s < 1 for s in self.stage_strides):
            raise ConfigError("model.stage_strides must be positive")
        if not 0 <= self.shared_stages < self.n_stages:
            raise ConfigError(
                f"model.shared_stages must be in [0, {self.n_stages}), got {self.shared_stages}"
            )
        for name in self.cbi_attach:
            if name not in self.stage_names:
                raise ConfigError(
                    f"model.cbi_attach names unknown stage {name!r}; "
                    f"known stages: {', '.join(self.stage_names)}"
                )
            if name not in self.branch_stage_names:
                raise ConfigError(f"model.cbi_attach stage {name!r} lies in the shared stem")
        if len(set(self.cbi_attach)) != len(self.cbi_attach):
            raise ConfigError("model.cbi_attach lists a stage twice")
        _check_choice("model.relation_kind", self.relation_kind, RELATION_KINDS)
        _check_choice("model.gcn_activation", self.gcn_activation, GCN_ACTIVATIONS)
        _check_choice("model.mask_kind", self.mask_kind, MASK_KINDS)
        if self.k_action < 1 or self.k_scene < 1:
            raise ConfigError("model.k_action and model.k_scene must be positive")
        if len(self.input_hw) != 2 or min(self.input_hw) < 1:
            raise ConfigError(f"model.input_hw must be two positive ints, got {self.input_hw}")
        if self.embed_dim < 0:
            raise ConfigError("model.embed_dim must be >= 0")
        return self


@dataclass(frozen=True)
class DataConfig:
    base_hw: tuple[int, int] = (64, 80)
    scales: tuple[float, ...] = (1.0, 0.875, 0.75, 0.66)
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)

    def validate(self):
        if len(self.base_hw) != 2 or min(self.base_hw) < 1:
            raise ConfigError(f"data.base_hw must be two positive ints, got {self.base_hw}")
        if not self.scales or any(not 0 < s <= 1 for s in self.scales):
            raise ConfigError("data.scales must be non-empty values in (0, 1]")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("data.mean/data.std need three values with std > 0")
        return self


@dataclass(frozen=True)
class TeacherConfig:
    kind: str = "synthetic"
    seed: int = 0
    manifest: str = ""

    def validate(self):
        _check_choice("teacher.kind", self.kind, ("synthetic", "file"))
        if self.kind == "file" and not self.manifest:
            raise ConfigError("teacher.manifest is required when teacher.kind = file")
        return self


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_size: int = 8
    # learning-rate drops by 10x at these fractions of the total epoch count
    milestones: tuple[float, ...] = (0.5, 0.75, 0.875)
    lambda_action: float = 1.0
    lambda_human: float = 0.01
    lambda_scene: float = 0.01

    def validate(self):
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("optim.lr must be > 0; momentum and weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("optim.epochs and optim.batch_size must be >= 1")
        if any(not 0 <= m <= 1 for m in self.milestones):
            raise ConfigError("optim.milestones are fractions of the run in [0, 1]")
        if self.lambda_action <= 0:
            raise ConfigError("optim.lambda_action must be > 0")
        if self.lambda_human < 0 or self.lambda_scene < 0:
            raise ConfigError("optim.lambda_human and optim.lambda_scene must be >= 0")
        return self


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "full250"
    n_eval_seg: int = 25
    window: int = 3

    def validate(self):
        _check_choice("eval.protocol", self.protocol, PROTOCOLS)
        if self.n_eval_seg < 1 or self.window < 1:
            raise ConfigError("eval.n_eval_seg and eval.window must be >= 1")
        if self.window > self.n_eval_seg:
            raise ConfigError(
                f"eval.window ({self.window}) exceeds eval.n_eval_seg ({self.n_eval_seg})"
            )
        return self


SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "teacher": TeacherConfig,
    "optim": OptimConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        sections = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name, {})
            names = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            hints = typing.get_type_hints(section_cls)
            sections[name] = section_cls(
                **{k: _coerce(f"{name}.{k}", v, hints[k]) for k, v in values.items()}
            )
        return cls(**sections).validate()

    def to_text(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config text: {exc}") from None
        return cls.from_dict({s: dict(parser[s]) for s in parser.sections()})

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text)

    def with_overrides(self, overrides):
        """Return a copy with ``{"section.key": value}`` overrides applied."""
        data = {name: dict(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in data or key not in data[section]:
                raise ConfigError(f"unknown config key {dotted!r}")
            data[section][key] = value
        return RunConfig.from_dict(data)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def dotted_fields():
    """Yield ``(dotted_name, type, default)`` for every configurable field."""
    for name, section_cls in SECTIONS.items():
        hints = typing.get_type_hints(section_cls)
        for f in dataclasses.fields(section_cls):
            yield f"{name}.{f.name}", hints[f.name], f.default


def _check_choice(name, value, choices):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {', '.join(choices)}; got {value!r}")


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name, value, typ):
    origin = typing.get_origin(typ)
    if origin is tuple:
        args = typing.get_args(typ)
        item_type = args[0]
        if isinstance(value, str):
            items = [p.strip() for p in value.split(",") if p.strip()]
            if len(items) == 1 and items[0].lower() == "none":
                items = []
        else:
            items = list(value)
        out = tuple(_coerce(name, item, item_type) for item in items)
        if len(args) > 1 and args[1] is not Ellipsis and len(out) != len(args):
            raise ConfigError(f"{name} needs {len(args)} values, got {len(out)}")
        return out
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {typ.__name__}, got {value!r}") from None
    return str(value)
