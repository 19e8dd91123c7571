"""Experiment configuration: one TOML file, sections per subsystem.

Defaults follow the reference full-scale recipe (temperature 0.1;
invariance/variance/covariance weights 1/1/0.05; weight decay 1e-6;
base LR 1.2 times a desk-scale factor, default 0.1; T=8 at stride 3;
EMA base momentum 0.99). ``load -> dumps -> load`` is the identity;
every field is validated with a section.key-precise message.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .augment import AugmentConfig
from .model import NetSpec, OBJECTIVES
from .schedule import Policy


class ConfigError(ValueError):
    """Invalid or missing configuration value; message names the field."""


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1.2
    lr_scale: float = 0.1
    warmup_epochs: int = 0
    weight_decay: float = 1e-6
    momentum: float = 0.9
    lars: bool = False
    tau_base: float = 0.99


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    lambda_: float = 1.0
    mu: float = 1.0
    nu: float = 0.05
    gamma: float = 1.0
    eps: float = 1e-4


@dataclass(frozen=True)
class EvalConfig:
    clips_per_video: int = 10
    ks: tuple[int, ...] = (1, 5, 10)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "data"
    objective: str = "vicreg"
    schedule: str = "vididi"
    t_frames: int = 8
    stride: int = 3
    epochs: int = 8
    batch_size: int = 8
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    net: NetSpec = field(default_factory=NetSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# TOML key "lambda" maps to the python-safe attribute name.
_KEY_TO_ATTR = {"lambda": "lambda_"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}

_SECTIONS = {
    "augment": AugmentConfig,
    "net": NetSpec,
    "optim": OptimConfig,
    "loss": LossConfig,
    "eval": EvalConfig,
}


def _coerce(section: str, key: str, value, annotation: str):
    """Check and convert one raw TOML value against the field type."""
    where = f"[{section}] {key}" if section else key
    base = annotation.split("|")[0].strip()
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected a boolean, got {value!r}")
            return value
        if base == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            return value
        if base == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {value!r}")
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string, got {value!r}")
            return value
        if base.startswith("tuple"):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}: expected an array, got {value!r}")
            inner = base[base.index("[") + 1 :].rstrip("]").split(",")[0].strip()
            elems = []
            for v in value:
                if inner == "int":
                    if isinstance(v, bool) or not isinstance(v, int):
                        raise ConfigError(f"{where}: expected integers, got {v!r}")
                    elems.append(v)
                else:
                    if isinstance(v, bool) or not isinstance(v, (int, float)):
                        raise ConfigError(f"{where}: expected numbers, got {v!r}")
                    elems.append(float(v))
            return tuple(elems)
    except ConfigError:
        raise
    except Exception as exc:  # defensive: annotation parsing
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unsupported field type {annotation!r}")


def _build_section(section: str, cls, raw: dict):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in raw.items():
        attr = _KEY_TO_ATTR.get(key, key)
        if attr not in known:
            raise ConfigError(f"[{section}] {key}: unknown field")
        kwargs[attr] = _coerce(section, key, value, known[attr].type)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    return from_dict(raw)


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    kwargs = {}
    top_fields = {f.name: f for f in fields(ExperimentConfig)}
    for section, cls in _SECTIONS.items():
        block = raw.pop(section, None)
        if block is not None:
            if not isinstance(block, dict):
                raise ConfigError(f"{section}: expected a table")
            kwargs[section] = _build_section(section, cls, block)
    for key, value in raw.items():
        if key not in top_fields or key in _SECTIONS:
            raise ConfigError(f"{key}: unknown field")
        kwargs[key] = _coerce("", key, value, top_fields[key].type)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def raw_keys(text: str) -> set[str]:
    """Top-level keys literally present in the TOML text."""
    try:
        return set(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc


def validate(cfg: ExperimentConfig) -> None:
    def require(cond: bool, where: str, msg: str):
        if not cond:
            raise ConfigError(f"{where}: {msg}")

    require(cfg.objective in OBJECTIVES, "objective", f"must be one of {OBJECTIVES}")
    try:
        Policy(cfg.schedule)
    except ValueError:
        raise ConfigError(
            f"schedule: must be one of {[p.value for p in Policy]}, got {cfg.schedule!r}"
        ) from None
    require(cfg.t_frames >= 1, "t_frames", "must be at least 1")
    require(cfg.stride >= 1, "stride", "must be at least 1")
    require(cfg.epochs >= 0, "epochs", "must be non-negative")
    require(cfg.batch_size >= 2, "batch_size", "must be at least 2")
    require(cfg.seed >= 0, "seed", "must be non-negative")
    require(cfg.optim.base_lr > 0, "[optim] base_lr", "must be positive")
    require(cfg.optim.lr_scale > 0, "[optim] lr_scale", "must be positive")
    require(cfg.optim.warmup_epochs >= 0, "[optim] warmup_epochs", "must be non-negative")
    require(cfg.optim.weight_decay >= 0, "[optim] weight_decay", "must be non-negative")
    require(0 <= cfg.optim.momentum < 1, "[optim] momentum", "must lie in [0, 1)")
    require(0 <= cfg.optim.tau_base <= 1, "[optim] tau_base", "must lie in [0, 1]")
    require(cfg.loss.alpha > 0, "[loss] alpha", "must be positive")
    require(cfg.loss.gamma > 0, "[loss] gamma", "must be positive")
    require(cfg.loss.eps > 0, "[loss] eps", "must be positive")
    require(cfg.eval.clips_per_video >= 1, "[eval] clips_per_video", "must be at least 1")
    require(
        len(cfg.eval.ks) > 0 and all(k >= 1 for k in cfg.eval.ks),
        "[eval] ks",
        "must be a non-empty list of positive integers",
    )


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{f.name} = {_toml_value(getattr(cfg, f.name))}")
    for section, cls in _SECTIONS.items():
        lines.append("")
        lines.append(f"[{section}]")
        block = getattr(cfg, section)
        for f in fields(cls):
            key = _ATTR_TO_KEY.get(f.name, f.name)
            lines.append(f"{key} = {_toml_value(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def apply_override(cfg: ExperimentConfig, spec: str) -> ExperimentConfig:
    """Apply one KEY=VALUE override, with KEY a top-level or section.key name.

    Values are parsed as TOML, so strings can be bare words.
    """
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not KEY=VALUE")
    key, _, raw_value = spec.partition("=")
    key = key.strip()
    raw_value = raw_value.strip()
    try:
        value = tomllib.loads(f"v = {raw_value}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value  # bare string such as schedule=base
    d = to_dict(cfg)
    if "." in key:
        section, _, sub = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"override {key!r}: unknown section {section!r}")
        d.setdefault(section, {})[sub] = value
    else:
        d[key] = value
    return from_dict(d)


def to_dict(cfg: ExperimentConfig) -> dict:
    out: dict = {}
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS:
            block = getattr(cfg, f.name)
            out[f.name] = {
                _ATTR_TO_KEY.get(sf.name, sf.name): _plain(getattr(block, sf.name))
                for sf in fields(type(block))
            }
        else:
            out[f.name] = _plain(getattr(cfg, f.name))
    return out


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def desk_preset() -> ExperimentConfig:
    """Small-everything preset sized for the synthetic free-fall data."""
    return ExperimentConfig(
        epochs=12,
        batch_size=8,
        augment=AugmentConfig(
            crop_scale=(0.6, 1.0),
            crop_aspect=(0.9, 1.1111111111111112),
            out_height=24,
            out_width=24,
            blur_prob=0.2,
            jitter_prob=0.3,
            gray_prob=0.0,
        ),
        net=NetSpec(encoder_hidden=(64, 64), feature_dim=32, projector_hidden=64, projector_dim=32),
        optim=OptimConfig(lr_scale=0.1),
    )


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """dataclasses.replace passthrough for top-level fields."""
    return replace(cfg, **kwargs)
