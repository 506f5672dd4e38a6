"""Run configuration: one JSON document, validated completely before anything runs.

Sections: ``world``, ``data``, ``model`` (``geometry``, ``texture``, ``seed``),
``train``, ``finetune``, ``eval``. Unknown keys anywhere are rejected with the
dotted path of the offending key. Two presets ship with the package: ``desk``
(64 x 64 frames, small networks, CPU friendly) and ``paper`` (full-size
networks, 256 x 256 frames).
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .geometry import GeometryConfig
from .synthworld import STICKMAN_CHANNELS, DatasetConfig, WorldConfig
from .texture import TextureConfig
from .trainer import FinetuneConfig, TrainConfig

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the dotted field path."""


@dataclass(frozen=True)
class DataConfig:
    persons_train: int = 6
    persons_test: int = 2
    frames_per_person: int = 200
    frames_per_test_person: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if f.name != "seed" and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    geometry: GeometryConfig = GeometryConfig()
    texture: TextureConfig = TextureConfig()
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    sources: int = 20
    source_pool: int = 100  # sources are drawn from the first frames of the sequence
    held_out_stride: int = 5  # held-out frames: every k-th frame after the pool
    contact_sheet_frames: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sources < 1 or self.source_pool < self.sources:
            raise ValueError("need 1 <= sources <= source_pool")
        if self.held_out_stride < 1:
            raise ValueError("held_out_stride must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    eval: EvalConfig = EvalConfig()

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(world=self.world, **asdict(self.data))

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _jsonable(o: Any) -> Any:
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    return o


def _build(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _coerce(tp: Any, value: Any, path: str) -> Any:
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def validate(cfg: RunConfig) -> RunConfig:
    """Cross-section consistency checks."""
    n = cfg.world.n_parts
    g, t = cfg.model.geometry, cfg.model.texture
    if g.n_parts != n:
        raise ConfigError(f"model.geometry.n_parts: {g.n_parts} differs from world.n_parts {n}")
    if t.n_parts != n:
        raise ConfigError(f"model.texture.n_parts: {t.n_parts} differs from world.n_parts {n}")
    if t.atlas_size != cfg.world.atlas_size:
        raise ConfigError(f"model.texture.atlas_size: {t.atlas_size} differs from world.atlas_size {cfg.world.atlas_size}")
    if g.stickman_channels != STICKMAN_CHANNELS:
        raise ConfigError(f"model.geometry.stickman_channels: the world draws {STICKMAN_CHANNELS} channels")
    step = 2 ** g.levels
    if cfg.world.image_size % step:
        raise ConfigError(f"world.image_size: {cfg.world.image_size} must be divisible by {step}")
    if cfg.data.persons_train < 1:
        raise ConfigError("data.persons_train: need at least one training person")
    need = cfg.train.b_train + 1 + cfg.train.val_frames
    if cfg.data.frames_per_person < need:
        raise ConfigError(f"data.frames_per_person: need at least {need} frames (sources + target + validation)")
    if cfg.finetune.sources != cfg.eval.sources:
        raise ConfigError(f"finetune.sources: {cfg.finetune.sources} differs from eval.sources {cfg.eval.sources}")
    return cfg


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    return validate(_build(RunConfig, data, ""))


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def desk() -> RunConfig:
    geometry = GeometryConfig(channels=(8, 16, 32, 32, 32), decoder_kernel=3)
    # The random-feature stand-in for pretrained perceptual features makes the
    # few-shot background drift at this scale, so fine-tuning uses plain L1.
    return validate(RunConfig(model=ModelConfig(geometry=geometry, texture=TextureConfig()), train=TrainConfig.desk(),
                              finetune=FinetuneConfig(perceptual=False)))


def paper() -> RunConfig:
    world = WorldConfig(n_parts=24, image_size=256, atlas_size=128)
    model = ModelConfig(geometry=GeometryConfig.paper(), texture=TextureConfig.paper())
    return validate(RunConfig(world=world, model=model, train=TrainConfig()))


def preset(name: str) -> RunConfig:
    if name == "desk":
        return desk()
    if name == "paper":
        return paper()
    raise ConfigError(f"preset: unknown preset {name!r} (choose from {', '.join(PRESETS)})")


def preset_text(name: str) -> str:
    """The shipped JSON file for a preset."""
    return resources.files("motionxfer").joinpath("presets").joinpath(f"{name}.json").read_text()


def load(path: str | Path | None = None, preset_name: str = "desk", overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Preset, then a JSON file on top, then explicit overrides."""
    data = preset(preset_name).to_json()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(user, Mapping):
            raise ConfigError(f"{path}: top level must be an object")
        data = merge(data, user)
    if overrides:
        data = merge(data, overrides)
    return from_dict(data)


def parse_override(text: str) -> dict:
    """``a.b.c=value`` (value parsed as JSON, else kept as a string) -> nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out
