"""Run configuration: nested dataclasses with a JSON round-trip and flag overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .detection import DetectionParams
from .imaging import DEFAULT_RATIO, HogParams
from .learn import LearnConfig
from .semantics import CipcTolerances


@dataclass(frozen=True)
class DictConfig:
    k: int = 200
    window: tuple[int, int] = (32, 32)
    n_patches: int = 20000
    pca_dim: int = 64
    stride: int = 8
    ratio: float = DEFAULT_RATIO
    max_iters: int = 100
    tol: float = 1e-6
    hog: HogParams = field(default_factory=HogParams)


@dataclass(frozen=True)
class SynthSettings:
    layout: str = "scatter"  # only rendered layout
    n_images: int = 20
    instances: tuple[int, int] = (1, 3)
    scales: tuple[float, float] = (0.5, 1.5)
    base_scale: float = 2.0
    distractors: int = 2
    noise: float = 2.0
    inclusion_prob: float = 0.8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dictionary: DictConfig = field(default_factory=DictConfig)
    learn: LearnConfig = field(default_factory=LearnConfig)
    detect: DetectionParams = field(default_factory=DetectionParams)
    synth: SynthSettings = field(default_factory=SynthSettings)
    iou: float = 0.5
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_plain(cls, data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, dotted: dict) -> "RunConfig":
        """Replace fields named by dotted paths, e.g. {"learn.lam": 0.5}; None values are ignored."""
        out = self
        for key, value in dotted.items():
            if value is not None:
                out = _replace_path(out, key.split("."), value)
        return out


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    return obj


def _coerce(tp, value):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        return _from_plain(tp, value)
    if origin is typing.Union or str(origin) == "types.UnionType":
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value) if inner else value
    if origin is tuple:
        return tuple(_coerce(a, v) for a, v in zip(args, value))
    if tp in (int, float, str, bool):
        return tp(value)
    return value


def _from_plain(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    return cls(**{k: _coerce(hints[k], v) for k, v in data.items()})


def _replace_path(obj, path, value):
    name = path[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ValueError(f"unknown config field {'.'.join(path)!r}")
    if len(path) == 1:
        return dataclasses.replace(obj, **{name: _coerce(typing.get_type_hints(type(obj))[name], value)})
    return dataclasses.replace(obj, **{name: _replace_path(getattr(obj, name), path[1:], value)})
