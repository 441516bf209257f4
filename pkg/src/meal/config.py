"""Experiment configuration: a JSON document with strict keys.

Every random choice derives from the top-level ``seed`` through named
sub-streams, so the data, each teacher's initialization, the student
initialization, and the distillation loop can be re-run independently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from meal import rng as rngs
from meal.data import SyntheticSpec
from meal.network import NetworkSpec, simple_spec
from meal.trainer import MealConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    kind: str = "spirals"
    n_per_class: int = 500
    num_classes: int = 3
    noise_sigma: float = 0.1
    dim: int = 2


@dataclass
class NetSection:
    name: str = "net"
    blocks: list[list[int]] = field(default_factory=lambda: [[32], [32], [32]])
    dropout_p: float = 0.0


@dataclass
class TeacherTraining:
    epochs: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32


@dataclass
class MealSection:
    alpha: float = 1.0
    beta: float = 1.0
    metric: str = "ce"
    pool_mode: str = "avg"
    block_weights: Optional[list[float]] = None
    iterations: int = 3000
    batch_size: int = 64
    student_lr: float = 0.05
    disc_lr: float = 0.01
    momentum: float = 0.9
    d_steps_per_g_step: int = 1
    use_adversary: bool = True
    use_intermediate: bool = True
    weights_on_gan: bool = True
    non_saturating: bool = False
    lr_schedule: str = "cosine"
    selection: str = "best"


@dataclass
class AblationSection:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1


@dataclass
class PathsSection:
    train_data: str = "runs/train.csv"
    test_data: str = "runs/test.csv"
    metrics: str = "runs/metrics.csv"


def _default_teachers():
    return [
        NetSection("narrow", [[16], [16], [16]]),
        NetSection("deep", [[32], [32, 32], [32]]),
        NetSection("wide-first", [[24, 24], [24], [24]]),
    ]


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    teachers: list[NetSection] = field(default_factory=_default_teachers)
    teacher_training: TeacherTraining = field(default_factory=TeacherTraining)
    student: NetSection = field(default_factory=lambda: NetSection("student"))
    meal: MealSection = field(default_factory=MealSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(d.kind, d.n_per_class, d.num_classes, d.noise_sigma,
                             rngs.sub_seed(self.seed, "data"), d.dim)

    def _net(self, section: NetSection, stream: str) -> NetworkSpec:
        return simple_spec(self.data.dim, section.blocks, self.data.num_classes,
                           rngs.sub_seed(self.seed, stream), section.dropout_p)

    def teacher_specs(self) -> list[NetworkSpec]:
        return [self._net(t, f"init/teacher{i}") for i, t in enumerate(self.teachers)]

    def student_spec(self) -> NetworkSpec:
        return self._net(self.student, "init/student")

    def meal_config(self) -> MealConfig:
        kw = asdict(self.meal)
        if kw["block_weights"] is not None:
            kw["block_weights"] = tuple(kw["block_weights"])
        return MealConfig(seed=self.seed, **kw)


# nested dataclass types, for strict parsing
_SECTIONS = {
    "data": DataSection,
    "teacher_training": TeacherTraining,
    "student": NetSection,
    "meal": MealSection,
    "ablation": AblationSection,
    "paths": PathsSection,
}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {f.name for f in fields(ExperimentConfig)})
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    kw = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kw[key] = _build(_SECTIONS[key], value, key)
        elif key == "teachers":
            if not isinstance(value, list) or not value:
                raise ConfigError("teachers: expected a non-empty list")
            kw[key] = [_build(NetSection, t, f"teachers[{i}]") for i, t in enumerate(value)]
        else:
            kw[key] = value
    cfg = ExperimentConfig(**kw)
    try:
        cfg.synthetic_spec().validate()
        cfg.meal_config()
        cfg.teacher_specs()
        cfg.student_spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())
