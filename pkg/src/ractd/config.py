"""Experiment configuration: one structured-text file (YAML or JSON) drives
every pipeline stage.  Missing fields take defaults; the canonical JSON form
is hashed so outputs can be content-addressed."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Schema violation; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class EnvSection:
    dynamics: str = "bimodal-reach"
    horizon: int = 32
    action_bound: float = 1.0
    process_noise: float = 0.0
    goal_radius: float = 0.3
    behavior_noise: float | None = None


@dataclass
class DataSection:
    episodes: int = 200
    mixture: list = field(default_factory=lambda: [["expert", 0.5], ["medium", 0.5]])
    episode_length: int | None = None
    h: int = 1
    c: int = 4
    stride: int = 4
    window_every: int = 2


@dataclass
class TeacherSection:
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    act: str = "silu"
    n_bins: int = 40
    sigma_data: float = 1.0
    steps: int = 8000
    lr: float = 1e-3
    batch_size: int = 256
    reward_weight: float = 0.0
    anneal: bool = True


@dataclass
class RewardSection:
    gamma: float = 0.9
    hidden: list = field(default_factory=lambda: [64, 64])
    act: str = "mish"
    steps: int = 1500
    lr: float = 1e-3
    n_actions: int = 1
    truncation_margin: int = 16
    goal_temperature: float = 0.05


@dataclass
class DistillSection:
    ctm_weight: float = 1.0
    dsm_weight: float = 1.0
    reward_weight: float = 0.1
    steps: int = 1500
    lr: float = 1e-3
    batch_size: int = 256
    n_bins: int = 80
    max_gap: int = 4
    ema_decay: float = 0.0
    snapshot_every: int = 0


@dataclass
class EvalSection:
    seeds: int = 100
    sampler: str = "student"
    nfe: int = 1
    bench_trials: int = 20
    bench_warmup: int = 3
    ddpm_steps: int = 15
    ddim_steps: int = 15
    # offline: last checkpoint; online: best of the distillation snapshots
    selection: str = "offline"


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    reward: RewardSection = field(default_factory=RewardSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: list = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, *names) -> str:
        d = self.to_dict()
        payload = {n: d[n] for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def hash(self) -> str:
        return self.section_hash(*self.to_dict())

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.dump())

    def validate(self):
        problems = []
        if self.env.dynamics not in ("bimodal-reach", "pointmass-maze"):
            problems.append(f"env.dynamics: unknown value {self.env.dynamics!r}")
        for name in ("ctm_weight", "dsm_weight", "reward_weight"):
            if getattr(self.distill, name) < 0:
                problems.append(f"distill.{name} must be >= 0")
        if self.env.behavior_noise is not None and self.env.behavior_noise < 0:
            problems.append("env.behavior_noise must be >= 0")
        if self.teacher.reward_weight < 0:
            problems.append("teacher.reward_weight must be >= 0")
        if self.reward.truncation_margin < 0:
            problems.append("reward.truncation_margin must be >= 0")
        if not 0 <= self.reward.gamma <= 1:
            problems.append("reward.gamma must lie in [0, 1]")
        if self.data.h < 1 or self.data.c < 1:
            problems.append("data.h and data.c must be >= 1")
        if self.env.horizon < self.data.c:
            problems.append("env.horizon must be >= data.c")
        if self.eval.nfe < 1:
            problems.append("eval.nfe must be >= 1")
        if self.eval.seeds < 2:
            problems.append("eval.seeds must be >= 2")
        if self.eval.selection not in ("offline", "online"):
            problems.append(f"eval.selection: unknown value {self.eval.selection!r}")
        if self.distill.snapshot_every < 0:
            problems.append("distill.snapshot_every must be >= 0")
        if self.eval.sampler not in ("student", "heun", "ddpm", "ddim"):
            problems.append(f"eval.sampler: unknown value {self.eval.sampler!r}")
        for sec in ("teacher", "distill"):
            if getattr(self, sec).steps < 0:
                problems.append(f"{sec}.steps must be >= 0")
        if problems:
            raise ConfigError(problems)
        return self


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_CLASSES = {"env": EnvSection, "data": DataSection, "teacher": TeacherSection, "reward": RewardSection,
            "distill": DistillSection, "eval": EvalSection}


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    problems = []
    kwargs = {}
    for key, value in raw.items():
        if key in _CLASSES:
            cls = _CLASSES[key]
            names = {f.name for f in dataclasses.fields(cls)}
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            unknown = sorted(set(value) - names)
            problems += [f"{key}.{u}: unknown field" for u in unknown]
            kwargs[key] = cls(**{k: v for k, v in value.items() if k in names})
        elif key == "seed":
            if not isinstance(value, int):
                problems.append("seed: expected an integer")
            kwargs["seed"] = value
        elif key == "ablate":
            if not isinstance(value, list):
                problems.append("ablate: expected a list of cells")
            kwargs["ablate"] = value
        else:
            problems.append(f"{key}: unknown section")
    try:
        cfg = ExperimentConfig(**kwargs).validate()
    except ConfigError as exc:
        problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    return config_from_dict(raw)


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy with section fields replaced, e.g. ``with_overrides(cfg, distill={"reward_weight": 1})``."""
    d = cfg.to_dict()
    for sec, vals in sections.items():
        if sec == "seed":
            d["seed"] = vals
        else:
            d[sec].update(vals)
    return config_from_dict(d)
