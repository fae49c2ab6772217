"""TOML run configuration.

A run config has one table per concern::

    [run]        seed, out, models_dir, workers
    [data]       seed (required for training), dim, num_classes, ... n_train, n_eval
    [schedule]   T, beta_start, beta_end
    [classifier] epochs, lr, hidden, depth, batch_size
    [denoiser]   epochs, lr, hidden, depth, batch_size
    [ebm]        K, eta, epochs, lr, hidden, depth, batch_size, init_noise, activation
    [train]      models (subset of classifier, denoiser, ebm)
    [purifier]   kind, steps, eta, stochastic
    [attack]     AttackConfig fields plus n_images, first_image, chunk
    [validation] H_d_sweep, trials, aggregation, policies, seed, chunk
    [bench]      purifier_kinds, step_list, methods, cap_bytes, repeats, batch, equivalence_steps

Missing keys take the dataclass defaults. ``dumps(load(text))`` parses back
to an equal config.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig
from .io import hash_obj
from .models import ConfigError, MixtureSpec


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    models_dir: Optional[str] = None
    workers: int = 1


@dataclass
class DataSection:
    seed: Optional[int] = None
    dim: int = 16
    num_classes: int = 4
    num_components: int = 8
    rank: int = 2
    std_on: float = 0.06
    std_off: float = 0.015
    mean_low: float = 0.25
    mean_high: float = 0.75
    n_train: int = 2048
    n_eval: int = 512

    def spec(self) -> MixtureSpec:
        if self.seed is None:
            raise ConfigError("[data] seed is required (set it in the config or pass --seed)")
        return MixtureSpec(
            self.dim,
            self.num_classes,
            self.num_components,
            self.rank,
            self.std_on,
            self.std_off,
            self.mean_low,
            self.mean_high,
            self.seed,
        )


@dataclass
class ScheduleSection:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ClassifierSection:
    epochs: int = 30
    lr: float = 0.5
    hidden: int = 64
    depth: int = 2
    batch_size: int = 64


@dataclass
class DenoiserSection:
    epochs: int = 60
    lr: float = 2e-3
    hidden: int = 64
    depth: int = 2
    batch_size: int = 128


@dataclass
class EbmSection:
    K: int = 40
    eta: float = 0.05
    epochs: int = 20
    lr: float = 1e-3
    hidden: int = 64
    depth: int = 2
    batch_size: int = 128
    init_noise: float = 0.1
    activation: str = "soft_leaky_relu"


@dataclass
class TrainSection:
    models: list = field(default_factory=lambda: ["classifier", "denoiser", "ebm"])


@dataclass
class PurifierSection:
    kind: str = "langevin"
    steps: int = 60
    eta: float = 0.03
    stochastic: bool = True


@dataclass
class AttackSection(AttackConfig):
    n_images: int = 512
    first_image: int = 0
    chunk: int = 64

    def attack_config(self) -> AttackConfig:
        return AttackConfig(**{f.name: getattr(self, f.name) for f in fields(AttackConfig)})


@dataclass
class ValidationSection:
    H_d_sweep: list = field(default_factory=lambda: [1, 10, 50])
    trials: int = 3
    aggregation: str = "mean_logits"
    policies: list = field(default_factory=lambda: ["loss_optimized"])
    seed: int = 0
    chunk: int = 64


@dataclass
class BenchSection:
    purifier_kinds: list = field(default_factory=lambda: ["ddpm"])
    step_list: list = field(default_factory=lambda: [10, 50, 100, 500])
    methods: list = field(default_factory=lambda: ["checkpointed", "naive"])
    cap_bytes: int = 200_000_000
    repeats: int = 3
    batch: int = 64
    equivalence_kinds: list = field(default_factory=lambda: ["ddpm", "vpsde", "langevin", "identity"])
    equivalence_steps: list = field(default_factory=lambda: [5, 10, 20])
    equivalence_repeats: int = 1


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "schedule": ScheduleSection,
    "classifier": ClassifierSection,
    "denoiser": DenoiserSection,
    "ebm": EbmSection,
    "train": TrainSection,
    "purifier": PurifierSection,
    "attack": AttackSection,
    "validation": ValidationSection,
    "bench": BenchSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    ebm: EbmSection = field(default_factory=EbmSection)
    train: TrainSection = field(default_factory=TrainSection)
    purifier: PurifierSection = field(default_factory=PurifierSection)
    attack: AttackSection = field(default_factory=AttackSection)
    validation: ValidationSection = field(default_factory=ValidationSection)
    bench: BenchSection = field(default_factory=BenchSection)
    source: Optional[str] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = {k: v for k, v in asdict(getattr(self, name)).items() if v is not None}
            out[name] = sec
        return out

    def section_hash(self, *names) -> str:
        d = self.to_dict()
        return hash_obj({n: d[n] for n in names})


def from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        known = {f.name for f in fields(cls)}
        bad = set(table) - known
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        kwargs[name] = cls(**table)
    return RunConfig(**kwargs)


def loads(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(raw)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = loads(path.read_text(encoding="utf-8"))
    cfg.source = str(path)
    if cfg.run.models_dir is not None:
        models = Path(cfg.run.models_dir)
        if not models.is_absolute():
            models = path.parent / models
        if not models.exists():
            raise ConfigError(f"models_dir {models} does not exist")
        cfg.run.models_dir = str(models)
    return cfg


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
