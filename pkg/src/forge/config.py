"""Pipeline configuration: a JSON document mapped onto nested dataclasses."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .degrade import DegradationError, DegradationSpace
from .evaluation import Fig1aConfig, SRConfig
from .nets import ModelConfig

PROFILES = ("toy", "paper-scale-record")
INIT_MODES = ("hr", "ref-lr")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    out: str = "out"
    hr_train: str = "data/hr_train"
    lr_real: str = "data/lr_real"
    hr_gen: Optional[str] = None
    test_hr: Optional[str] = "data/test/hr"
    test_lr: Optional[str] = "data/test/lr"

    def resolved(self, base: Path) -> "Paths":
        def fix(p):
            if p is None:
                return None
            p = Path(p).expanduser()
            return str(p if p.is_absolute() else (base / p).resolve())

        return Paths(**{f.name: fix(getattr(self, f.name)) for f in fields(self)})


@dataclass
class ScheduleConfig:
    t_max: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainConfig:
    batch_size: int = 8
    content_steps: int = 200
    content_lr: float = 1e-4
    deg_steps: int = 200
    deg_batch_size: int = 4
    deg_lr: float = 1e-4
    n: int = 3
    margin: float = 0.01
    deg_loss_mode: str = "sum"
    rl_weight: float = 1.0
    ddpm_steps: int = 500
    ddpm_batch_size: int = 8
    lr: float = 1e-4
    finetune_lr: float = 1e-6
    checkpoint_every: int = 100
    # "constant" or "cosine"; applies to the two pre-training phases
    lr_schedule: str = "constant"


@dataclass
class GenerationSettings:
    k: int = 3
    tau_cap: int = 300
    init: str = "hr"
    ref_assignment: str = "round-robin"
    workers: int = 1


@dataclass
class ExperimentConfig:
    t_grid: list = field(default_factory=lambda: [200, 300, 400, 500])
    n_margin_grid: list = field(
        default_factory=lambda: [[1, 0.01], [3, 0.01], [5, 0.01], [3, 1.0], [3, 0.1], [3, 0.001]]
    )
    ablate_deg_steps: Optional[int] = None
    ablate_ddpm_steps: Optional[int] = None
    sr: SRConfig = field(default_factory=SRConfig)
    fig1a: Fig1aConfig = field(default_factory=Fig1aConfig)

    def to_dict(self) -> dict:
        return {
            "t_grid": list(self.t_grid),
            "n_margin_grid": [list(p) for p in self.n_margin_grid],
            "ablate_deg_steps": self.ablate_deg_steps,
            "ablate_ddpm_steps": self.ablate_ddpm_steps,
            "sr": self.sr.to_dict(),
            "fig1a": self.fig1a.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sr = SRConfig(**d.pop("sr", {}))
        fig = Fig1aConfig.from_dict(d.pop("fig1a")) if "fig1a" in d else Fig1aConfig()
        return cls(sr=sr, fig1a=fig, **d)


@dataclass
class PipelineConfig:
    profile: str = "toy"
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    space: DegradationSpace = field(default_factory=DegradationSpace)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    experiments: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        t, g, m = self.train, self.generation, self.model
        for name in ("content_lr", "deg_lr", "lr", "finetune_lr"):
            if not getattr(t, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        for name in ("batch_size", "deg_batch_size", "ddpm_batch_size", "n", "checkpoint_every"):
            if getattr(t, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        for name in ("content_steps", "deg_steps", "ddpm_steps"):
            if getattr(t, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if t.margin < 0:
            raise ConfigError("train.margin must be >= 0")
        if t.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("train.lr_schedule must be 'constant' or 'cosine'")
        if t.deg_loss_mode not in ("sum", "alternate"):
            raise ConfigError("train.deg_loss_mode must be 'sum' or 'alternate'")
        if g.k < 1 or not 0 <= g.tau_cap <= self.schedule.t_max:
            raise ConfigError("generation.k must be >= 1 and 0 <= tau_cap <= t_max")
        if g.init not in INIT_MODES:
            raise ConfigError(f"generation.init must be one of {INIT_MODES}")
        if g.ref_assignment not in ("round-robin", "random"):
            raise ConfigError("generation.ref_assignment must be 'round-robin' or 'random'")
        if self.space.scale_factor != m.scale:
            raise ConfigError("space.scale_factor must equal model.scale")
        s = self.schedule
        if s.t_max < 1 or not 0 < s.beta_start < s.beta_end < 1:
            raise ConfigError("invalid schedule")
        if any(not 0 <= c <= s.t_max for c in self.experiments.t_grid):
            raise ConfigError("experiments.t_grid entries must lie in [0, t_max]")

    # ---------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "paths": asdict(self.paths),
            "space": self.space.to_dict(),
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "train": asdict(self.train),
            "generation": asdict(self.generation),
            "experiments": self.experiments.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, base: Optional[Path] = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                profile=d.get("profile", "toy"),
                seed=int(d.get("seed", 0)),
                paths=Paths(**d.get("paths", {})),
                space=DegradationSpace.from_dict(d.get("space", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                schedule=ScheduleConfig(**d.get("schedule", {})),
                train=TrainConfig(**d.get("train", {})),
                generation=GenerationSettings(**d.get("generation", {})),
                experiments=ExperimentConfig.from_dict(d.get("experiments", {})),
            )
        except (TypeError, KeyError, DegradationError) as exc:
            raise ConfigError(str(exc)) from exc
        if base is not None:
            cfg.paths = cfg.paths.resolved(base)
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)

    @classmethod
    def paper_scale_record(cls) -> "PipelineConfig":
        """Published full-scale hyperparameters; documentation only, never trained here."""
        return cls(
            profile="paper-scale-record",
            model=ModelConfig(lr_size=256, deg_dim=2048, deg_blocks=16),
            train=TrainConfig(batch_size=64, ddpm_batch_size=8),
        )


def load_config(path, seed: Optional[int] = None) -> PipelineConfig:
    """Read a JSON config, resolve paths against its folder, apply seed overrides.

    Precedence for the seed: explicit argument, then ``FORGE_SEED``, then the file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    cfg = PipelineConfig.from_dict(raw, base=path.resolve().parent)
    env = os.environ.get("FORGE_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"FORGE_SEED must be an integer, got {env!r}") from exc
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(cfg.to_json())
