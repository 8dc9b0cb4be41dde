"""Run configuration: schedule, loss weights, learning rates, densification and flags"""
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from bags.errors import ConfigError, ScheduleError
from bags.losses import LossWeights

FOV_RANGE = (17, 20)


@dataclass
class Stage:
    scale: int
    kernel_size: int
    iterations: int

    @property
    def factor(self) -> int:
        return 2 ** (self.scale - 1)


@dataclass
class ScaleSchedule:
    """
    Coarse-to-fine plan, coarsest stage first

    The default spends 10K iterations at 1/4 and 1/2 resolution and 20K at full
    resolution, with kernel sizes 5, 9 and 17.
    """
    stages: List[Stage] = field(default_factory=lambda: [Stage(3, 5, 10000), Stage(2, 9, 10000), Stage(1, 17, 20000)])
    warmup_iters: int = 500
    strict_fov: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ScheduleError("schedule has no stages")
        if self.warmup_iters < 0:
            raise ScheduleError(f"warm-up must be >= 0 iterations, got {self.warmup_iters}")
        for stage in self.stages:
            if stage.scale < 1:
                raise ScheduleError(f"scale must be >= 1, got {stage.scale}")
            if stage.kernel_size < 1 or stage.kernel_size % 2 == 0:
                raise ScheduleError(f"kernel size must be odd, got {stage.kernel_size} at scale {stage.scale}")
            if stage.iterations < 0:
                raise ScheduleError(f"iterations must be >= 0, got {stage.iterations} at scale {stage.scale}")
            if self.strict_fov:
                fov = stage.kernel_size * stage.factor
                if not FOV_RANGE[0] <= fov <= FOV_RANGE[1]:
                    raise ScheduleError(
                        f"scale {stage.scale} with {stage.kernel_size}px kernels covers {fov} full-resolution "
                        f"pixels, outside {FOV_RANGE[0]}..{FOV_RANGE[1]}"
                    )
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.scale >= prev.scale:
                raise ScheduleError("scales must be strictly decreasing")
            if cur.kernel_size <= prev.kernel_size:
                raise ScheduleError("kernel sizes must be strictly increasing")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    def stage_for(self, scale: int) -> Stage:
        for stage in self.stages:
            if stage.scale == scale:
                return stage
        raise ScheduleError(f"no stage for scale {scale}")

    @classmethod
    def from_lists(cls, scales: List[int], kernels: List[int], iterations: List[int],
                   warmup_iters: int = 500, strict_fov: bool = True) -> "ScaleSchedule":
        if not len(scales) == len(kernels) == len(iterations):
            raise ScheduleError(
                f"--scales, --kernels and --iters need the same length ({len(scales)}, {len(kernels)}, {len(iterations)})"
            )
        stages = [Stage(s, k, n) for s, k, n in zip(scales, kernels, iterations)]
        return cls(stages=stages, warmup_iters=warmup_iters, strict_fov=strict_fov)


@dataclass
class DensifyConfig:
    enabled: bool = True
    grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.05
    opacity_prune: float = 0.005
    interval: int = 100
    stop_fraction: float = 0.2
    max_gaussians: int = 5000

    def __post_init__(self):
        for name in ("grad_threshold", "split_scale_threshold", "opacity_prune", "interval", "max_gaussians"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"densify {name} must be positive")
        if not 0.0 <= self.stop_fraction <= 1.0:
            raise ConfigError(f"densify stop_fraction must be in [0, 1], got {self.stop_fraction}")


@dataclass
class LearningRates:
    positions: float = 1.6e-4
    positions_final: float = 1.6e-6
    log_scales: float = 5e-3
    rotations: float = 1e-3
    opacity_logits: float = 5e-2
    color_logits: float = 2.5e-2
    bpn: float = 1e-3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"learning rate '{name}' must be non-negative")


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    output: Optional[str] = None
    schedule: ScaleSchedule = field(default_factory=ScaleSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    lrs: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed: int = 0
    use_bpn: bool = True
    use_rgbd: bool = True
    detach_bpn_inputs: bool = False
    warmup: bool = True
    background: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    tile_size: int = 16
    dtype: str = "float64"
    checkpoint_every: int = 0
    lattice: int = 6

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScaleSchedule(**self.schedule)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.lrs, dict):
            self.lrs = LearningRates(**self.lrs)
        if isinstance(self.densify, dict):
            self.densify = DensifyConfig(**self.densify)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.tile_size < 1:
            raise ConfigError(f"tile size must be positive, got {self.tile_size}")
        if len(self.background) != 3:
            raise ConfigError("background needs three components")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint interval must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid config: {e}") from None

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None


def env_defaults() -> dict:
    """BAGS_* environment overrides (call load_dotenv() first to pick up a .env file)"""
    defaults = {}
    try:
        if os.getenv("BAGS_SEED"):
            defaults["seed"] = int(os.environ["BAGS_SEED"])
        if os.getenv("BAGS_TILE_SIZE"):
            defaults["tile_size"] = int(os.environ["BAGS_TILE_SIZE"])
    except ValueError as e:
        raise ConfigError(f"invalid BAGS_* environment value: {e}") from None
    if os.getenv("BAGS_DTYPE"):
        defaults["dtype"] = os.environ["BAGS_DTYPE"]
    if os.getenv("BAGS_LOG_LEVEL"):
        defaults["log_level"] = os.environ["BAGS_LOG_LEVEL"].upper()
    return defaults
