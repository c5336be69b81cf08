"""
Value types shared by the services.

Everything here is a plain frozen dataclass; tensors never live in these types
except for the in-memory pixels of synthetic images.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np

from .exceptions import ConfigurationError, DegradationError

SplitRole = Literal["base", "val", "novel"]
Branch = Literal["fused", "global", "local"]
TrainMode = Literal["bml", "baseline_global", "baseline_local"]

SPLIT_ROLES: tuple[str, ...] = ("base", "val", "novel")
BRANCHES: tuple[str, ...] = ("fused", "global", "local")
TRAIN_MODES: tuple[str, ...] = ("bml", "baseline_global", "baseline_local")
DEGRADATION_KINDS: tuple[str, ...] = (
    "resize",
    "gaussian_blur",
    "pepper_noise",
    "color_jitter",
)

FULL_CHANNELS: tuple[int, ...] = (64, 160, 320, 640)
DESK_CHANNELS: tuple[int, ...] = (16, 32, 64, 128)


@dataclass(frozen=True)
class EpisodeSpec:
    """N-way K-shot task shape with Q queries per class."""

    n_way: int
    k_shot: int
    q_query: int

    def __post_init__(self) -> None:
        for name in ("n_way", "k_shot", "q_query"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")

    @property
    def images_per_class(self) -> int:
        return self.k_shot + self.q_query

    @property
    def batch_images(self) -> int:
        return self.n_way * self.images_per_class

    def label(self) -> str:
        return f"{self.n_way}-way {self.k_shot}-shot"


@dataclass(frozen=True)
class ImageRecord:
    """One image reference; synthetic images carry their pixels ([3, S, S] float32 in [0, 1])."""

    ref: str
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)


@dataclass
class DatasetSplit:
    name: str
    role: SplitRole
    classes: list[str]
    images: dict[str, list[ImageRecord]]
    image_size: int = 84

    def __post_init__(self) -> None:
        if self.role not in SPLIT_ROLES:
            raise ConfigurationError(f"Unknown split role: {self.role}")

    @property
    def num_images(self) -> int:
        return sum(len(records) for records in self.images.values())

    def class_index(self, class_name: str) -> int:
        return self.classes.index(class_name)


@dataclass(frozen=True)
class EpisodeItem:
    record: ImageRecord
    local_label: int
    global_label: int


@dataclass(frozen=True)
class Episode:
    support: tuple[EpisodeItem, ...]
    query: tuple[EpisodeItem, ...]
    class_map: dict[int, str]
    spec: EpisodeSpec

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def invariant_violations(self) -> list[str]:
        """Human-readable list of broken episode invariants (empty when valid)."""
        problems = []
        n, k, q = self.spec.n_way, self.spec.k_shot, self.spec.q_query
        if len(self.support) != n * k:
            problems.append(f"|support|={len(self.support)} != {n * k}")
        if len(self.query) != n * q:
            problems.append(f"|query|={len(self.query)} != {n * q}")
        if len(set(self.class_map.values())) != n or sorted(self.class_map) != list(range(n)):
            problems.append("class_map is not a bijection onto [0, N)")
        support_refs = {item.record.ref for item in self.support}
        if support_refs & {item.record.ref for item in self.query}:
            problems.append("an image appears in both support and query")
        for side, items in (("support", self.support), ("query", self.query)):
            if {item.local_label for item in items} != set(range(n)):
                problems.append(f"{side} local labels do not cover [0, {n})")
        return problems


@dataclass(frozen=True)
class Degradation:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in DEGRADATION_KINDS:
            raise DegradationError(f"Unknown degradation kind: {self.kind}")
        p = self.params
        if self.kind == "resize":
            if int(p.get("size", 0)) < 1:
                raise DegradationError("resize needs a target size >= 1")
        elif self.kind == "gaussian_blur":
            low, high = self.sigma_range
            if low < 0 or high < low:
                raise DegradationError(f"invalid blur sigma range ({low}, {high})")
        elif self.kind == "pepper_noise":
            ratio = float(p.get("ratio", -1))
            if not 0.0 <= ratio <= 1.0:
                raise DegradationError(f"pepper ratio must lie in [0, 1], got {ratio}")
        elif self.kind == "color_jitter":
            if float(p.get("brightness", -1)) < 0:
                raise DegradationError("brightness factor B must be >= 0")

    @property
    def sigma_range(self) -> tuple[float, float]:
        sigma = self.params.get("sigma", 0.0)
        if isinstance(sigma, (list, tuple)):
            return float(sigma[0]), float(sigma[1])
        return float(sigma), float(sigma)


@dataclass(frozen=True)
class BackboneConfig:
    block_channels: tuple[int, ...] = FULL_CHANNELS
    shared_depth: int = 3
    input_size: int = 84
    dropblock_enabled: bool = False
    desk_scale: bool = False
    dropblock_size: int = 5
    drop_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.block_channels) != 4 or any(c <= 0 for c in self.block_channels):
            raise ConfigurationError("block_channels must be 4 positive integers")
        if not 0 <= self.shared_depth <= len(self.block_channels):
            raise ConfigurationError(f"shared_depth must lie in [0, 4], got {self.shared_depth}")
        if self.input_size < 16:
            raise ConfigurationError("input_size must be at least 16 pixels")

    @classmethod
    def desk(cls, **overrides: Any) -> "BackboneConfig":
        return cls(**{"desk_scale": True, "input_size": 32, **overrides})

    @property
    def channels(self) -> tuple[int, ...]:
        return DESK_CHANNELS if self.desk_scale else tuple(self.block_channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def map_size(self) -> int:
        size = self.input_size
        for _ in self.channels:
            size //= 2
        return size


@dataclass(frozen=True)
class ElasticConfig:
    """Push schedule of the elastic constraint: strength grows with e / E."""

    alpha1: float = 5.5
    alpha2: float = 0.1
    epoch: int = 0
    total_epochs: int = 1
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        if not 0 <= self.epoch <= self.total_epochs:
            raise ConfigurationError(
                f"epoch {self.epoch} outside [0, {self.total_epochs}]"
            )

    @property
    def progress(self) -> float:
        return self.epoch / self.total_epochs

    def at_epoch(self, epoch: int, total_epochs: Optional[int] = None) -> "ElasticConfig":
        return replace(
            self,
            epoch=epoch,
            total_epochs=total_epochs if total_epochs is not None else self.total_epochs,
        )


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 4.0
    beta: float = 2.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    global_loss: float
    local_loss: float
    mutual_loss: float
    total_loss: float
    mean_delta: float = 0.0
    mean_d_el: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @property
    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


LRSchedule = tuple[tuple[int, float], ...]

DEFAULT_LR_SCHEDULE: LRSchedule = ((0, 0.1), (50, 6e-3), (70, 1.2e-4))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr_schedule: LRSchedule = DEFAULT_LR_SCHEDULE
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = False
    train_spec: EpisodeSpec = EpisodeSpec(15, 1, 6)
    weights: LossWeights = LossWeights()
    elastic: ElasticConfig = ElasticConfig()
    mode: TrainMode = "bml"
    seed: int = 0
    episodes_per_epoch: Optional[int] = None
    augment: bool = True
    squared_distance: bool = True
    mutual_temperature: float = 1.0
    val_spec: EpisodeSpec = EpisodeSpec(5, 5, 15)
    val_episodes: int = 200
    save_every: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"Unknown training mode: {self.mode}")
        epochs = [epoch for epoch, _ in self.lr_schedule]
        if not epochs or epochs[0] != 0:
            raise ConfigurationError("lr_schedule must start at epoch 0")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigurationError("lr_schedule epochs must be strictly increasing")

    def effective_weights(self) -> LossWeights:
        """Single-view baselines switch off the other view and the mimicry term."""
        if self.mode == "baseline_global":
            return replace(self.weights, beta=0.0, gamma=0.0)
        if self.mode == "baseline_local":
            return replace(self.weights, alpha=0.0, gamma=0.0)
        return self.weights


@dataclass(frozen=True)
class EvalResult:
    mean_accuracy: float
    ci95: float
    per_episode: tuple[float, ...]
    n_episodes: int
    spec: EpisodeSpec
    branch: Branch

    @classmethod
    def from_accuracies(
        cls, accuracies: list[float], spec: EpisodeSpec, branch: Branch
    ) -> "EvalResult":
        """Aggregate per-episode accuracies (percent); CI is 1.96 * std / sqrt(n)."""
        values = np.asarray(accuracies, dtype=np.float64)
        n = len(values)
        mean = float(values.mean()) if n else 0.0
        ci95 = float(1.96 * values.std() / math.sqrt(n)) if n else 0.0
        return cls(
            mean_accuracy=mean,
            ci95=ci95,
            per_episode=tuple(float(v) for v in values),
            n_episodes=n,
            spec=spec,
            branch=branch,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "branch": self.branch,
            "spec": asdict(self.spec),
            "n_episodes": self.n_episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "per_episode": list(self.per_episode),
        }


@dataclass(frozen=True)
class QueryRanking:
    query_index: int
    true_class: int
    ranking: tuple[tuple[int, float], ...]
    true_rank: int


@dataclass(frozen=True)
class RankingReport:
    queries: tuple[QueryRanking, ...]
    class_names: dict[int, str]

    @property
    def mean_true_rank(self) -> float:
        if not self.queries:
            return 0.0
        return sum(q.true_rank for q in self.queries) / len(self.queries)


@dataclass(frozen=True)
class EvalSettings:
    specs: tuple[EpisodeSpec, ...] = (EpisodeSpec(5, 1, 15), EpisodeSpec(5, 5, 15))
    n_episodes: int = 2000
    fusion: Literal["sum", "softmax"] = "sum"
    degradations: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    name: str
    source: str
    model: BackboneConfig
    train: TrainConfig
    evaluation: EvalSettings = EvalSettings()
    manifest: Optional[str] = None
    output_dir: Optional[Path] = None
    seed: int = 0
    # the validated YAML document this config was built from
    document: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)
