from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from rebalance.errors import InvalidInputError, MissingAnnotationError


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    """Frozen penultimate-layer features with class and spurious annotations.

    Group ids are never stored: row i belongs to group
    ``class_labels[i] * num_spurious + spurious_labels[i]``.
    """

    features: np.ndarray
    class_labels: Optional[np.ndarray]
    spurious_labels: Optional[np.ndarray] = None
    num_classes: int = 2
    num_spurious: int = 0
    name: str = ""

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise InvalidInputError(f"features must be a non-empty n x d matrix, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise InvalidInputError("features contain non-finite values")
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be positive")
        if self.num_spurious < 0:
            raise InvalidInputError("num_spurious must be non-negative")
        n = features.shape[0]

        labels = self.class_labels
        if labels is not None:
            labels = _as_labels(labels, n, self.num_classes, "class")

        spurious = self.spurious_labels
        if spurious is not None and self.num_spurious == 0:
            raise InvalidInputError("spurious labels given but num_spurious is 0")
        if spurious is not None:
            spurious = _as_labels(spurious, n, self.num_spurious, "spurious")

        features.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "class_labels", labels)
        object.__setattr__(self, "spurious_labels", spurious)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_class_labels(self) -> bool:
        return self.class_labels is not None

    @property
    def has_groups(self) -> bool:
        return self.class_labels is not None and self.spurious_labels is not None

    @property
    def num_groups(self) -> int:
        return self.num_classes * self.num_spurious

    @property
    def group_ids(self) -> np.ndarray:
        self.require_groups()
        return self.class_labels * self.num_spurious + self.spurious_labels

    def group_of(self, class_id: int, spurious_id: int) -> int:
        return class_id * self.num_spurious + spurious_id

    def split_group(self, group_id: int) -> Tuple[int, int]:
        return divmod(group_id, self.num_spurious)

    def require_class_labels(self) -> np.ndarray:
        if self.class_labels is None:
            raise MissingAnnotationError(f"dataset '{self.name or 'unnamed'}' has no class labels")
        return self.class_labels

    def require_groups(self) -> None:
        self.require_class_labels()
        if self.spurious_labels is None:
            raise MissingAnnotationError(f"dataset '{self.name or 'unnamed'}' has no spurious labels")

    def subset(self, indices, name: Optional[str] = None) -> "EmbeddingDataset":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise InvalidInputError(f"subset index out of bounds for dataset of size {self.n}")
        return EmbeddingDataset(
            features=self.features[idx],
            class_labels=None if self.class_labels is None else self.class_labels[idx],
            spurious_labels=None if self.spurious_labels is None else self.spurious_labels[idx],
            num_classes=self.num_classes,
            num_spurious=self.num_spurious,
            name=self.name if name is None else name,
        )

    def without_groups(self) -> "EmbeddingDataset":
        return EmbeddingDataset(self.features, self.class_labels, None, self.num_classes, 0, self.name)


def _as_labels(values, n: int, bound: int, kind: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape != (n,):
        raise InvalidInputError(f"{kind} labels must have length {n}, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InvalidInputError(f"{kind} labels must be integers")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= bound):
        raise InvalidInputError(f"{kind} label out of range [0, {bound})")
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class LinearHead:
    """The retrainable last layer: logits = weights @ x + bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64, ndmin=1)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InvalidInputError(
                f"head shapes inconsistent: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise InvalidInputError("head contains non-finite entries")

    @classmethod
    def zeros(cls, num_classes: int, input_dim: int) -> "LinearHead":
        return cls(np.zeros((num_classes, input_dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearHead":
        return LinearHead(self.weights.copy(), self.bias.copy())

    def same_as(self, other: "LinearHead") -> bool:
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)

    def check_compatible(self, ds: EmbeddingDataset) -> None:
        if self.input_dim != ds.d or self.num_classes != ds.num_classes:
            raise InvalidInputError(
                f"head is {self.num_classes}x{self.input_dim} but dataset has "
                f"{ds.num_classes} classes and dimension {ds.d}"
            )


@dataclass
class AnnotationLedger:
    """Which rows of one dataset had their class or group labels revealed."""

    size: int
    scope: str = "heldout"
    class_revealed: set = field(default_factory=set)
    group_revealed: set = field(default_factory=set)

    @property
    def revealed_class_labels(self) -> int:
        return len(self.class_revealed)

    @property
    def revealed_group_labels(self) -> int:
        return len(self.group_revealed)

    def reveal(self, indices, kind: str) -> int:
        """Mark rows as annotated; returns how many were newly revealed."""
        if kind not in ("class", "group"):
            raise InvalidInputError(f"unknown annotation kind '{kind}'")
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise InvalidInputError(f"annotation index out of bounds for ledger of size {self.size}")
        target = self.class_revealed if kind == "class" else self.group_revealed
        before = len(target)
        target.update(int(i) for i in idx)
        return len(target) - before

    def totals(self) -> Dict[str, int]:
        return {"class": self.revealed_class_labels, "group": self.revealed_group_labels}

    @staticmethod
    def merge(*ledgers: "AnnotationLedger") -> Dict[str, int]:
        totals = {"class": 0, "group": 0}
        for ledger in ledgers:
            if ledger is None:
                continue
            for key, value in ledger.totals().items():
                totals[key] += value
        return totals


class ParamModel(BaseModel):
    """Parameter bundle whose validation failures raise InvalidInputError."""

    def __init__(self, **data):
        try:
            super().__init__(**data)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or type(self).__name__}: {err['msg']}"
                                 for err in e.errors())
            raise InvalidInputError(f"invalid {type(self).__name__}: {problems}") from None


class OptimConfig(ParamModel):
    model_config = ConfigDict(frozen=True)

    optimizer: Literal["sgd", "adaptive-decoupled"] = "sgd"
    lr0: PositiveFloat = 1e-3
    schedule: Literal["constant", "cosine", "linear"] = "cosine"
    weight_decay: NonNegativeFloat = 1e-4
    # zero steps is allowed and means "return the initial head"
    total_steps: NonNegativeInt = 250
    batch_size: PositiveInt = 32
    seed: NonNegativeInt = 0
    eval_every: Optional[PositiveInt] = None

    @field_validator("optimizer", mode="before")
    @classmethod
    def _alias_optimizer(cls, value):
        if isinstance(value, str) and value.lower() in ("adamw", "adam"):
            return "adaptive-decoupled"
        return value


class SplitSpec(ParamModel):
    fractions: List[float]
    seed: NonNegativeInt = 0

    @model_validator(mode="after")
    def _check_fractions(self):
        if not self.fractions:
            raise ValueError("at least one split fraction is required")
        if any(not (0.0 < f < 1.0) for f in self.fractions):
            raise ValueError("each split fraction must lie in (0, 1)")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        return self


class AblationSpec(ParamModel):
    worst_groups: List[NonNegativeInt]
    fraction: float = Field(ge=0.0, le=1.0)
    seed: NonNegativeInt = 0

    @field_validator("worst_groups")
    @classmethod
    def _dedupe(cls, value):
        if not value:
            raise ValueError("worst_groups must be non-empty")
        return sorted(set(value))


SelfVariantName = Literal[
    "random",
    "misclassification",
    "es-misclassification",
    "dropout-disagreement",
    "es-disagreement",
]


class SelfVariant(ParamModel):
    variant: SelfVariantName = "es-disagreement"
    n: PositiveInt = 20
    es_fraction: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    dropout_p: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    dropout_passes: PositiveInt = 1
    divergence: Literal["kl", "tvd"] = "kl"

    @model_validator(mode="after")
    def _check_prerequisites(self):
        if self.variant.startswith("es-") and self.es_fraction is None:
            raise ValueError(f"variant {self.variant} requires es_fraction")
        if self.variant == "dropout-disagreement" and self.dropout_p is None:
            raise ValueError("variant dropout-disagreement requires dropout_p")
        return self

    @property
    def uses_disagreement(self) -> bool:
        return self.variant in ("dropout-disagreement", "es-disagreement")


class SyntheticSpec(ParamModel):
    n: PositiveInt = 10_000
    d: int = Field(default=12, ge=3)
    minority_rate: float = Field(default=0.05, gt=0.0, le=0.5)
    core_magnitude: PositiveFloat = 0.3
    core_noise: NonNegativeFloat = 0.3
    spurious_magnitude: PositiveFloat = 1.0
    spurious_noise: Optional[NonNegativeFloat] = None
    junk_scale: NonNegativeFloat = 1.0
    class_prior: float = Field(default=0.5, gt=0.0, lt=1.0)
    num_classes: Literal[2] = 2
    seed: NonNegativeInt = 0


class TheoremInstance(ParamModel):
    """Two linear models sharing features, compared at a minority and a majority point."""

    alpha_erm: PositiveFloat
    beta_erm: PositiveFloat
    alpha_reg: PositiveFloat
    beta_reg: PositiveFloat
    b: NonNegativeFloat
    core_mag: PositiveFloat
    spurious_mag: PositiveFloat
    junk_sum: float = 0.0

    @model_validator(mode="after")
    def _check_normalization(self):
        if abs((self.alpha_erm + self.beta_erm) - (self.alpha_reg + self.beta_reg)) > 1e-12:
            raise ValueError("core and spurious weights must share the same total across both models")
        return self

    def swapped(self) -> "TheoremInstance":
        return self.model_copy(
            update={
                "alpha_erm": self.alpha_reg,
                "beta_erm": self.beta_reg,
                "alpha_reg": self.alpha_erm,
                "beta_reg": self.beta_erm,
            }
        )


class TheoremReport(BaseModel):
    trials: int
    max_abs_deviation: float
    min_gap: float
    counterexample: Optional[dict] = None


@dataclass
class CheckpointSet:
    heads: Dict[float, LinearHead] = field(default_factory=dict)

    def at(self, fraction: float) -> LinearHead:
        for key, head in self.heads.items():
            if abs(key - fraction) < 1e-9:
                return head
        raise InvalidInputError(
            f"no checkpoint at fraction {fraction}; available {sorted(self.heads)}"
        )

    @property
    def final(self) -> LinearHead:
        return self.at(1.0)

    @property
    def fractions(self) -> List[float]:
        return sorted(self.heads)


@dataclass
class ValidationPoint:
    step: int
    per_group_accuracy: Dict[int, float]
    worst_group_accuracy: Optional[float]


@dataclass
class TrainReport:
    head: LinearHead
    checkpoints: CheckpointSet
    loss_trace: List[float]
    val_trace: List[ValidationPoint] = field(default_factory=list)
    steps: int = 0


@dataclass
class SelectionResult:
    indices: np.ndarray
    costs: np.ndarray
    worst_group_fraction: Optional[float] = None
    annotations_requested: int = 0
    worst_groups: Tuple[int, ...] = ()
    worst_group_base_rate: Optional[float] = None
    reweight_accuracy: Optional[float] = None
    variant: str = ""


@dataclass
class GroupMetrics:
    per_group_accuracy: Dict[int, float]
    worst_group_accuracy: Optional[float]
    average_accuracy: float
    counts: Dict[int, int]
    omitted_groups: Tuple[int, ...] = ()


@dataclass
class ExperimentReport:
    method: str
    seeds: List[int]
    metrics: List[GroupMetrics]
    wga_mean: Optional[float]
    wga_std: Optional[float]
    annotations: Dict[str, int]
    config: Dict[str, object]
    extras: List[dict] = field(default_factory=list)
