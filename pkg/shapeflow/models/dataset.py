"""Training samples and datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from shapeflow.models.design import DesignParams
from shapeflow.models.fields import ScalarField3, VectorField3


@dataclass(frozen=True)
class Sample:
    """SDF window and matching velocity window of one design."""

    params: Optional[DesignParams]
    sdf: ScalarField3
    velocity: VectorField3
    sample_id: str = ""

    def __post_init__(self):
        if self.sdf.spec != self.velocity.spec:
            raise ValueError(
                f"Sample fields disagree on grid: {self.sdf.spec} vs {self.velocity.spec}"
            )


@dataclass(frozen=True)
class RejectRecord:
    """Why a sample was dropped by the hygiene filter."""

    index: int
    sample_id: str
    reason: str  # "nan" or "umag"
    node: Tuple[int, int, int]
    max_umag: float


@dataclass
class FilterReport:
    retained: List[int] = field(default_factory=list)
    rejected: List[RejectRecord] = field(default_factory=list)

    @property
    def num_retained(self) -> int:
        return len(self.retained)

    @property
    def num_rejected(self) -> int:
        return len(self.rejected)


@dataclass(frozen=True)
class Dataset:
    """Retained samples, velocity normalization and train/validation split."""

    samples: List[Sample]
    normalization: float
    split: Tuple[List[int], List[int]]

    def __post_init__(self):
        if not self.normalization > 0:
            raise ValueError(f"Normalization must be positive, got {self.normalization}")
        train, val = self.split
        if set(train) & set(val):
            raise ValueError("Train and validation splits overlap")
        n = len(self.samples)
        if any(i < 0 or i >= n for i in list(train) + list(val)):
            raise ValueError("Split index out of range")

    @property
    def train_samples(self) -> List[Sample]:
        return [self.samples[i] for i in self.split[0]]

    @property
    def val_samples(self) -> List[Sample]:
        return [self.samples[i] for i in self.split[1]]
