"""
Metric, label and sample value types shared by every wattline service.

All types are frozen after construction. Label sets are kept in canonical
(lexicographic by name) order so that equal sets compare and hash equal.
"""

import math
import re
from dataclasses import dataclass, field
from wattline._compat import StrEnum
from typing import Iterable, Mapping, Optional

METRIC_NAME_RE = re.compile(r"^[a-zA-Z_:][a-zA-Z0-9_:]*$")
LABEL_NAME_RE = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")


class MetricKind(StrEnum):
    COUNTER = "counter"
    GAUGE = "gauge"


@dataclass(frozen=True, slots=True)
class LabelSet:
    """Ordered, duplicate-free set of label pairs"""

    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted((str(k), str(v)) for k, v in self.pairs))
        for previous, current in zip(ordered, ordered[1:]):
            if previous[0] == current[0]:
                raise ValueError(f"duplicate label name {current[0]!r}")
        object.__setattr__(self, "pairs", ordered)

    @classmethod
    def of(cls, **labels: str) -> "LabelSet":
        return cls(tuple(labels.items()))

    @classmethod
    def from_mapping(cls, labels: Mapping[str, str]) -> "LabelSet":
        return cls(tuple(labels.items()))

    def get(self, name: str, default: Optional[str] = None) -> Optional[str]:
        for key, value in self.pairs:
            if key == name:
                return value
        return default

    def names(self) -> list[str]:
        return [key for key, _ in self.pairs]

    def as_dict(self) -> dict[str, str]:
        return dict(self.pairs)

    def merge(self, **labels: str) -> "LabelSet":
        """Return a copy with the given labels added or replaced"""
        merged = self.as_dict()
        merged.update(labels)
        return LabelSet.from_mapping(merged)

    def without(self, *names: str) -> "LabelSet":
        return LabelSet(tuple((k, v) for k, v in self.pairs if k not in names))

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True, slots=True)
class Sample:
    metric_name: str
    labels: LabelSet = field(default_factory=LabelSet)
    value: float = 0.0
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not self.metric_name:
            raise ValueError("metric_name must not be empty")
        value = float(self.value)
        if math.isinf(value):
            raise ValueError(f"sample {self.metric_name} has infinite value")
        object.__setattr__(self, "value", value)


@dataclass(frozen=True, slots=True)
class MetricFamily:
    name: str
    kind: MetricKind
    help: str = ""
    samples: tuple[Sample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        object.__setattr__(self, "samples", tuple(self.samples))
        for sample in self.samples:
            if not sample.metric_name.startswith(self.name):
                raise ValueError(
                    f"sample {sample.metric_name!r} does not belong to family {self.name!r}"
                )
            if self.kind is MetricKind.COUNTER and sample.value < 0:
                raise ValueError(
                    f"counter {self.name} has negative sample {sample.value}"
                )


@dataclass(frozen=True, slots=True)
class TimeSeries:
    """Time-ordered points of one series; timestamps in ms, strictly increasing"""

    labels: LabelSet
    points: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        points = tuple((int(ts), float(v)) for ts, v in self.points)
        for (t0, _), (t1, _) in zip(points, points[1:]):
            if t1 <= t0:
                raise ValueError(f"timestamps not strictly increasing at {t1}")
        object.__setattr__(self, "points", points)

    @property
    def timestamps(self) -> list[int]:
        return [ts for ts, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.points]

    def __len__(self) -> int:
        return len(self.points)


def family(
    name: str,
    kind: MetricKind | str,
    help: str,
    samples: Iterable[tuple[Mapping[str, str], float]] = (),
) -> MetricFamily:
    """Build a family whose samples all carry the family name"""
    return MetricFamily(
        name=name,
        kind=MetricKind(kind),
        help=help,
        samples=tuple(
            Sample(name, LabelSet.from_mapping(labels), value) for labels, value in samples
        ),
    )
