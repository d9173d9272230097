import math
from dataclasses import dataclass
from wattline._compat import StrEnum


class FactorProvider(StrEnum):
    STATIC = "static"
    REALTIME = "realtime"


@dataclass(frozen=True, slots=True)
class EmissionFactor:
    """Grams of CO2-equivalent per kWh for a region at a timestamp (ms)"""

    region: str
    grams_per_kwh: float
    timestamp: int
    provider: FactorProvider

    def __post_init__(self):
        if not self.region:
            raise ValueError("region must not be empty")
        if not math.isfinite(self.grams_per_kwh) or self.grams_per_kwh < 0:
            raise ValueError(f"invalid emission factor {self.grams_per_kwh}")
        object.__setattr__(self, "provider", FactorProvider(self.provider))
