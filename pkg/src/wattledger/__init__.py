"""Stage-aware energy accounting for ML training pipelines."""

from .errors import (
    EndpointError,
    IncompleteRunError,
    IntegrationError,
    MarkerParseError,
    SimulationError,
    SourceRangeError,
    SourceUnavailableError,
    TraceFormatError,
    ValidationError,
    WattLedgerError,
)
from .model import (
    KWH_TO_JOULES,
    CarbonAssumptions,
    EnergyQualityPoint,
    Pipeline,
    PowerSample,
    PowerTrace,
    RunManifest,
    Source,
    StageEnergyRecord,
    StageKind,
    StageSpan,
    ensure_disjoint,
    joules_to_kwh,
    kwh_to_joules,
)

__version__ = "0.1.0"

__all__ = [
    "CarbonAssumptions",
    "EndpointError",
    "EnergyQualityPoint",
    "IncompleteRunError",
    "IntegrationError",
    "KWH_TO_JOULES",
    "MarkerParseError",
    "Pipeline",
    "PowerSample",
    "PowerTrace",
    "RunManifest",
    "SimulationError",
    "Source",
    "SourceRangeError",
    "SourceUnavailableError",
    "StageEnergyRecord",
    "StageKind",
    "StageSpan",
    "TraceFormatError",
    "ValidationError",
    "WattLedgerError",
    "ensure_disjoint",
    "joules_to_kwh",
    "kwh_to_joules",
    "__version__",
]
