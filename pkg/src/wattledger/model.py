"""Core value types shared by every wattledger module.

All timestamps are integer milliseconds since the Unix epoch, power is watts,
energy is joules unless a field name says kwh. Values are immutable after
construction and validate on construction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import ValidationError

KWH_TO_JOULES = 3.6e6

_NAME_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")


def joules_to_kwh(joules: float) -> float:
    return joules / KWH_TO_JOULES


def kwh_to_joules(kwh: float) -> float:
    return kwh * KWH_TO_JOULES


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


class Source(str, Enum):
    """Which component a power sample was read from."""

    GPU = "gpu"
    CPU = "cpu"


@dataclass(frozen=True)
class StageKind:
    """A pipeline stage name: lowercase, underscore-separated, non-empty.

    The well-known stages are exposed as class attributes (StageKind.PRERUN,
    ...); any other conforming name is a valid custom stage.
    """

    name: str

    def __post_init__(self) -> None:
        _require(isinstance(self.name, str) and bool(_NAME_RE.match(self.name or "")),
                 f"invalid stage name {self.name!r}: must be lowercase, underscore-separated")

    def __str__(self) -> str:
        return self.name


# Well-known stage taxonomy; anything else is a custom stage.
StageKind.PRERUN = StageKind("prerun")
StageKind.DATA_PREPROCESS = StageKind("data_preprocess")
StageKind.TEACHER_LOGIT_CACHING = StageKind("teacher_logit_caching")
StageKind.TEACHER_GENERATION = StageKind("teacher_generation")
StageKind.STUDENT_TRAINING = StageKind("student_training")
StageKind.EVALUATION = StageKind("evaluation")


@dataclass(frozen=True)
class Pipeline:
    """A training pipeline family name (same lexical rules as StageKind)."""

    name: str

    def __post_init__(self) -> None:
        _require(isinstance(self.name, str) and bool(_NAME_RE.match(self.name or "")),
                 f"invalid pipeline name {self.name!r}: must be lowercase, underscore-separated")

    def __str__(self) -> str:
        return self.name


Pipeline.BASELINE_SFT = Pipeline("baseline_sft")
Pipeline.KD = Pipeline("kd")
Pipeline.SYNTHETIC_SFT = Pipeline("synthetic_sft")


@dataclass(frozen=True)
class PowerSample:
    """One instantaneous power reading from one device."""

    timestamp: int  # ms since epoch
    device_id: str
    source: Source
    power: float  # watts, >= 0

    def __post_init__(self) -> None:
        _require(isinstance(self.timestamp, int) and not isinstance(self.timestamp, bool),
                 "timestamp must be an integer millisecond count")
        _require(bool(self.device_id), "device_id must be non-empty")
        object.__setattr__(self, "source", Source(self.source))
        _require(isinstance(self.power, (int, float)) and self.power >= 0,
                 f"power must be >= 0, got {self.power!r}")
        object.__setattr__(self, "power", float(self.power))

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "device_id": self.device_id,
            "source": self.source.value,
            "power": self.power,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PowerSample":
        try:
            return cls(
                timestamp=data["timestamp"],
                device_id=data["device_id"],
                source=Source(data["source"]),
                power=data["power"],
            )
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad power sample: {exc}") from exc


@dataclass(frozen=True)
class PowerTrace:
    """An ordered series of samples plus the nominal sampling interval.

    Samples must be strictly increasing in timestamp within each
    (device_id, source) stream.
    """

    samples: tuple[PowerSample, ...]
    sampling_interval: int  # nominal ms between samples, > 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        _require(self.sampling_interval > 0, "sampling_interval must be > 0")
        last: dict[tuple[str, Source], int] = {}
        for s in self.samples:
            key = (s.device_id, s.source)
            if key in last:
                _require(s.timestamp > last[key],
                         f"samples for {key} not strictly increasing at t={s.timestamp}")
            last[key] = s.timestamp

    def __len__(self) -> int:
        return len(self.samples)

    def streams(self) -> dict[tuple[str, Source], list[PowerSample]]:
        """Split into per-(device, source) sample lists, order preserved."""
        out: dict[tuple[str, Source], list[PowerSample]] = {}
        for s in self.samples:
            out.setdefault((s.device_id, s.source), []).append(s)
        return out


@dataclass(frozen=True)
class StageSpan:
    """One closed stage: [start, end) in ms, with its counter totals."""

    kind: StageKind
    start: int
    end: int
    counters: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", StageKind(self.kind))
        _require(isinstance(self.start, int) and isinstance(self.end, int),
                 "span boundaries must be integer milliseconds")
        _require(self.start < self.end,
                 f"span start must precede end ({self.start} >= {self.end})")
        counters = dict(self.counters)
        for name, value in counters.items():
            _require(isinstance(name, str) and bool(name), "counter names must be non-empty strings")
            _require(isinstance(value, int) and not isinstance(value, bool) and value >= 0,
                     f"counter {name!r} must be a non-negative integer, got {value!r}")
        object.__setattr__(self, "counters", counters)

    @property
    def duration_ms(self) -> int:
        return self.end - self.start

    @property
    def tokens(self) -> int:
        return self.counters.get("tokens", 0)

    def overlaps(self, other: "StageSpan") -> bool:
        """True when the two spans intersect for more than 0 ms."""
        return min(self.end, other.end) - max(self.start, other.start) > 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.name,
            "start": self.start,
            "end": self.end,
            "counters": dict(self.counters),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageSpan":
        try:
            return cls(
                kind=StageKind(data["kind"]),
                start=data["start"],
                end=data["end"],
                counters=data.get("counters", {}),
            )
        except KeyError as exc:
            raise ValidationError(f"bad stage span: missing {exc}") from exc


def ensure_disjoint(spans: Iterable[StageSpan]) -> None:
    """Reject any pair of spans with intersection > 0 ms."""
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            raise ValidationError(
                f"overlapping spans: {a.kind} [{a.start},{a.end}) and {b.kind} [{b.start},{b.end})")


@dataclass(frozen=True)
class RunManifest:
    """Identity and context for one measured run, written before any sample."""

    run_id: str
    pipeline: Pipeline
    model_scale: str
    dataset: str
    code_version: str
    hardware: Mapping[str, Any]
    sampling_interval: int  # ms
    created_at: int  # ms since epoch
    # Wall-clock compression of the run; 1.0 for real runs. Accounting divides
    # measured durations and energies by this factor.
    time_scale: float = 1.0

    def __post_init__(self) -> None:
        _require(bool(self.run_id), "run_id must be non-empty")
        if isinstance(self.pipeline, str):
            object.__setattr__(self, "pipeline", Pipeline(self.pipeline))
        _require(self.sampling_interval > 0, "sampling_interval must be > 0")
        _require(self.time_scale > 0, "time_scale must be > 0")
        object.__setattr__(self, "hardware", dict(self.hardware))

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "pipeline": self.pipeline.name,
            "model_scale": self.model_scale,
            "dataset": self.dataset,
            "code_version": self.code_version,
            "hardware": dict(self.hardware),
            "sampling_interval": self.sampling_interval,
            "created_at": self.created_at,
            "time_scale": self.time_scale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        try:
            return cls(
                run_id=data["run_id"],
                pipeline=Pipeline(data["pipeline"]),
                model_scale=data["model_scale"],
                dataset=data["dataset"],
                code_version=data["code_version"],
                hardware=data["hardware"],
                sampling_interval=data["sampling_interval"],
                created_at=data["created_at"],
                time_scale=data.get("time_scale", 1.0),
            )
        except KeyError as exc:
            raise ValidationError(f"bad run manifest: missing {exc}") from exc


@dataclass(frozen=True)
class StageEnergyRecord:
    """Accounting output for one stage of one run.

    energy_kwh, joules_per_token and tokens_per_second are derived, never
    stored independently; the latter two are None when their denominator is 0.
    """

    run_id: str
    kind: StageKind
    energy_joules: float
    duration: float  # seconds
    tokens: int
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", StageKind(self.kind))
        _require(self.energy_joules >= 0, "energy_joules must be >= 0")
        _require(self.duration >= 0, "duration must be >= 0")
        _require(isinstance(self.tokens, int) and self.tokens >= 0,
                 "tokens must be a non-negative integer")
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def energy_kwh(self) -> float:
        return joules_to_kwh(self.energy_joules)

    @property
    def joules_per_token(self) -> float | None:
        return self.energy_joules / self.tokens if self.tokens else None

    @property
    def tokens_per_second(self) -> float | None:
        return self.tokens / self.duration if self.duration else None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "run_id": self.run_id,
            "kind": self.kind.name,
            "energy_joules": self.energy_joules,
            "energy_kwh": self.energy_kwh,
            "duration": self.duration,
            "tokens": self.tokens,
        }
        if self.joules_per_token is not None:
            out["joules_per_token"] = self.joules_per_token
        if self.tokens_per_second is not None:
            out["tokens_per_second"] = self.tokens_per_second
        if self.flags:
            out["flags"] = list(self.flags)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageEnergyRecord":
        try:
            return cls(
                run_id=data["run_id"],
                kind=StageKind(data["kind"]),
                energy_joules=data["energy_joules"],
                duration=data["duration"],
                tokens=data["tokens"],
                flags=tuple(data.get("flags", ())),
            )
        except KeyError as exc:
            raise ValidationError(f"bad stage record: missing {exc}") from exc


@dataclass(frozen=True)
class EnergyQualityPoint:
    """One run reduced to the (total energy, quality score) plane."""

    label: str
    pipeline: Pipeline
    model_scale: str
    total_energy_kwh: float
    quality: float

    def __post_init__(self) -> None:
        _require(bool(self.label), "label must be non-empty")
        if isinstance(self.pipeline, str):
            object.__setattr__(self, "pipeline", Pipeline(self.pipeline))
        _require(self.total_energy_kwh > 0, "total_energy_kwh must be > 0")
        _require(self.quality >= 0, "quality must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "pipeline": self.pipeline.name,
            "model_scale": self.model_scale,
            "total_energy_kwh": self.total_energy_kwh,
            "quality": self.quality,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EnergyQualityPoint":
        try:
            return cls(
                label=data["label"],
                pipeline=Pipeline(data["pipeline"]),
                model_scale=data["model_scale"],
                total_energy_kwh=data["total_energy_kwh"],
                quality=data["quality"],
            )
        except KeyError as exc:
            raise ValidationError(f"bad energy/quality point: missing {exc}") from exc


@dataclass(frozen=True)
class CarbonAssumptions:
    """Datacenter efficiency and grid intensity used to convert kWh to CO2e."""

    pue: float  # power usage effectiveness, >= 1
    grid_intensity: float  # kg CO2e per kWh, >= 0

    def __post_init__(self) -> None:
        _require(self.pue >= 1.0, f"pue must be >= 1, got {self.pue!r}")
        _require(self.grid_intensity >= 0, "grid_intensity must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {"pue": self.pue, "grid_intensity": self.grid_intensity}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CarbonAssumptions":
        try:
            return cls(pue=data["pue"], grid_intensity=data["grid_intensity"])
        except KeyError as exc:
            raise ValidationError(f"bad carbon assumptions: missing {exc}") from exc
