"""Power sources: synthetic waveforms, trace replay, CPU estimation, NVML.

A source answers read(at_ms) -> watts. Sources that are pure functions of the
requested timestamp (waveform, replay) set ``functional = True``; the sampler
may then evaluate them at exact grid timestamps. Physical sensors read "now"
and must be stamped with the actual read time.
"""

from __future__ import annotations

import math
import random
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .errors import SourceRangeError, SourceUnavailableError, ValidationError
from .model import PowerSample, Source, _require

SEGMENT_SHAPES = ("constant", "linear_ramp", "sine")


@dataclass(frozen=True)
class WaveformSegment:
    """One piece of a synthetic power curve.

    base_power is the value at the segment start (constant/sine midline, ramp
    origin). Noise is uniform in [-noise_amplitude, +noise_amplitude] on top of
    the shape; parameters are validated so the curve can never go negative.
    """

    duration_s: float
    base_power: float
    noise_amplitude: float = 0.0
    shape: str = "constant"
    end_power: float | None = None  # linear_ramp target; defaults to base_power
    amplitude: float = 0.0  # sine swing around base_power
    period_s: float = 0.0  # sine period; required when shape == "sine"

    def __post_init__(self) -> None:
        _require(self.duration_s > 0, "segment duration_s must be > 0")
        _require(self.shape in SEGMENT_SHAPES, f"unknown segment shape {self.shape!r}")
        _require(self.base_power >= 0, "base_power must be >= 0")
        _require(self.noise_amplitude >= 0, "noise_amplitude must be >= 0")
        if self.shape == "linear_ramp":
            end = self.base_power if self.end_power is None else self.end_power
            object.__setattr__(self, "end_power", float(end))
            _require(min(self.base_power, end) >= self.noise_amplitude or self.noise_amplitude == 0,
                     "ramp may go negative: min power must cover noise_amplitude")
        else:
            _require(self.end_power is None, f"end_power only applies to linear_ramp")
        if self.shape == "sine":
            _require(self.period_s > 0, "sine segments need period_s > 0")
            _require(self.amplitude >= 0, "amplitude must be >= 0")
            _require(self.base_power >= self.amplitude + self.noise_amplitude,
                     "sine may go negative: base_power must cover amplitude + noise")
        else:
            _require(self.amplitude == 0 and self.period_s == 0,
                     "amplitude/period_s only apply to sine")
        _require(self.base_power >= self.noise_amplitude or self.noise_amplitude == 0
                 or self.shape == "linear_ramp",
                 "base_power must cover noise_amplitude")

    def value_at(self, local_t: float) -> float:
        """Noise-free power local_t seconds into the segment."""
        if self.shape == "constant":
            return self.base_power
        if self.shape == "linear_ramp":
            frac = local_t / self.duration_s
            return self.base_power + (self.end_power - self.base_power) * frac
        return self.base_power + self.amplitude * math.sin(2.0 * math.pi * local_t / self.period_s)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "duration_s": self.duration_s,
            "base_power": self.base_power,
            "shape": self.shape,
        }
        if self.noise_amplitude:
            out["noise_amplitude"] = self.noise_amplitude
        if self.shape == "linear_ramp":
            out["end_power"] = self.end_power
        if self.shape == "sine":
            out["amplitude"] = self.amplitude
            out["period_s"] = self.period_s
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WaveformSegment":
        try:
            return cls(
                duration_s=data["duration_s"],
                base_power=data["base_power"],
                noise_amplitude=data.get("noise_amplitude", 0.0),
                shape=data.get("shape", "constant"),
                end_power=data.get("end_power"),
                amplitude=data.get("amplitude", 0.0),
                period_s=data.get("period_s", 0.0),
            )
        except KeyError as exc:
            raise ValidationError(f"bad waveform segment: missing {exc}") from exc


@dataclass(frozen=True)
class WaveformSpec:
    """A piecewise power curve made of consecutive segments."""

    segments: tuple[WaveformSegment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        _require(len(self.segments) > 0, "waveform needs at least one segment")

    @property
    def total_duration_s(self) -> float:
        return sum(s.duration_s for s in self.segments)

    def segment_at(self, offset_s: float) -> tuple[WaveformSegment, float]:
        """Segment covering offset_s and the local time within it.

        offset_s must lie in [0, total_duration_s]; the right edge maps to the
        end of the last segment.
        """
        _require(0 <= offset_s <= self.total_duration_s + 1e-9,
                 f"offset {offset_s} outside waveform [0, {self.total_duration_s}]")
        t = offset_s
        for seg in self.segments:
            if t <= seg.duration_s:
                return seg, t
            t -= seg.duration_s
        last = self.segments[-1]
        return last, last.duration_s

    def value_at(self, offset_s: float) -> float:
        seg, local = self.segment_at(offset_s)
        return seg.value_at(local)

    def to_dict(self) -> dict[str, Any]:
        return {"segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WaveformSpec":
        try:
            segs = data["segments"]
        except KeyError as exc:
            raise ValidationError(f"bad waveform: missing {exc}") from exc
        return cls(segments=tuple(WaveformSegment.from_dict(s) for s in segs))


class PowerSource:
    """Interface: read(at_ms) -> watts for one device."""

    source: Source = Source.GPU
    device_id: str = "gpu0"
    # True when read() is a pure function of at_ms (safe to evaluate at any
    # requested timestamp); False for physical sensors that read "now".
    functional: bool = False

    def read(self, at_ms: int) -> float:
        raise NotImplementedError


class SimulatedSource(PowerSource):
    """Evaluates a WaveformSpec anchored at an absolute epoch timestamp.

    Outside the waveform the curve holds its first/last value, so a sampler
    running slightly before/after the window sees a flat extension rather
    than an edge artifact. Noise is deterministic per (seed, timestamp).
    """

    functional = True

    def __init__(self, spec: WaveformSpec, *, seed: int = 0, anchor_ms: int = 0,
                 device_id: str = "sim0"):
        self.spec = spec
        self.seed = seed
        self.anchor_ms = anchor_ms
        self.device_id = device_id
        self._total_s = spec.total_duration_s

    def read(self, at_ms: int) -> float:
        offset = (at_ms - self.anchor_ms) / 1000.0
        offset = min(max(offset, 0.0), self._total_s)  # clamp-hold at the edges
        seg, local = self.spec.segment_at(offset)
        value = seg.value_at(local)
        if seg.noise_amplitude:
            # Keyed on the anchor-relative ms so a re-anchored run reproduces
            # the same curve; str seeds hash via sha512, stable across processes.
            rng = random.Random(f"{self.seed}:{at_ms - self.anchor_ms}")
            value += rng.uniform(-seg.noise_amplitude, seg.noise_amplitude)
        return value


class ReplaySource(PowerSource):
    """Replays a recorded sample stream, linearly interpolated between samples.

    Reads outside the recorded [first, last] window raise SourceRangeError.
    Linear interpolation means a replay re-sampled on any grid that includes
    the original timestamps integrates to the same energy as the original.
    With ``anchor_ms`` set, reads are shifted so the recording starts playing
    at the anchor instead of at its original wall-clock position.
    """

    functional = True

    def __init__(self, samples: Sequence[PowerSample], *, anchor_ms: int | None = None):
        self.anchor_ms = anchor_ms
        _require(len(samples) >= 2, "replay needs at least 2 samples")
        ordered = sorted(samples, key=lambda s: s.timestamp)
        devices = {(s.device_id, s.source) for s in ordered}
        _require(len(devices) == 1,
                 f"replay needs a single stream, got {sorted(str(d) for d in devices)}")
        ((self.device_id, self.source),) = devices
        self._ts = [s.timestamp for s in ordered]
        self._power = [s.power for s in ordered]
        _require(all(a < b for a, b in zip(self._ts, self._ts[1:])),
                 "replay timestamps must be strictly increasing")

    @classmethod
    def from_file(cls, path: str, *, source: Source = Source.GPU,
                  device_id: str | None = None,
                  anchor_ms: int | None = None) -> "ReplaySource":
        from .storage import read_samples  # local import to avoid a cycle

        samples, _truncated = read_samples(path)
        picked = [s for s in samples if s.source == source
                  and (device_id is None or s.device_id == device_id)]
        if device_id is None:
            devices = sorted({s.device_id for s in picked})
            _require(len(devices) <= 1,
                     f"trace holds multiple {source.value} devices {devices}; pass device_id")
        _require(len(picked) >= 2, f"no replayable {source.value} stream in {path}")
        return cls(picked, anchor_ms=anchor_ms)

    @property
    def start_ms(self) -> int:
        return self._ts[0]

    @property
    def end_ms(self) -> int:
        return self._ts[-1]

    def read(self, at_ms: int) -> float:
        t = at_ms if self.anchor_ms is None else self._ts[0] + (at_ms - self.anchor_ms)
        if not self._ts[0] <= t <= self._ts[-1]:
            raise SourceRangeError(
                f"t={t} outside replay range [{self._ts[0]}, {self._ts[-1]}]")
        i = bisect_left(self._ts, t)
        if self._ts[i] == t:
            return self._power[i]
        t0, t1 = self._ts[i - 1], self._ts[i]
        w0, w1 = self._power[i - 1], self._power[i]
        return w0 + (w1 - w0) * (t - t0) / (t1 - t0)


@dataclass(frozen=True)
class CpuEstimatorConfig:
    """Rated-power CPU model: estimated watts = rated_power * utilization."""

    rated_power: float  # watts at 100% utilization, > 0
    utilization_source: str = "fixed"  # "fixed" | "sampled"
    fixed_utilization: float = 1.0  # used when utilization_source == "fixed"

    def __post_init__(self) -> None:
        _require(self.rated_power > 0, "rated_power must be > 0")
        _require(self.utilization_source in ("fixed", "sampled"),
                 f"unknown utilization_source {self.utilization_source!r}")
        _require(0.0 <= self.fixed_utilization <= 1.0,
                 "fixed_utilization must be within [0, 1]")

    def current_utilization(self) -> float:
        if self.utilization_source == "fixed":
            return self.fixed_utilization
        import psutil

        return min(max(psutil.cpu_percent(interval=None) / 100.0, 0.0), 1.0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rated_power": self.rated_power,
            "utilization_source": self.utilization_source,
            "fixed_utilization": self.fixed_utilization,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CpuEstimatorConfig":
        try:
            return cls(
                rated_power=data["rated_power"],
                utilization_source=data.get("utilization_source", "fixed"),
                fixed_utilization=data.get("fixed_utilization", 1.0),
            )
        except KeyError as exc:
            raise ValidationError(f"bad cpu estimator config: missing {exc}") from exc


def estimate_cpu_power(config: CpuEstimatorConfig, utilization: float) -> float:
    """Estimated CPU draw in watts for a utilization fraction in [0, 1]."""
    _require(0.0 <= utilization <= 1.0, f"utilization must be within [0, 1], got {utilization!r}")
    return config.rated_power * utilization


class CpuEstimatorSource(PowerSource):
    """Rated-power CPU estimator as a sampler-compatible source."""

    source = Source.CPU
    device_id = "cpu0"
    functional = False

    def __init__(self, config: CpuEstimatorConfig):
        self.config = config

    def read(self, at_ms: int) -> float:
        return estimate_cpu_power(self.config, self.config.current_utilization())


class NativeGpuSource(PowerSource):
    """Live NVML power readings. Requires the optional pynvml dependency."""

    functional = False

    def __init__(self, device_index: int = 0):
        try:
            import pynvml
        except ImportError as exc:
            raise SourceUnavailableError(
                "pynvml is not installed; install the 'nvml' extra for live GPU readings"
            ) from exc
        try:
            pynvml.nvmlInit()
            self._handle = pynvml.nvmlDeviceGetHandleByIndex(device_index)
        except pynvml.NVMLError as exc:  # pragma: no cover - needs real hardware
            raise SourceUnavailableError(f"NVML unavailable: {exc}") from exc
        self._pynvml = pynvml
        self.device_id = f"gpu{device_index}"

    def read(self, at_ms: int) -> float:  # pragma: no cover - needs real hardware
        return self._pynvml.nvmlDeviceGetPowerUsage(self._handle) / 1000.0


DESCRIPTOR_KINDS = ("simulated", "replay", "native_gpu")


@dataclass(frozen=True)
class PowerSourceDescriptor:
    """Serializable recipe for constructing a power source."""

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require(self.kind in DESCRIPTOR_KINDS, f"unknown source kind {self.kind!r}")
        object.__setattr__(self, "params", dict(self.params))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PowerSourceDescriptor":
        try:
            return cls(kind=data["kind"], params=data.get("params", {}))
        except KeyError as exc:
            raise ValidationError(f"bad source descriptor: missing {exc}") from exc


def create_source(descriptor: PowerSourceDescriptor) -> PowerSource:
    p = descriptor.params
    if descriptor.kind == "simulated":
        try:
            spec = WaveformSpec.from_dict(p["waveform"])
        except KeyError as exc:
            raise ValidationError("simulated source needs a 'waveform' param") from exc
        return SimulatedSource(
            spec,
            seed=p.get("seed", 0),
            anchor_ms=p.get("anchor_ms", 0),
            device_id=p.get("device_id", "sim0"),
        )
    if descriptor.kind == "replay":
        try:
            path = p["path"]
        except KeyError as exc:
            raise ValidationError("replay source needs a 'path' param") from exc
        return ReplaySource.from_file(
            path,
            source=Source(p.get("source", "gpu")),
            device_id=p.get("device_id"),
            anchor_ms=p.get("anchor_ms"),
        )
    return NativeGpuSource(device_index=p.get("device_index", 0))


def read_power(source: PowerSource | PowerSourceDescriptor, at_ms: int) -> float:
    """Read instantaneous power, constructing the source from a descriptor if needed."""
    if isinstance(source, PowerSourceDescriptor):
        source = create_source(source)
    return source.read(at_ms)
