"""Energy accounting: trapezoidal integration of traces over stage spans.

Integration interpolates the power curve at span boundaries that fall between
two samples, so a partition of a span integrates to exactly the whole (up to
float error). Samples outside the trace's coverage are never extrapolated.
"""

from __future__ import annotations

import csv
import io
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import IntegrationError, ValidationError
from .model import (
    CarbonAssumptions,
    PowerSample,
    PowerTrace,
    Source,
    StageEnergyRecord,
    StageKind,
    StageSpan,
    _require,
    ensure_disjoint,
)
from .storage import DIAGNOSTICS_FILE, load_run, read_json

UNATTRIBUTED = StageKind("unattributed")


def _single_stream(samples: Sequence[PowerSample]) -> None:
    streams = {(s.device_id, s.source) for s in samples}
    _require(len(streams) <= 1,
             f"integration needs a single sample stream, got {sorted(map(str, streams))}")


def _interp(t: int, t0: int, w0: float, t1: int, w1: float) -> float:
    return w0 + (w1 - w0) * (t - t0) / (t1 - t0)


def integrate_energy(trace: PowerTrace | Sequence[PowerSample], span: StageSpan) -> float:
    """Trapezoidal energy (joules) of one sample stream over a span.

    Requires >= 2 samples inside [start, end]; boundaries falling between two
    samples are linearly interpolated so adjacent spans never double-count.
    """
    samples = trace.samples if isinstance(trace, PowerTrace) else tuple(trace)
    _single_stream(samples)
    ts = [s.timestamp for s in samples]
    lo = bisect_left(ts, span.start)
    hi = bisect_right(ts, span.end) - 1
    inside = hi - lo + 1 if hi >= lo else 0
    if inside < 2:
        raise IntegrationError(
            f"span {span.kind} [{span.start},{span.end}) overlaps only {inside} "
            f"sample(s); need >= 2", overlapping_samples=inside)
    points: list[tuple[float, float]] = []
    if ts[lo] > span.start and lo > 0:
        points.append((float(span.start),
                       _interp(span.start, ts[lo - 1], samples[lo - 1].power,
                               ts[lo], samples[lo].power)))
    points.extend((float(ts[i]), samples[i].power) for i in range(lo, hi + 1))
    if ts[hi] < span.end and hi < len(ts) - 1:
        points.append((float(span.end),
                       _interp(span.end, ts[hi], samples[hi].power,
                               ts[hi + 1], samples[hi + 1].power)))
    acc = 0.0  # watt-milliseconds
    for (t0, w0), (t1, w1) in zip(points, points[1:]):
        acc += 0.5 * (w0 + w1) * (t1 - t0)
    return acc / 1000.0


def stage_record(trace: PowerTrace | Sequence[PowerSample], span: StageSpan, *,
                 cpu_trace: PowerTrace | Sequence[PowerSample] | None = None,
                 run_id: str = "", time_scale: float = 1.0) -> StageEnergyRecord:
    """Fold one span into a StageEnergyRecord (GPU + optional CPU energy).

    A missing/empty CPU trace contributes 0 J and sets a cpu_trace_missing
    flag. time_scale un-compresses simulated runs (divides energy and
    duration).
    """
    _require(time_scale > 0, "time_scale must be > 0")
    energy = integrate_energy(trace, span)
    flags: list[str] = []
    if cpu_trace is not None and len(cpu_trace) > 0:
        energy += integrate_energy(cpu_trace, span)
    else:
        flags.append("cpu_trace_missing")
    return StageEnergyRecord(
        run_id=run_id,
        kind=span.kind,
        energy_joules=energy / time_scale,
        duration=span.duration_ms / 1000.0 / time_scale,
        tokens=span.tokens,
        flags=tuple(flags),
    )


def derive_co2e(total_kwh: float, assumptions: CarbonAssumptions) -> float:
    """kg CO2e = kWh * PUE * grid intensity."""
    _require(total_kwh >= 0, "total_kwh must be >= 0")
    return total_kwh * assumptions.pue * assumptions.grid_intensity


@dataclass(frozen=True)
class RunEnergyReport:
    """Per-stage energy records plus run totals.

    total_kwh excludes prerun (one-off environment cost); the unattributed
    record (energy measured between stages) sits outside both totals.
    """

    run_id: str
    records: tuple[StageEnergyRecord, ...]
    unattributed: StageEnergyRecord | None = None
    assumptions: CarbonAssumptions | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def total_kwh(self) -> float:
        return sum(r.energy_kwh for r in self.records if r.kind != StageKind.PRERUN)

    @property
    def total_kwh_including_prerun(self) -> float:
        return sum(r.energy_kwh for r in self.records)

    @property
    def co2e_kg(self) -> float | None:
        if self.assumptions is None:
            return None
        return derive_co2e(self.total_kwh, self.assumptions)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "run_id": self.run_id,
            "records": [r.to_dict() for r in self.records],
            "total_kwh": self.total_kwh,
            "total_kwh_including_prerun": self.total_kwh_including_prerun,
        }
        if self.unattributed is not None:
            out["unattributed"] = self.unattributed.to_dict()
        if self.assumptions is not None:
            out["assumptions"] = self.assumptions.to_dict()
            out["co2e_kg"] = self.co2e_kg
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunEnergyReport":
        try:
            return cls(
                run_id=data["run_id"],
                records=tuple(StageEnergyRecord.from_dict(r) for r in data["records"]),
                unattributed=(StageEnergyRecord.from_dict(data["unattributed"])
                              if "unattributed" in data else None),
                assumptions=(CarbonAssumptions.from_dict(data["assumptions"])
                             if "assumptions" in data else None),
            )
        except KeyError as exc:
            raise ValidationError(f"bad run report: missing {exc}") from exc

    def to_table(self) -> str:
        """Human-readable table; kWh and J/token shown to 2 decimals."""
        lines = [f"run {self.run_id}"]
        lines.append(f"{'stage':<24}{'kWh':>10}{'J/token':>12}{'tokens':>14}{'seconds':>14}")
        rows = list(self.records)
        if self.unattributed is not None:
            rows.append(self.unattributed)
        for r in rows:
            jpt = f"{r.joules_per_token:.2f}" if r.joules_per_token is not None else "-"
            lines.append(f"{r.kind.name:<24}{r.energy_kwh:>10.2f}{jpt:>12}"
                         f"{r.tokens:>14}{r.duration:>14.1f}")
        lines.append(f"{'total (excl. prerun)':<24}{self.total_kwh:>10.2f}")
        lines.append(f"{'total (incl. prerun)':<24}{self.total_kwh_including_prerun:>10.2f}")
        if self.co2e_kg is not None:
            lines.append(f"{'co2e (kg)':<24}{self.co2e_kg:>10.3f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """Machine-readable rows at full precision, one line per record."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["run_id", "stage", "energy_joules", "energy_kwh", "duration_s",
                         "tokens", "joules_per_token", "tokens_per_second", "flags"])
        rows = list(self.records)
        if self.unattributed is not None:
            rows.append(self.unattributed)
        for r in rows:
            writer.writerow([
                r.run_id, r.kind.name, repr(r.energy_joules), repr(r.energy_kwh),
                repr(r.duration), r.tokens,
                "" if r.joules_per_token is None else repr(r.joules_per_token),
                "" if r.tokens_per_second is None else repr(r.tokens_per_second),
                "|".join(r.flags),
            ])
        return buf.getvalue()


def run_report(run_dir: str | Path,
               assumptions: CarbonAssumptions | None = None) -> RunEnergyReport:
    """Build the energy report for a completed run directory."""
    data = load_run(run_dir)
    manifest = data.manifest
    # Validates per-stream timestamp monotonicity as a side effect.
    PowerTrace(samples=tuple(data.samples), sampling_interval=manifest.sampling_interval)
    gpu = [s for s in data.samples if s.source == Source.GPU]
    cpu = [s for s in data.samples if s.source == Source.CPU]
    for label, group in (("gpu", gpu), ("cpu", cpu)):
        devices = {s.device_id for s in group}
        _require(len(devices) <= 1,
                 f"trace holds multiple {label} devices {sorted(devices)}; "
                 "single-device runs only")
    spans = sorted(data.spans, key=lambda s: (s.start, s.end))
    ensure_disjoint(spans)
    records = tuple(
        stage_record(gpu, span, cpu_trace=cpu or None,
                     run_id=manifest.run_id, time_scale=manifest.time_scale)
        for span in spans
    )

    gap_energy = 0.0
    gap_ms = 0
    gap_flags: set[str] = set()
    for a, b in zip(spans, spans[1:]):
        if b.start <= a.end:
            continue
        gap_ms += b.start - a.end
        gap_span = StageSpan(kind=UNATTRIBUTED, start=a.end, end=b.start)
        try:
            gap_energy += integrate_energy(gpu, gap_span)
            if cpu:
                gap_energy += integrate_energy(cpu, gap_span)
        except IntegrationError:
            gap_flags.add("gap_unmeasured")
    unattributed = None
    if gap_ms > 0:
        tokens = 0
        diag_path = Path(run_dir) / DIAGNOSTICS_FILE
        if diag_path.is_file():
            diag = read_json(diag_path)
            tokens = int(diag.get("unattributed_counters", {}).get("tokens", 0))
        unattributed = StageEnergyRecord(
            run_id=manifest.run_id,
            kind=UNATTRIBUTED,
            energy_joules=gap_energy / manifest.time_scale,
            duration=gap_ms / 1000.0 / manifest.time_scale,
            tokens=tokens,
            flags=tuple(sorted(gap_flags)),
        )
    return RunEnergyReport(run_id=manifest.run_id, records=records,
                           unattributed=unattributed, assumptions=assumptions)
