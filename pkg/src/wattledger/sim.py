"""Workload simulator: replays pipeline energy profiles in compressed time.

A profile lists stages with target energies; the simulator compresses wall
time by ``time_scale``, drives a live collector through the real socket
protocol, and plans integer-millisecond stage boundaries up front. Each
stage's constant power is adjusted so the ideal integral over the planned
(quantized) span equals the target exactly, and markers carry the planned
timestamps under sender clock authority — so the resulting report depends
only on (profile, seed), not on scheduler behavior.
"""

from __future__ import annotations

import math
import os
import shutil
import socket
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .collector import Collector, CollectorConfig, MarkerEvent, encode_marker_line
from .errors import SimulationError, ValidationError
from .model import KWH_TO_JOULES, Pipeline, RunManifest, StageKind, _require
from .sources import SimulatedSource, WaveformSegment, WaveformSpec
from .storage import detect_code_version, environment_descriptor, now_ms

DEFAULT_TIME_SCALE = 1e-4
DEFAULT_SIM_INTERVAL_MS = 10
# Typical sustained draw of one high-end training accelerator.
DEFAULT_MEAN_POWER_W = 650.0


@dataclass(frozen=True)
class StageProfile:
    """Energy target for one simulated stage."""

    kind: StageKind
    target_kwh: float
    mean_power_w: float = DEFAULT_MEAN_POWER_W
    tokens: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", StageKind(self.kind))
        _require(self.target_kwh > 0, "target_kwh must be > 0")
        _require(self.mean_power_w > 0, "mean_power_w must be > 0")
        _require(isinstance(self.tokens, int) and self.tokens >= 0,
                 "tokens must be a non-negative integer")

    @property
    def duration_s(self) -> float:
        """Uncompressed stage duration implied by energy and power."""
        return self.target_kwh * KWH_TO_JOULES / self.mean_power_w

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.name,
            "target_kwh": self.target_kwh,
            "mean_power_w": self.mean_power_w,
            "tokens": self.tokens,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageProfile":
        try:
            return cls(
                kind=StageKind(data["kind"]),
                target_kwh=data["target_kwh"],
                mean_power_w=data.get("mean_power_w", DEFAULT_MEAN_POWER_W),
                tokens=data.get("tokens", 0),
            )
        except KeyError as exc:
            raise ValidationError(f"bad stage profile: missing {exc}") from exc


@dataclass(frozen=True)
class PipelineProfile:
    """A full simulated run: ordered stages plus identity and compression."""

    pipeline: Pipeline
    model_scale: str
    stages: tuple[StageProfile, ...]
    time_scale: float = 1.0
    dataset: str = "synthetic"

    def __post_init__(self) -> None:
        if isinstance(self.pipeline, str):
            object.__setattr__(self, "pipeline", Pipeline(self.pipeline))
        object.__setattr__(self, "stages", tuple(self.stages))
        _require(self.time_scale > 0, "time_scale must be > 0")
        kinds = [s.kind for s in self.stages]
        for i, kind in enumerate(kinds):
            if kind == StageKind.PRERUN:
                _require(i == 0, "prerun must be the first stage")
            if kind == StageKind.EVALUATION:
                _require(i == len(kinds) - 1, "evaluation must be the last stage")

    @property
    def total_kwh(self) -> float:
        return sum(s.target_kwh for s in self.stages)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pipeline": self.pipeline.name,
            "model_scale": self.model_scale,
            "dataset": self.dataset,
            "time_scale": self.time_scale,
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineProfile":
        try:
            return cls(
                pipeline=Pipeline(data["pipeline"]),
                model_scale=data["model_scale"],
                stages=tuple(StageProfile.from_dict(s) for s in data["stages"]),
                time_scale=data.get("time_scale", 1.0),
                dataset=data.get("dataset", "synthetic"),
            )
        except KeyError as exc:
            raise ValidationError(f"bad pipeline profile: missing {exc}") from exc


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Split an integer total proportionally (largest-remainder rounding)."""
    wsum = sum(weights)
    quotas = [total * w / wsum for w in weights]
    shares = [math.floor(q) for q in quotas]
    leftover = total - sum(shares)
    by_fraction = sorted(range(len(weights)), key=lambda i: quotas[i] - shares[i],
                         reverse=True)
    for i in by_fraction[:leftover]:
        shares[i] += 1
    return shares


# Reference measurements for the three pipeline families at three scales:
# per-stage kWh and the pipeline-level J/token that fixes total token counts.
_EVAL_KWH = {"1B": 0.33, "7B": 0.68, "13B": 1.08}
_PIPELINES: dict[str, dict[str, Any]] = {
    "baseline_sft": {
        "teacher_stage": None,
        "teacher_kwh": 0.0,
        "training_kwh": {"1B": 6.30, "7B": 18.45, "13B": 33.15},
        "j_per_token": {"1B": 0.84, "7B": 2.34, "13B": 4.15},
    },
    "kd": {
        "teacher_stage": StageKind.TEACHER_LOGIT_CACHING,
        "teacher_kwh": 11.00,
        "training_kwh": {"1B": 5.20, "7B": 16.35, "13B": 30.05},
        "j_per_token": {"1B": 2.03, "7B": 3.41, "13B": 5.10},
    },
    "synthetic_sft": {
        "teacher_stage": StageKind.TEACHER_GENERATION,
        "teacher_kwh": 10.60,
        "training_kwh": {"1B": 5.35, "7B": 16.60, "13B": 28.65},
        "j_per_token": {"1B": 2.00, "7B": 3.39, "13B": 4.88},
    },
}
MODEL_SCALES = ("1B", "7B", "13B")
PRERUN_KWH = 0.12
PREPROCESS_KWH = 0.37


def builtin_profile(pipeline: str | Pipeline, model_scale: str,
                    time_scale: float = DEFAULT_TIME_SCALE) -> PipelineProfile:
    """One of the nine reference profiles (3 pipelines x 3 model scales)."""
    name = pipeline.name if isinstance(pipeline, Pipeline) else pipeline
    _require(name in _PIPELINES, f"unknown builtin pipeline {name!r}")
    _require(model_scale in MODEL_SCALES, f"unknown model scale {model_scale!r}")
    entry = _PIPELINES[name]

    staged: list[tuple[StageKind, float]] = [(StageKind.PRERUN, PRERUN_KWH),
                                             (StageKind.DATA_PREPROCESS, PREPROCESS_KWH)]
    if entry["teacher_stage"] is not None:
        staged.append((entry["teacher_stage"], entry["teacher_kwh"]))
    staged.append((StageKind.STUDENT_TRAINING, entry["training_kwh"][model_scale]))
    staged.append((StageKind.EVALUATION, _EVAL_KWH[model_scale]))

    countable = staged[1:]  # prerun produces no tokens
    counted_kwh = sum(kwh for _, kwh in countable)
    total_tokens = round(counted_kwh * KWH_TO_JOULES / entry["j_per_token"][model_scale])
    tokens = _apportion(total_tokens, [kwh for _, kwh in countable])

    stages = [StageProfile(kind=StageKind.PRERUN, target_kwh=PRERUN_KWH)]
    stages.extend(
        StageProfile(kind=kind, target_kwh=kwh, tokens=n)
        for (kind, kwh), n in zip(countable, tokens))
    return PipelineProfile(
        pipeline=Pipeline(name),
        model_scale=model_scale,
        stages=tuple(stages),
        time_scale=time_scale,
        dataset="synthetic",
    )


def builtin_profiles(time_scale: float = DEFAULT_TIME_SCALE) -> list[PipelineProfile]:
    """All nine reference profiles."""
    return [builtin_profile(name, scale, time_scale)
            for name in _PIPELINES for scale in MODEL_SCALES]


def _sleep_until(wall_ms: int) -> None:
    delay = wall_ms / 1000.0 - time.time()
    if delay > 0:
        time.sleep(delay)


@dataclass(frozen=True)
class _PlannedStage:
    profile: StageProfile
    duration_ms: int
    power_w: float  # adjusted so power * planned duration == target exactly


def _plan(profile: PipelineProfile, interval_ms: int) -> list[_PlannedStage]:
    if not profile.stages:
        raise SimulationError("profile has no stages; nothing to simulate")
    planned = []
    for stage in profile.stages:
        duration_ms = round(stage.duration_s * profile.time_scale * 1000.0)
        if duration_ms < 4 * interval_ms:
            raise SimulationError(
                f"stage {stage.kind} compresses to {duration_ms} ms, below 4 sampling "
                f"intervals ({4 * interval_ms} ms); raise time_scale or lower the interval")
        target_joules = stage.target_kwh * KWH_TO_JOULES
        power = target_joules * profile.time_scale / (duration_ms / 1000.0)
        planned.append(_PlannedStage(profile=stage, duration_ms=duration_ms, power_w=power))
    return planned


def run_pipeline_sim(profile: PipelineProfile, out_dir: str | Path, *,
                     endpoint: str | None = None,
                     sampling_interval_ms: int = DEFAULT_SIM_INTERVAL_MS,
                     seed: int = 0, run_id: str | None = None,
                     counter_chunks: int = 10,
                     lead_intervals: int = 5) -> Path:
    """Execute one profile against a live collector; returns the run directory.

    Same (profile, seed, run_id) yields a byte-identical report: boundaries,
    powers, and token chunking are all planned deterministically, and the
    sampler evaluates the waveform on an absolute time grid.
    """
    planned = _plan(profile, sampling_interval_ms)
    interval = sampling_interval_ms

    tmp_root: str | None = None
    if endpoint is None:
        # Unix socket paths are length-limited; stay out of deep out_dir trees.
        tmp_root = tempfile.mkdtemp(prefix="wl-")
        endpoint = os.path.join(tmp_root, "ctl.sock")

    rid = run_id or f"{profile.pipeline}-{profile.model_scale}-s{seed}"
    # Align the run start to the sampling grid: every stage boundary then sits
    # at a fixed offset from the surrounding samples, run after run.
    t0 = ((now_ms() + lead_intervals * interval) // interval + 1) * interval

    spec = WaveformSpec(segments=tuple(
        WaveformSegment(duration_s=p.duration_ms / 1000.0, base_power=p.power_w)
        for p in planned))
    source = SimulatedSource(spec, seed=seed, anchor_ms=t0)

    manifest = RunManifest(
        run_id=rid,
        pipeline=profile.pipeline,
        model_scale=profile.model_scale,
        dataset=profile.dataset,
        code_version=detect_code_version(),
        hardware={**environment_descriptor(),
                  "power_source": "simulated", "device": source.device_id},
        sampling_interval=interval,
        created_at=now_ms(),
        time_scale=profile.time_scale,
    )
    config = CollectorConfig(
        control_endpoint=endpoint,
        output_dir=str(out_dir),
        sampling_interval=interval,
        clock_authority="sender",
    )

    collector = Collector(config, source, manifest)
    collector.start()
    try:
        conn = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            conn.connect(endpoint)
            t = t0
            for p in planned:
                start, end = t, t + p.duration_ms
                _sleep_until(start)
                conn.sendall(encode_marker_line(
                    MarkerEvent(event="stage_start", stage=p.profile.kind, ts=start)).encode())
                if p.profile.tokens:
                    base, extra = divmod(p.profile.tokens, counter_chunks)
                    for i in range(counter_chunks):
                        tick = start + (i + 1) * p.duration_ms // (counter_chunks + 1)
                        _sleep_until(tick)
                        conn.sendall(encode_marker_line(MarkerEvent(
                            event="counter", name="tokens",
                            value=base + (1 if i < extra else 0))).encode())
                _sleep_until(end)
                conn.sendall(encode_marker_line(
                    MarkerEvent(event="stage_end", stage=p.profile.kind, ts=end)).encode())
                t = end
            # Let the sampler pass the final boundary before shutting down.
            _sleep_until(t + 2 * interval)
        finally:
            conn.close()
    finally:
        collector.stop()
        if tmp_root is not None:
            shutil.rmtree(tmp_root, ignore_errors=True)
    return Path(out_dir)
