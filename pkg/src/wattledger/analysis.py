"""Energy/quality analysis: score ratios, Pareto frontiers, break-even math."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .errors import ValidationError
from .model import EnergyQualityPoint, KWH_TO_JOULES, _require


@dataclass(frozen=True)
class BenchmarkScores:
    """Per-benchmark scores for a student model and its teacher reference."""

    student: Mapping[str, float]
    teacher: Mapping[str, float]

    def __post_init__(self) -> None:
        student = dict(self.student)
        teacher = dict(self.teacher)
        _require(len(student) > 0, "benchmark set must be non-empty")
        _require(set(student) == set(teacher),
                 f"student/teacher benchmark sets differ: "
                 f"{sorted(set(student) ^ set(teacher))}")
        for name, value in teacher.items():
            _require(value > 0, f"teacher score for {name!r} must be > 0")
        for name, value in student.items():
            _require(value >= 0, f"student score for {name!r} must be >= 0")
        object.__setattr__(self, "student", student)
        object.__setattr__(self, "teacher", teacher)

    def to_dict(self) -> dict[str, Any]:
        return {"student": dict(self.student), "teacher": dict(self.teacher)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BenchmarkScores":
        try:
            return cls(student=data["student"], teacher=data["teacher"])
        except KeyError as exc:
            raise ValidationError(f"bad benchmark scores: missing {exc}") from exc


def quality_score(scores: BenchmarkScores) -> float:
    """Mean over benchmarks of student/teacher score ratios.

    1.0 means teacher parity on average; permutation of the benchmark set
    never changes the result.
    """
    ratios = [scores.student[b] / scores.teacher[b] for b in sorted(scores.student)]
    return sum(ratios) / len(ratios)


def dominates(p: EnergyQualityPoint, q: EnergyQualityPoint) -> bool:
    """p dominates q iff p is no worse on both axes and better on one."""
    return (p.total_energy_kwh <= q.total_energy_kwh and p.quality >= q.quality
            and (p.total_energy_kwh < q.total_energy_kwh or p.quality > q.quality))


def pareto_frontier(points: Sequence[EnergyQualityPoint]) -> list[EnergyQualityPoint]:
    """Non-dominated subset, sorted by (energy, quality, label).

    Duplicate (energy, quality) pairs are all kept (neither dominates the
    other). Idempotent: frontier(frontier(ps)) == frontier(ps).
    """
    _require(len(points) >= 1, "pareto_frontier needs at least one point")
    ordered = sorted(points, key=lambda p: (p.total_energy_kwh, -p.quality, p.label))
    kept: list[EnergyQualityPoint] = []
    best_quality = -math.inf
    best_energy = math.inf
    for p in ordered:
        if p.quality > best_quality:
            kept.append(p)
            best_quality = p.quality
            best_energy = p.total_energy_kwh
        elif p.quality == best_quality and p.total_energy_kwh == best_energy:
            kept.append(p)  # exact tie: mutually non-dominating
    return sorted(kept, key=lambda p: (p.total_energy_kwh, p.quality, p.label))


def energy_ratio(a: EnergyQualityPoint | float, b: EnergyQualityPoint | float) -> float:
    """How many times more energy a took than b."""
    num = a.total_energy_kwh if isinstance(a, EnergyQualityPoint) else float(a)
    den = b.total_energy_kwh if isinstance(b, EnergyQualityPoint) else float(b)
    _require(den > 0, "ratio denominator must be > 0")
    _require(num >= 0, "ratio numerator must be >= 0")
    return num / den


@dataclass(frozen=True)
class AmortizationModel:
    """One-time teacher cost amortized against per-run training costs (kWh).

    teacher_kwh is paid once (logit caching or corpus generation); distill_kwh
    and baseline_kwh are the per-run student training costs with and without
    the teacher artifact; per_run_overhead_kwh covers shared stages present in
    every run regardless of pipeline.
    """

    teacher_kwh: float
    distill_kwh: float
    baseline_kwh: float
    per_run_overhead_kwh: float = 0.0

    def __post_init__(self) -> None:
        for name in ("teacher_kwh", "distill_kwh", "baseline_kwh", "per_run_overhead_kwh"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "teacher_kwh": self.teacher_kwh,
            "distill_kwh": self.distill_kwh,
            "baseline_kwh": self.baseline_kwh,
            "per_run_overhead_kwh": self.per_run_overhead_kwh,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AmortizationModel":
        try:
            return cls(
                teacher_kwh=data["teacher_kwh"],
                distill_kwh=data["distill_kwh"],
                baseline_kwh=data["baseline_kwh"],
                per_run_overhead_kwh=data.get("per_run_overhead_kwh", 0.0),
            )
        except KeyError as exc:
            raise ValidationError(f"bad amortization model: missing {exc}") from exc


def amortized_energy(model: AmortizationModel, n_runs: int) -> float:
    """Per-run kWh when the one-time teacher cost is spread over n_runs."""
    _require(isinstance(n_runs, int) and n_runs >= 1, "n_runs must be an integer >= 1")
    return model.teacher_kwh / n_runs + model.distill_kwh + model.per_run_overhead_kwh


@dataclass(frozen=True)
class BreakEvenResult:
    """Reuse count where distillation matches the baseline, if it exists."""

    n_star: float | None
    threshold_runs: int | None  # first integer run count at/after n_star

    @property
    def breaks_even(self) -> bool:
        return self.n_star is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "breaks_even": self.breaks_even,
            "n_star": self.n_star,
            "threshold_runs": self.threshold_runs,
        }


def break_even_reuse(model: AmortizationModel) -> BreakEvenResult:
    """Solve teacher/N + distill = baseline for N.

    No solution (distill per-run cost >= baseline per-run cost) returns an
    empty result rather than raising: "never breaks even" is an answer.
    """
    saved_per_run = model.baseline_kwh - model.distill_kwh
    if saved_per_run <= 0:
        return BreakEvenResult(n_star=None, threshold_runs=None)
    n_star = model.teacher_kwh / saved_per_run
    # The division can land epsilon above an exact integer (e.g. 11/(6.3-5.2));
    # don't let that push the integer threshold up a whole run.
    threshold = max(1, math.ceil(n_star * (1.0 - 1e-12)))
    return BreakEvenResult(n_star=n_star, threshold_runs=threshold)


@dataclass(frozen=True)
class InferenceTradeModel:
    """Extra training spend traded against cheaper inference (J/token)."""

    extra_training_kwh: float
    j_per_token_student: float
    j_per_token_reference: float

    def __post_init__(self) -> None:
        _require(self.extra_training_kwh >= 0, "extra_training_kwh must be >= 0")
        _require(self.j_per_token_student > 0, "j_per_token_student must be > 0")
        _require(self.j_per_token_reference > 0, "j_per_token_reference must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "extra_training_kwh": self.extra_training_kwh,
            "j_per_token_student": self.j_per_token_student,
            "j_per_token_reference": self.j_per_token_reference,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InferenceTradeModel":
        try:
            return cls(
                extra_training_kwh=data["extra_training_kwh"],
                j_per_token_student=data["j_per_token_student"],
                j_per_token_reference=data["j_per_token_reference"],
            )
        except KeyError as exc:
            raise ValidationError(f"bad inference trade model: missing {exc}") from exc


@dataclass(frozen=True)
class TokenBreakEven:
    """Inference tokens needed to pay back extra training energy, if ever."""

    t_star_tokens: float | None

    @property
    def breaks_even(self) -> bool:
        return self.t_star_tokens is not None

    def to_dict(self) -> dict[str, Any]:
        return {"breaks_even": self.breaks_even, "t_star_tokens": self.t_star_tokens}


def inference_break_even(model: InferenceTradeModel) -> TokenBreakEven:
    """Tokens T* where extra training joules equal inference joules saved."""
    saved_per_token = model.j_per_token_reference - model.j_per_token_student
    if saved_per_token <= 0:
        return TokenBreakEven(t_star_tokens=None)
    return TokenBreakEven(
        t_star_tokens=model.extra_training_kwh * KWH_TO_JOULES / saved_per_token)
