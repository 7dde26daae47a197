import math

import pytest

from wattledger import (
    CarbonAssumptions,
    KWH_TO_JOULES,
    Pipeline,
    PowerSample,
    PowerTrace,
    RunManifest,
    Source,
    StageEnergyRecord,
    StageKind,
    StageSpan,
    ValidationError,
)
from wattledger.accounting import (
    UNATTRIBUTED,
    RunEnergyReport,
    derive_co2e,
    integrate_energy,
    run_report,
    stage_record,
)
from wattledger.errors import IncompleteRunError, IntegrationError
from wattledger.storage import (
    DIAGNOSTICS_FILE,
    MANIFEST_FILE,
    SPANS_FILE,
    TRACE_FILE,
    encode_sample_line,
    write_json,
    write_manifest,
    write_spans,
)


def _gpu(ts, power):
    return PowerSample(timestamp=ts, device_id="gpu0", source=Source.GPU, power=power)


def _cpu(ts, power):
    return PowerSample(timestamp=ts, device_id="cpu0", source=Source.CPU, power=power)


class TestIntegrateEnergy:
    def test_constant_power_exactly(self):
        # 100 W held for one hour is 360000 J (0.1 kWh) with no rounding.
        samples = [_gpu(0, 100.0), _gpu(3_600_000, 100.0)]
        span = StageSpan(kind="student_training", start=0, end=3_600_000)
        assert integrate_energy(samples, span) == 360_000.0

    def test_interpolated_boundary_hand_computed(self):
        # Span starts halfway up a 100->200 W ramp: boundary value is 150 W,
        # so the integral is 0.5*(150+200)*0.5s + 200*1s = 87.5 + 200 = 287.5 J.
        samples = [_gpu(0, 100.0), _gpu(1000, 200.0), _gpu(2000, 200.0)]
        span = StageSpan(kind="student_training", start=500, end=2000)
        assert integrate_energy(samples, span) == pytest.approx(287.5, rel=1e-12)

    def test_ramp_trapezoid_is_exact_for_linear_power(self):
        # Linear power is integrated exactly by the trapezoid rule.
        samples = [_gpu(t, 100.0 + t / 10.0) for t in range(0, 4001, 500)]
        span = StageSpan(kind="student_training", start=0, end=4000)
        # integral of (100 + t/10) W over 4 s (t in ms): 400 + 800 = 1200 J... computed:
        # mean power = (100 + 500)/2 = 300 W over 4 s = 1200 J
        assert integrate_energy(samples, span) == pytest.approx(1200.0, rel=1e-12)

    def test_partition_adds_up(self):
        samples = [_gpu(t, 200.0 + (t % 1500) / 7.0) for t in range(0, 10_001, 250)]
        whole = StageSpan(kind="student_training", start=0, end=10_000)
        parts = [StageSpan(kind="student_training", start=a, end=b)
                 for a, b in ((0, 3_100), (3_100, 5_000), (5_000, 10_000))]
        total = integrate_energy(samples, whole)
        split = sum(integrate_energy(samples, p) for p in parts)
        assert math.isclose(total, split, rel_tol=1e-12)

    def test_requires_two_samples_inside(self):
        samples = [_gpu(0, 100.0), _gpu(1000, 100.0), _gpu(2000, 100.0)]
        span = StageSpan(kind="prerun", start=1100, end=1900)
        with pytest.raises(IntegrationError) as exc_info:
            integrate_energy(samples, span)
        assert exc_info.value.overlapping_samples == 0

    def test_counts_overlapping_samples_in_error(self):
        samples = [_gpu(0, 100.0), _gpu(1000, 100.0), _gpu(2000, 100.0)]
        span = StageSpan(kind="prerun", start=900, end=1100)
        with pytest.raises(IntegrationError) as exc_info:
            integrate_energy(samples, span)
        assert exc_info.value.overlapping_samples == 1

    def test_never_extrapolates_outside_trace(self):
        # Span extends past the last sample: only the covered part integrates.
        samples = [_gpu(0, 100.0), _gpu(1000, 100.0)]
        span = StageSpan(kind="prerun", start=0, end=5000)
        assert integrate_energy(samples, span) == 100.0

    def test_rejects_mixed_streams(self):
        with pytest.raises(ValidationError):
            integrate_energy([_gpu(0, 1.0), _cpu(500, 1.0), _gpu(1000, 1.0)],
                             StageSpan(kind="prerun", start=0, end=1000))

    def test_accepts_power_trace_wrapper(self):
        trace = PowerTrace(samples=(_gpu(0, 50.0), _gpu(1000, 50.0)),
                           sampling_interval=1000)
        span = StageSpan(kind="prerun", start=0, end=1000)
        assert integrate_energy(trace, span) == 50.0


class TestStageRecord:
    def test_merges_gpu_and_cpu(self):
        gpu = [_gpu(0, 100.0), _gpu(1000, 100.0)]
        cpu = [_cpu(0, 30.0), _cpu(1000, 30.0)]
        span = StageSpan(kind="student_training", start=0, end=1000,
                         counters={"tokens": 500})
        rec = stage_record(gpu, span, cpu_trace=cpu, run_id="r")
        assert rec.energy_joules == 130.0
        assert rec.duration == 1.0
        assert rec.tokens == 500
        assert rec.flags == ()

    def test_missing_cpu_trace_flagged(self):
        gpu = [_gpu(0, 100.0), _gpu(1000, 100.0)]
        span = StageSpan(kind="student_training", start=0, end=1000)
        rec = stage_record(gpu, span, run_id="r")
        assert rec.energy_joules == 100.0
        assert rec.flags == ("cpu_trace_missing",)

    def test_time_scale_uncompresses(self):
        # A run compressed 1000x: measured joules and seconds scale back up.
        gpu = [_gpu(0, 100.0), _gpu(1000, 100.0)]
        span = StageSpan(kind="student_training", start=0, end=1000)
        rec = stage_record(gpu, span, run_id="r", time_scale=1e-3)
        assert rec.energy_joules == pytest.approx(100_000.0, rel=1e-12)
        assert rec.duration == pytest.approx(1000.0, rel=1e-12)


def test_derive_co2e_hand_computed():
    co2e = derive_co2e(10.0, CarbonAssumptions(pue=1.2, grid_intensity=0.4))
    assert math.isclose(co2e, 4.8, rel_tol=1e-12)


def _record(kind, kwh, tokens=0, duration=100.0, run_id="r"):
    return StageEnergyRecord(run_id=run_id, kind=kind,
                             energy_joules=kwh * KWH_TO_JOULES,
                             duration=duration, tokens=tokens)


class TestRunEnergyReport:
    def _report(self, **kw):
        return RunEnergyReport(
            run_id="r",
            records=(
                _record("prerun", 0.12),
                _record("teacher_logit_caching", 11.0, tokens=100),
                _record("student_training", 5.2, tokens=200),
                _record("evaluation", 0.33, tokens=50),
            ),
            **kw,
        )

    def test_totals_exclude_prerun(self):
        report = self._report()
        assert report.total_kwh == pytest.approx(16.53, rel=1e-12)
        assert report.total_kwh_including_prerun == pytest.approx(16.65, rel=1e-12)

    def test_unattributed_sits_outside_totals(self):
        report = self._report(unattributed=_record(UNATTRIBUTED, 1.0))
        assert report.total_kwh == pytest.approx(16.53, rel=1e-12)
        assert report.total_kwh_including_prerun == pytest.approx(16.65, rel=1e-12)

    def test_co2e_requires_assumptions(self):
        assert self._report().co2e_kg is None
        with_co2e = self._report(
            assumptions=CarbonAssumptions(pue=1.0, grid_intensity=1.0))
        assert with_co2e.co2e_kg == pytest.approx(16.53, rel=1e-12)

    def test_dict_round_trip(self):
        report = self._report(
            unattributed=_record(UNATTRIBUTED, 0.5),
            assumptions=CarbonAssumptions(pue=1.2, grid_intensity=0.4))
        again = RunEnergyReport.from_dict(report.to_dict())
        assert again == report

    def test_table_rounds_to_two_decimals(self):
        table = self._report().to_table()
        assert "total (excl. prerun)" in table and "16.53" in table
        assert "total (incl. prerun)" in table and "16.65" in table
        assert "student_training" in table

    def test_csv_keeps_full_precision(self):
        report = RunEnergyReport(
            run_id="r", records=(_record("student_training", 1.0 / 3.0, tokens=7),))
        csv_text = report.to_csv()
        header, row = csv_text.splitlines()
        assert header.startswith("run_id,stage,energy_joules")
        assert repr(1.0 / 3.0 * KWH_TO_JOULES) in row


def _write_run(run_dir, *, samples, spans, time_scale=1.0, diagnostics=None):
    run_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir / MANIFEST_FILE, RunManifest(
        run_id="acct", pipeline=Pipeline.KD, model_scale="1B", dataset="d",
        code_version="abc", hardware={}, sampling_interval=500,
        created_at=0, time_scale=time_scale))
    write_spans(run_dir / SPANS_FILE, [s.to_dict() for s in spans])
    (run_dir / TRACE_FILE).write_text("".join(map(encode_sample_line, samples)),
                                      encoding="utf-8")
    if diagnostics is not None:
        write_json(run_dir / DIAGNOSTICS_FILE, diagnostics)


class TestRunReport:
    def test_stages_gap_and_unattributed_tokens(self, tmp_path):
        samples = [_gpu(t, 100.0) for t in range(0, 10_001, 500)]
        spans = [
            StageSpan(kind="prerun", start=0, end=2000),
            StageSpan(kind="student_training", start=3000, end=7000,
                      counters={"tokens": 8000}),
        ]
        _write_run(tmp_path / "run", samples=samples, spans=spans,
                   diagnostics={"diagnostics": [], "partial": False,
                                "force_closed": [],
                                "unattributed_counters": {"tokens": 77}})
        report = run_report(tmp_path / "run")
        by_kind = {r.kind.name: r for r in report.records}
        assert by_kind["prerun"].energy_joules == pytest.approx(200.0, rel=1e-12)
        assert by_kind["student_training"].energy_joules == pytest.approx(400.0, rel=1e-12)
        assert by_kind["student_training"].tokens == 8000
        assert report.unattributed is not None
        assert report.unattributed.kind == UNATTRIBUTED
        assert report.unattributed.energy_joules == pytest.approx(100.0, rel=1e-12)
        assert report.unattributed.tokens == 77
        # gap energy is outside both totals
        assert report.total_kwh_including_prerun == pytest.approx(600.0 / KWH_TO_JOULES,
                                                                  rel=1e-12)

    def test_cpu_stream_merges_without_flag(self, tmp_path):
        samples = [s for t in range(0, 4001, 500)
                   for s in (_gpu(t, 100.0), _cpu(t, 30.0))]
        spans = [StageSpan(kind="student_training", start=0, end=4000)]
        _write_run(tmp_path / "run", samples=samples, spans=spans)
        (rec,) = run_report(tmp_path / "run").records
        assert rec.energy_joules == pytest.approx(520.0, rel=1e-12)
        assert rec.flags == ()

    def test_time_scale_applied_from_manifest(self, tmp_path):
        samples = [_gpu(t, 100.0) for t in range(0, 2001, 500)]
        spans = [StageSpan(kind="student_training", start=0, end=2000)]
        _write_run(tmp_path / "run", samples=samples, spans=spans, time_scale=1e-3)
        (rec,) = run_report(tmp_path / "run").records
        assert rec.energy_joules == pytest.approx(200_000.0, rel=1e-12)
        assert rec.duration == pytest.approx(2000.0, rel=1e-12)

    def test_unmeasured_gap_flagged(self, tmp_path):
        samples = [_gpu(t, 100.0) for t in range(0, 2001, 500)]
        spans = [
            StageSpan(kind="prerun", start=0, end=1000),
            StageSpan(kind="evaluation", start=1200, end=2000),
        ]
        _write_run(tmp_path / "run", samples=samples, spans=spans)
        report = run_report(tmp_path / "run")
        assert report.unattributed is not None
        assert report.unattributed.flags == ("gap_unmeasured",)
        assert report.unattributed.energy_joules == 0.0

    def test_overlapping_spans_rejected(self, tmp_path):
        samples = [_gpu(t, 100.0) for t in range(0, 2001, 500)]
        spans = [
            StageSpan(kind="prerun", start=0, end=1000),
            StageSpan(kind="evaluation", start=500, end=1500),
        ]
        _write_run(tmp_path / "run", samples=samples, spans=spans)
        with pytest.raises(ValidationError):
            run_report(tmp_path / "run")

    def test_multi_gpu_traces_rejected(self, tmp_path):
        samples = [_gpu(0, 1.0), _gpu(500, 1.0)]
        samples += [PowerSample(timestamp=t, device_id="gpu1", source=Source.GPU,
                                power=1.0) for t in (0, 500)]
        _write_run(tmp_path / "run", samples=samples,
                   spans=[StageSpan(kind="prerun", start=0, end=500)])
        with pytest.raises(ValidationError):
            run_report(tmp_path / "run")

    def test_missing_files_raise_incomplete(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(IncompleteRunError):
            run_report(tmp_path / "empty")
