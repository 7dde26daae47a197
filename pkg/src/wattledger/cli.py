"""wattledger command line.

Exit codes: 0 success, 1 data error, 2 partial results (or an endpoint
collision), 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import Any

from . import __version__
from .accounting import run_report
from .analysis import (
    AmortizationModel,
    BenchmarkScores,
    InferenceTradeModel,
    amortized_energy,
    break_even_reuse,
    inference_break_even,
    pareto_frontier,
    quality_score,
)
from .collector import ENDPOINT_ENV_VAR, Collector, CollectorConfig
from .errors import EndpointError, WattLedgerError
from .model import CarbonAssumptions, EnergyQualityPoint, Pipeline, RunManifest, Source
from .sim import (
    DEFAULT_SIM_INTERVAL_MS,
    DEFAULT_TIME_SCALE,
    PipelineProfile,
    builtin_profile,
    builtin_profiles,
    run_pipeline_sim,
)
from .sources import (
    CpuEstimatorConfig,
    NativeGpuSource,
    ReplaySource,
    SimulatedSource,
    WaveformSpec,
)
from .storage import (
    DIAGNOSTICS_FILE,
    detect_code_version,
    environment_descriptor,
    now_ms,
    read_json,
)

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    """argparse parser that exits 64 on usage errors."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _usage_error(message: str) -> int:
    print(f"wattledger: error: {message}", file=sys.stderr)
    return EXIT_USAGE


# -- output rendering --------------------------------------------------------

def _fmt_value(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def _csv_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _kv_table(payload: dict[str, Any]) -> str:
    width = max(len(k) for k in payload)
    return "\n".join(f"{k:<{width}}  {_fmt_value(v)}" for k, v in payload.items()) + "\n"


def _rows_csv(rows: list[dict[str, Any]], fields: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({f: _csv_value(row.get(f)) for f in fields})
    return buf.getvalue()


def _rows_table(rows: list[dict[str, Any]], fields: list[str]) -> str:
    cells = [[_fmt_value(row.get(f)) for f in fields] for row in rows]
    widths = [max(len(f), *(len(row[i]) for row in cells)) if cells else len(f)
              for i, f in enumerate(fields)]
    lines = ["  ".join(f"{f:<{w}}" for f, w in zip(fields, widths))]
    lines.extend("  ".join(f"{c:<{w}}" for c, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def _write_out(args: argparse.Namespace, text: str) -> None:
    out = getattr(args, "out", None)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit(args: argparse.Namespace, payload: Any, *,
          rows: list[dict[str, Any]] | None = None,
          fields: list[str] | None = None,
          table: str | None = None,
          csv_text: str | None = None) -> None:
    """Render payload as json/csv/table per --format and write it."""
    fmt = getattr(args, "format", "table")
    if fmt == "json":
        text = json.dumps(payload, indent=2) + "\n"
    elif fmt == "csv":
        if csv_text is None:
            if rows is None:
                rows, fields = [payload], list(payload.keys())
            csv_text = _rows_csv(rows, fields or sorted(rows[0]))
        text = csv_text
    else:
        if table is None:
            table = (_rows_table(rows, fields or sorted(rows[0]))
                     if rows is not None else _kv_table(payload))
        text = table
    _write_out(args, text)


# -- collect -----------------------------------------------------------------

def _build_collect_source(args: argparse.Namespace):
    if args.source == "sim":
        if not args.waveform:
            return None, _usage_error("--source sim requires --waveform")
        spec = WaveformSpec.from_dict(read_json(args.waveform))
        return SimulatedSource(spec, seed=args.seed, anchor_ms=now_ms()), None
    if args.source == "replay":
        if not args.trace:
            return None, _usage_error("--source replay requires --trace")
        return ReplaySource.from_file(
            args.trace, source=Source(args.replay_source), device_id=args.device,
            anchor_ms=now_ms()), None
    return NativeGpuSource(device_index=args.device_index), None


def cmd_collect(args: argparse.Namespace) -> int:
    endpoint = (args.endpoint or os.environ.get(ENDPOINT_ENV_VAR)
                or str(Path(args.out) / "control.sock"))
    source, usage_rc = _build_collect_source(args)
    if source is None:
        return usage_rc

    cpu = None
    if args.cpu_rated_watts is not None:
        if args.cpu_utilization == "sampled":
            cpu = CpuEstimatorConfig(rated_power=args.cpu_rated_watts,
                                     utilization_source="sampled")
        else:
            try:
                fraction = float(args.cpu_utilization)
            except ValueError:
                return _usage_error(
                    f"--cpu-utilization must be 'sampled' or a fraction, "
                    f"got {args.cpu_utilization!r}")
            cpu = CpuEstimatorConfig(rated_power=args.cpu_rated_watts,
                                     utilization_source="fixed",
                                     fixed_utilization=fraction)

    manifest = RunManifest(
        run_id=args.run_id or f"run-{now_ms()}",
        pipeline=Pipeline(args.pipeline),
        model_scale=args.model_scale,
        dataset=args.dataset,
        code_version=detect_code_version(),
        hardware={**environment_descriptor(), "power_source": args.source},
        sampling_interval=args.interval_ms,
        created_at=now_ms(),
    )
    config = CollectorConfig(
        control_endpoint=endpoint,
        output_dir=args.out,
        sampling_interval=args.interval_ms,
        clock_authority=args.clock_authority,
        cpu_estimator=cpu,
    )
    collector = Collector(config, source, manifest)
    try:
        collector.start()
    except EndpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL

    stop = threading.Event()
    previous = {sig: signal.signal(sig, lambda *_: stop.set())
                for sig in (signal.SIGINT, signal.SIGTERM)}
    print(f"collecting on {endpoint}; run directory {args.out}", file=sys.stderr, flush=True)
    try:
        stop.wait(args.duration_s)  # None waits until a signal
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
        result = collector.stop()
    print(f"wrote {result.samples_written} samples, {len(result.spans)} spans",
          file=sys.stderr)
    return EXIT_PARTIAL if result.partial else EXIT_OK


# -- sim-run -----------------------------------------------------------------

def _parse_builtin_name(text: str) -> tuple[str, str] | None:
    name, sep, scale = text.partition(":")
    if not sep or not name or not scale:
        return None
    return name, scale


def cmd_sim_run(args: argparse.Namespace) -> int:
    if args.builtin:
        parsed = _parse_builtin_name(args.builtin)
        if parsed is None:
            return _usage_error("--builtin takes pipeline:model_scale, e.g. kd:1B")
        try:
            profile = builtin_profile(
                parsed[0], parsed[1],
                args.time_scale if args.time_scale is not None else DEFAULT_TIME_SCALE)
        except WattLedgerError as exc:
            return _usage_error(str(exc))
    else:
        profile = PipelineProfile.from_dict(read_json(args.profile))
        if args.time_scale is not None:
            profile = replace(profile, time_scale=args.time_scale)

    run_dir = run_pipeline_sim(
        profile, args.out,
        endpoint=args.endpoint,
        sampling_interval_ms=args.interval_ms,
        seed=args.seed,
        run_id=args.run_id,
    )
    print(run_dir)
    return EXIT_OK


# -- report ------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    if (args.pue is None) != (args.grid_intensity is None):
        return _usage_error("--pue and --grid-intensity must be given together")
    assumptions = (CarbonAssumptions(pue=args.pue, grid_intensity=args.grid_intensity)
                   if args.pue is not None else None)
    report = run_report(args.run_dir, assumptions)
    _emit(args, report.to_dict(), table=report.to_table(), csv_text=report.to_csv())

    diag_path = Path(args.run_dir) / DIAGNOSTICS_FILE
    if diag_path.is_file() and read_json(diag_path).get("partial"):
        print("warning: run is flagged partial; totals may undercount", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# -- analysis commands ---------------------------------------------------------

_POINT_FIELDS = ["label", "pipeline", "model_scale", "total_energy_kwh", "quality"]


def cmd_frontier(args: argparse.Namespace) -> int:
    data = read_json(args.points)
    if isinstance(data, dict):
        data = data.get("points")
    if not isinstance(data, list):
        raise WattLedgerError(f"{args.points}: expected a JSON array of points "
                              "or an object with a 'points' array")
    points = [EnergyQualityPoint.from_dict(d) for d in data]
    frontier = pareto_frontier(points)
    rows = [p.to_dict() for p in frontier]
    _emit(args, rows, rows=rows, fields=_POINT_FIELDS)
    return EXIT_OK


def cmd_quality(args: argparse.Namespace) -> int:
    scores = BenchmarkScores.from_dict(read_json(args.scores))
    payload = {"quality": quality_score(scores)}
    _emit(args, payload)
    return EXIT_OK


def cmd_breakeven(args: argparse.Namespace) -> int:
    model = AmortizationModel(
        teacher_kwh=args.teacher_kwh,
        distill_kwh=args.distill_kwh,
        baseline_kwh=args.baseline_kwh,
        per_run_overhead_kwh=args.per_run_overhead_kwh,
    )
    _emit(args, break_even_reuse(model).to_dict())
    return EXIT_OK


def cmd_amortize(args: argparse.Namespace) -> int:
    model = AmortizationModel(
        teacher_kwh=args.teacher_kwh,
        distill_kwh=args.distill_kwh,
        baseline_kwh=args.baseline_kwh,
        per_run_overhead_kwh=args.per_run_overhead_kwh,
    )
    if args.runs < 1:
        return _usage_error("--runs must be >= 1")
    if args.curve:
        rows = [{"runs": n, "amortized_kwh": amortized_energy(model, n)}
                for n in range(1, args.runs + 1)]
        _emit(args, rows, rows=rows, fields=["runs", "amortized_kwh"])
    else:
        _emit(args, {"runs": args.runs, "amortized_kwh": amortized_energy(model, args.runs)})
    return EXIT_OK


def cmd_tstar(args: argparse.Namespace) -> int:
    model = InferenceTradeModel(
        extra_training_kwh=args.extra_kwh,
        j_per_token_student=args.j_student,
        j_per_token_reference=args.j_reference,
    )
    _emit(args, inference_break_even(model).to_dict())
    return EXIT_OK


def cmd_profiles_dump(args: argparse.Namespace) -> int:
    if args.name:
        parsed = _parse_builtin_name(args.name)
        if parsed is None:
            return _usage_error("--name takes pipeline:model_scale, e.g. kd:1B")
        try:
            profiles = [builtin_profile(parsed[0], parsed[1], args.time_scale)]
        except WattLedgerError as exc:
            return _usage_error(str(exc))
    else:
        profiles = builtin_profiles(args.time_scale)
    rows = [
        {"pipeline": p.pipeline.name, "model_scale": p.model_scale,
         "time_scale": p.time_scale, "stage": s.kind.name,
         "target_kwh": s.target_kwh, "mean_power_w": s.mean_power_w,
         "tokens": s.tokens}
        for p in profiles for s in p.stages
    ]
    _emit(args, [p.to_dict() for p in profiles], rows=rows,
          fields=["pipeline", "model_scale", "time_scale", "stage",
                  "target_kwh", "mean_power_w", "tokens"])
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="wattledger",
                     description="Stage-aware energy accounting for training pipelines.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--format", choices=("json", "csv", "table"), default="table",
                     help="output format (default: table)")
    fmt.add_argument("--out", metavar="FILE", default=None,
                     help="write output to FILE instead of stdout")

    p = sub.add_parser("collect", help="run a collector service until interrupted")
    p.add_argument("--source", choices=("sim", "replay", "native"), required=True)
    p.add_argument("--waveform", metavar="FILE", help="waveform JSON for --source sim")
    p.add_argument("--seed", type=int, default=0, help="noise seed for --source sim")
    p.add_argument("--trace", metavar="FILE", help="trace to replay for --source replay")
    p.add_argument("--replay-source", choices=("gpu", "cpu"), default="gpu")
    p.add_argument("--device", default=None, help="device id filter for --source replay")
    p.add_argument("--device-index", type=int, default=0, help="GPU index for --source native")
    p.add_argument("--endpoint", default=None,
                   help=f"unix socket path (default: ${ENDPOINT_ENV_VAR} or OUT/control.sock)")
    p.add_argument("--out", required=True, metavar="DIR", help="run directory to write")
    p.add_argument("--interval-ms", type=int, default=500, help="sampling interval")
    p.add_argument("--clock-authority", choices=("collector", "sender"), default="collector")
    p.add_argument("--run-id", default=None)
    p.add_argument("--pipeline", default="adhoc")
    p.add_argument("--model-scale", default="unspecified")
    p.add_argument("--dataset", default="unspecified")
    p.add_argument("--cpu-rated-watts", type=float, default=None,
                   help="add a rated-power CPU estimator stream")
    p.add_argument("--cpu-utilization", default="1.0",
                   help="'sampled' or a fixed fraction in [0,1] (default 1.0)")
    p.add_argument("--duration-s", type=float, default=None,
                   help="stop after N seconds instead of waiting for a signal")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("sim-run", help="simulate a pipeline profile through a live collector")
    pick = p.add_mutually_exclusive_group(required=True)
    pick.add_argument("--builtin", metavar="PIPELINE:SCALE",
                      help="a builtin profile, e.g. kd:1B")
    pick.add_argument("--profile", metavar="FILE", help="pipeline profile JSON")
    p.add_argument("--out", required=True, metavar="DIR", help="run directory to write")
    p.add_argument("--time-scale", type=float, default=None,
                   help=f"wall-clock compression (default {DEFAULT_TIME_SCALE:g} for builtins)")
    p.add_argument("--interval-ms", type=int, default=DEFAULT_SIM_INTERVAL_MS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-id", default=None)
    p.add_argument("--endpoint", default=None)
    p.set_defaults(func=cmd_sim_run)

    p = sub.add_parser("report", parents=[fmt], help="energy report for a run directory")
    p.add_argument("run_dir", metavar="RUN_DIR")
    p.add_argument("--pue", type=float, default=None)
    p.add_argument("--grid-intensity", type=float, default=None,
                   help="kg CO2e per kWh")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("frontier", parents=[fmt],
                       help="Pareto frontier of energy/quality points")
    p.add_argument("points", metavar="POINTS_JSON")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("quality", parents=[fmt],
                       help="mean student/teacher score ratio")
    p.add_argument("scores", metavar="SCORES_JSON")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("breakeven", parents=[fmt],
                       help="reuse count where a distillation pipeline pays off")
    p.add_argument("--teacher-kwh", type=float, required=True)
    p.add_argument("--baseline-kwh", type=float, required=True)
    p.add_argument("--distill-kwh", type=float, required=True)
    p.add_argument("--per-run-overhead-kwh", type=float, default=0.0)
    p.set_defaults(func=cmd_breakeven)

    p = sub.add_parser("amortize", parents=[fmt],
                       help="per-run energy with the teacher cost amortized")
    p.add_argument("--teacher-kwh", type=float, required=True)
    p.add_argument("--distill-kwh", type=float, required=True)
    p.add_argument("--baseline-kwh", type=float, default=0.0)
    p.add_argument("--per-run-overhead-kwh", type=float, default=0.0)
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--curve", action="store_true", help="emit all run counts 1..RUNS")
    p.set_defaults(func=cmd_amortize)

    p = sub.add_parser("tstar", parents=[fmt],
                       help="inference tokens to pay back extra training energy")
    p.add_argument("--extra-kwh", type=float, required=True)
    p.add_argument("--j-student", type=float, required=True)
    p.add_argument("--j-reference", type=float, required=True)
    p.set_defaults(func=cmd_tstar)

    p = sub.add_parser("profiles-dump", parents=[fmt], help="dump builtin profiles")
    p.add_argument("--name", metavar="PIPELINE:SCALE", default=None)
    p.add_argument("--time-scale", type=float, default=DEFAULT_TIME_SCALE)
    p.set_defaults(func=cmd_profiles_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except WattLedgerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
