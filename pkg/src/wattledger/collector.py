"""Marker wire protocol and the sampling collector service.

Wire protocol: newline-delimited JSON objects over a unix domain socket.
Three event kinds:

    {"event":"stage_start","stage":"<kind>","ts":<ms>?}
    {"event":"stage_end","stage":"<kind>","ts":<ms>?}
    {"event":"counter","name":"<counter>","value":<int>,"ts":<ms>?}

``ts`` is only honored under sender clock authority; unknown fields are
ignored. The collector runs three threads — sampler, socket listener, and a
single writer consuming one FIFO queue — so trace lines and marker effects are
serialized without locks around the output files.
"""

from __future__ import annotations

import json
import queue
import selectors
import socket
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import EndpointError, MarkerParseError, SourceRangeError, ValidationError
from .model import PowerSample, RunManifest, StageKind, StageSpan, _require
from .sources import CpuEstimatorConfig, CpuEstimatorSource, PowerSource
from .storage import (
    DIAGNOSTICS_FILE,
    MANIFEST_FILE,
    SPANS_FILE,
    TRACE_FILE,
    encode_sample_line,
    now_ms,
    write_json,
    write_manifest,
    write_spans,
)

ENDPOINT_ENV_VAR = "WATTLEDGER_ENDPOINT"

MIN_SAMPLING_INTERVAL_MS = 10
MAX_SAMPLING_INTERVAL_MS = 60000

_EVENT_KINDS = ("stage_start", "stage_end", "counter")
_AUTHORITIES = ("collector", "sender")


@dataclass(frozen=True)
class MarkerEvent:
    """One parsed marker from the wire."""

    event: str
    stage: StageKind | None = None
    name: str | None = None
    value: int | None = None
    ts: int | None = None


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def parse_marker_line(line: str) -> MarkerEvent:
    """Parse one wire line; raises MarkerParseError with a diagnostic message."""
    line = line.strip()
    if not line:
        raise MarkerParseError("empty marker line")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MarkerParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MarkerParseError("marker must be a JSON object")
    event = obj.get("event")
    if event not in _EVENT_KINDS:
        raise MarkerParseError(f"unknown event kind {event!r}")
    ts = obj.get("ts")
    if ts is not None and not _is_int(ts):
        raise MarkerParseError(f"ts must be an integer millisecond count, got {ts!r}")
    if event in ("stage_start", "stage_end"):
        stage = obj.get("stage")
        if not isinstance(stage, str):
            raise MarkerParseError(f"{event} requires a 'stage' name")
        try:
            kind = StageKind(stage)
        except ValidationError as exc:
            raise MarkerParseError(str(exc)) from exc
        return MarkerEvent(event=event, stage=kind, ts=ts)
    name = obj.get("name")
    value = obj.get("value")
    if not isinstance(name, str) or not name:
        raise MarkerParseError("counter requires a non-empty 'name'")
    if not _is_int(value) or value < 0:
        raise MarkerParseError(f"counter value must be a non-negative integer, got {value!r}")
    return MarkerEvent(event="counter", name=name, value=value, ts=ts)


def encode_marker_line(event: MarkerEvent) -> str:
    """Canonical wire encoding: compact JSON, fixed key order, one line."""
    obj: dict[str, Any] = {"event": event.event}
    if event.stage is not None:
        obj["stage"] = event.stage.name
    if event.name is not None:
        obj["name"] = event.name
    if event.value is not None:
        obj["value"] = event.value
    if event.ts is not None:
        obj["ts"] = event.ts
    return json.dumps(obj, separators=(",", ":")) + "\n"


class SpanBuilder:
    """Folds a marker stream into disjoint StageSpans.

    Invalid events are rejected with a human-readable diagnostic and never
    corrupt already-built spans; the output is disjoint regardless of input.
    Counters arriving outside any stage accumulate in ``unattributed``.
    """

    def __init__(self, clock_authority: str = "collector"):
        _require(clock_authority in _AUTHORITIES,
                 f"unknown clock_authority {clock_authority!r}")
        self.authority = clock_authority
        self.diagnostics: list[str] = []
        self.unattributed: dict[str, int] = {}
        self._open: dict[str, Any] | None = None
        self._last_stamp = -1  # collector authority: last issued ms, for bumping
        self._last_end: int | None = None
        self._built: list[tuple[StageSpan, bool]] = []  # (span, force_closed)

    def _stamp(self, receipt_ms: int) -> int:
        # Two markers in the same millisecond must still give start < end.
        stamp = max(receipt_ms, self._last_stamp + 1)
        self._last_stamp = stamp
        return stamp

    def feed(self, event: MarkerEvent, receipt_ms: int) -> None:
        if event.event == "counter":
            self._feed_counter(event)
        elif event.event == "stage_start":
            self._feed_start(event, receipt_ms)
        else:
            self._feed_end(event, receipt_ms)

    def _feed_counter(self, event: MarkerEvent) -> None:
        if self._open is not None:
            counters = self._open["counters"]
            counters[event.name] = counters.get(event.name, 0) + event.value
        else:
            self.unattributed[event.name] = self.unattributed.get(event.name, 0) + event.value

    def _feed_start(self, event: MarkerEvent, receipt_ms: int) -> None:
        if self._open is not None:
            self.diagnostics.append(
                f"stage_start '{event.stage}' while '{self._open['kind']}' is open; event rejected")
            return
        if self.authority == "sender":
            if event.ts is None:
                self.diagnostics.append(
                    f"stage_start '{event.stage}' missing ts under sender clock authority; event rejected")
                return
            start = event.ts
            if self._last_end is not None and start < self._last_end:
                self.diagnostics.append(
                    f"stage_start '{event.stage}' at {start} overlaps previous span "
                    f"ending {self._last_end}; event rejected")
                return
        else:
            start = self._stamp(receipt_ms)
        self._open = {"kind": event.stage, "start": start, "counters": {}}

    def _feed_end(self, event: MarkerEvent, receipt_ms: int) -> None:
        if self._open is None:
            self.diagnostics.append(
                f"stage_end '{event.stage}' with no open stage; event rejected")
            return
        if event.stage != self._open["kind"]:
            self.diagnostics.append(
                f"stage_end '{event.stage}' does not match open stage "
                f"'{self._open['kind']}'; event rejected")
            return
        if self.authority == "sender":
            if event.ts is None:
                self.diagnostics.append(
                    f"stage_end '{event.stage}' missing ts under sender clock authority; event rejected")
                return
            end = event.ts
            if end <= self._open["start"]:
                self.diagnostics.append(
                    f"stage_end '{event.stage}' at {end} not after start "
                    f"{self._open['start']}; span rejected")
                self._open = None
                return
        else:
            end = self._stamp(receipt_ms)
        self._close_open(end, force=False)

    def _close_open(self, end: int, *, force: bool) -> None:
        assert self._open is not None
        span = StageSpan(kind=self._open["kind"], start=self._open["start"],
                         end=end, counters=self._open["counters"])
        self._built.append((span, force))
        self._last_end = end
        self._open = None

    def close(self, shutdown_ms: int) -> None:
        """Force-close any stage still open at collector shutdown."""
        if self._open is None:
            return
        if self.authority == "collector":
            end = self._stamp(shutdown_ms)
        else:
            end = shutdown_ms
        end = max(end, self._open["start"] + 1)
        self.diagnostics.append(
            f"stage '{self._open['kind']}' still open at shutdown; force-closed at {end}")
        self._close_open(end, force=True)

    def spans(self) -> list[StageSpan]:
        return [span for span, _ in self._built]

    def span_dicts(self) -> list[dict[str, Any]]:
        out = []
        for span, forced in self._built:
            d = span.to_dict()
            if forced:
                d["force_closed"] = True
            out.append(d)
        return out

    def force_closed_kinds(self) -> list[str]:
        return [span.kind.name for span, forced in self._built if forced]


@dataclass(frozen=True)
class CollectorConfig:
    """Static configuration for one collector session."""

    control_endpoint: str
    output_dir: str
    sampling_interval: int = 500  # ms
    clock_authority: str = "collector"
    cpu_estimator: CpuEstimatorConfig | None = None

    def __post_init__(self) -> None:
        _require(MIN_SAMPLING_INTERVAL_MS <= self.sampling_interval <= MAX_SAMPLING_INTERVAL_MS,
                 f"sampling_interval must be within [{MIN_SAMPLING_INTERVAL_MS}, "
                 f"{MAX_SAMPLING_INTERVAL_MS}] ms, got {self.sampling_interval}")
        _require(self.clock_authority in _AUTHORITIES,
                 f"unknown clock_authority {self.clock_authority!r}")
        # AF_UNIX paths have a hard ~107 byte kernel limit.
        _require(len(str(self.control_endpoint)) < 100,
                 f"control endpoint path too long for a unix socket: {self.control_endpoint}")
        object.__setattr__(self, "control_endpoint", str(self.control_endpoint))
        object.__setattr__(self, "output_dir", str(self.output_dir))


@dataclass
class CollectorResult:
    """Summary of one collector session after stop()."""

    run_dir: Path
    spans: list[StageSpan]
    force_closed: list[str]
    diagnostics: list[str]
    unattributed_counters: dict[str, int]
    partial: bool
    samples_written: int


class Collector:
    """Samples one power source and folds marker streams into spans.

    start() binds the endpoint, writes the manifest, and launches the sampler,
    listener, and writer threads. stop() is idempotent and finalizes
    spans.json and diagnostics.json.
    """

    def __init__(self, config: CollectorConfig, source: PowerSource, manifest: RunManifest):
        self.config = config
        self.source = source
        self.manifest = manifest
        self.run_dir = Path(config.output_dir)
        self._cpu_source = (CpuEstimatorSource(config.cpu_estimator)
                            if config.cpu_estimator else None)
        self._queue: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._builder = SpanBuilder(config.clock_authority)
        self._diagnostics: list[str] = []
        self._partial = False
        self._samples_written = 0
        self._out_of_order = 0
        self._trace_fp = None
        self._server: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._started = False
        self._result: CollectorResult | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        _require(not self._started, "collector already started")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(self.run_dir / MANIFEST_FILE, self.manifest)

        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            server.bind(self.config.control_endpoint)
        except OSError as exc:
            server.close()
            raise EndpointError(
                f"cannot bind control endpoint {self.config.control_endpoint}: {exc}") from exc
        server.listen(8)
        server.setblocking(False)
        self._server = server

        self._trace_fp = open(self.run_dir / TRACE_FILE, "a", encoding="utf-8")
        self._started = True

        for name, target in (("writer", self._write_loop),
                             ("listener", self._listen_loop),
                             ("sampler", self._sample_loop)):
            t = threading.Thread(target=target, name=f"wattledger-{name}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> CollectorResult:
        _require(self._started, "collector was never started")
        if self._result is not None:
            return self._result
        self._stop.set()
        for t in self._threads:
            if t.name != "wattledger-writer":
                t.join()
        self._queue.put(None)
        for t in self._threads:
            if t.name == "wattledger-writer":
                t.join()

        self._server.close()
        Path(self.config.control_endpoint).unlink(missing_ok=True)

        self._builder.close(now_ms())
        if self._trace_fp is not None:
            self._trace_fp.close()
            self._trace_fp = None

        write_spans(self.run_dir / SPANS_FILE, self._builder.span_dicts())
        diagnostics = self._builder.diagnostics + self._diagnostics
        if self._out_of_order:
            diagnostics.append(f"dropped {self._out_of_order} out-of-order samples")
        write_json(self.run_dir / DIAGNOSTICS_FILE, {
            "diagnostics": diagnostics,
            "unattributed_counters": self._builder.unattributed,
            "force_closed": self._builder.force_closed_kinds(),
            "partial": self._partial,
        })
        self._result = CollectorResult(
            run_dir=self.run_dir,
            spans=self._builder.spans(),
            force_closed=self._builder.force_closed_kinds(),
            diagnostics=diagnostics,
            unattributed_counters=dict(self._builder.unattributed),
            partial=self._partial,
            samples_written=self._samples_written,
        )
        return self._result

    # -- sampler -----------------------------------------------------------

    def _read_into_queue(self, at_ms: int, source: PowerSource) -> bool:
        """Read one source and enqueue the sample. False halts that source."""
        try:
            power = source.read(at_ms)
        except SourceRangeError:
            return True  # outside a replay window: skip the tick, keep going
        except Exception as exc:
            self._queue.put(("diag", f"power source failure on {source.device_id}: {exc}"))
            self._queue.put(("partial",))
            return False
        self._queue.put(("sample", PowerSample(
            timestamp=at_ms, device_id=source.device_id,
            source=source.source, power=power)))
        return True

    def _sample_loop(self) -> None:
        interval = self.config.sampling_interval
        grid_mode = getattr(self.source, "functional", False)
        # Absolute grid: multiples of the interval in epoch ms. Functional
        # sources are evaluated exactly at grid timestamps (late wake-ups
        # catch up without losing points); physical sensors are read at the
        # actual wake-up time, which is recorded as-is.
        next_ts = (now_ms() // interval + 1) * interval
        alive = True
        while alive:
            stopping = False
            delay = (next_ts - now_ms()) / 1000.0
            if delay > 0:
                stopping = self._stop.wait(delay)
            now = now_ms()
            if grid_mode:
                while next_ts <= now and alive:
                    alive = self._read_into_queue(next_ts, self.source)
                    if alive and self._cpu_source is not None:
                        alive = self._read_into_queue(now_ms(), self._cpu_source)
                    next_ts += interval
            elif next_ts <= now:
                alive = self._read_into_queue(now, self.source)
                if alive and self._cpu_source is not None:
                    alive = self._read_into_queue(now, self._cpu_source)
                while next_ts <= now:
                    next_ts += interval
            if stopping or self._stop.is_set():
                break

    # -- listener ----------------------------------------------------------

    def _dispatch_line(self, raw: bytes) -> None:
        receipt = now_ms()
        try:
            event = parse_marker_line(raw.decode("utf-8"))
        except (MarkerParseError, UnicodeDecodeError) as exc:
            self._queue.put(("diag", f"rejected marker: {exc}"))
            return
        self._queue.put(("marker", event, receipt))

    def _drain_buffer(self, buf: bytearray) -> None:
        while True:
            idx = buf.find(b"\n")
            if idx < 0:
                return
            line = bytes(buf[:idx])
            del buf[:idx + 1]
            if line.strip():
                self._dispatch_line(line)

    def _listen_loop(self) -> None:
        sel = selectors.DefaultSelector()
        sel.register(self._server, selectors.EVENT_READ, "accept")
        buffers: dict[socket.socket, bytearray] = {}

        def finish(conn: socket.socket) -> None:
            leftover = buffers.pop(conn, bytearray())
            if leftover.strip():
                # Connection dropped mid-line; parse (and likely reject) the tail.
                self._dispatch_line(bytes(leftover))
            try:
                sel.unregister(conn)
            except (KeyError, ValueError):
                pass
            conn.close()

        while not self._stop.is_set():
            for key, _ in sel.select(timeout=0.05):
                if key.data == "accept":
                    try:
                        conn, _addr = self._server.accept()
                    except OSError:
                        continue
                    conn.setblocking(False)
                    sel.register(conn, selectors.EVENT_READ, "conn")
                    buffers[conn] = bytearray()
                    continue
                conn = key.fileobj
                try:
                    data = conn.recv(65536)
                except (BlockingIOError, InterruptedError):
                    continue
                except OSError:
                    data = b""
                if not data:
                    finish(conn)
                    continue
                buffers[conn] += data
                self._drain_buffer(buffers[conn])
        for conn in list(buffers):
            finish(conn)
        sel.close()

    # -- writer ------------------------------------------------------------

    def _write_loop(self) -> None:
        last_ts: dict[tuple[str, Any], int] = {}
        while True:
            item = self._queue.get()
            if item is None:
                return
            tag = item[0]
            if tag == "sample":
                sample: PowerSample = item[1]
                key = (sample.device_id, sample.source)
                if key in last_ts and sample.timestamp <= last_ts[key]:
                    self._out_of_order += 1
                    continue
                last_ts[key] = sample.timestamp
                if self._trace_fp is None:
                    continue  # a previous write failed; run already flagged partial
                try:
                    self._trace_fp.write(encode_sample_line(sample))
                    self._trace_fp.flush()
                    self._samples_written += 1
                except OSError as exc:
                    self._diagnostics.append(f"trace write failure: {exc}")
                    self._partial = True
                    try:
                        self._trace_fp.close()
                    except OSError:
                        pass
                    self._trace_fp = None
            elif tag == "marker":
                self._builder.feed(item[1], item[2])
            elif tag == "diag":
                self._diagnostics.append(item[1])
            elif tag == "partial":
                self._partial = True


def run_collector(config: CollectorConfig, source: PowerSource, manifest: RunManifest,
                  *, stop_event: threading.Event | None = None,
                  duration_s: float | None = None) -> CollectorResult:
    """Run a collector until stop_event fires or duration_s elapses."""
    _require(stop_event is not None or duration_s is not None,
             "run_collector needs a stop_event or a duration_s")
    collector = Collector(config, source, manifest)
    collector.start()
    try:
        if duration_s is not None:
            self_event = stop_event or threading.Event()
            self_event.wait(duration_s)
        else:
            stop_event.wait()
    finally:
        result = collector.stop()
    return result
