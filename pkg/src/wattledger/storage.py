"""Run-directory persistence: trace.jsonl, spans.json, manifest.json.

trace.jsonl is append-only, one PowerSample per line, so a crash can lose at
most the final partial line; readers drop that line and flag the trace as
truncated instead of failing.
"""

from __future__ import annotations

import json
import platform
import socket
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import IncompleteRunError, TraceFormatError, ValidationError
from .model import PowerSample, RunManifest, StageSpan

TRACE_FILE = "trace.jsonl"
SPANS_FILE = "spans.json"
MANIFEST_FILE = "manifest.json"
DIAGNOSTICS_FILE = "diagnostics.json"


def now_ms() -> int:
    return int(time.time() * 1000)


def encode_sample_line(sample: PowerSample) -> str:
    return json.dumps(sample.to_dict(), separators=(",", ":")) + "\n"


def read_samples(path: str | Path) -> tuple[list[PowerSample], bool]:
    """Parse a trace file; returns (samples, truncated).

    truncated is True when the final line was partial (interrupted write) and
    was dropped. Corruption anywhere else raises TraceFormatError.
    """
    raw = Path(path).read_text(encoding="utf-8")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    samples: list[PowerSample] = []
    for lineno, line in enumerate(lines, start=1):
        try:
            samples.append(PowerSample.from_dict(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as exc:
            if lineno == len(lines):
                return samples, True
            raise TraceFormatError(f"{path}:{lineno}: {exc}") from exc
    return samples, False


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_spans(path: str | Path, span_dicts: list[dict[str, Any]]) -> None:
    write_json(path, span_dicts)


def read_spans(path: str | Path) -> list[StageSpan]:
    data = read_json(path)
    if not isinstance(data, list):
        raise ValidationError(f"{path}: spans file must hold a JSON array")
    return [StageSpan.from_dict(d) for d in data]


def write_manifest(path: str | Path, manifest: RunManifest) -> None:
    write_json(path, manifest.to_dict())


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest.from_dict(read_json(path))


@dataclass
class RunData:
    """Everything persisted for one run."""

    manifest: RunManifest
    spans: list[StageSpan]
    samples: list[PowerSample]
    truncated_trace: bool


def load_run(run_dir: str | Path) -> RunData:
    """Load a completed run directory; missing files raise IncompleteRunError."""
    run_dir = Path(run_dir)
    paths = {name: run_dir / name for name in (MANIFEST_FILE, SPANS_FILE, TRACE_FILE)}
    missing = [name for name, p in paths.items() if not p.is_file()]
    if missing:
        raise IncompleteRunError(f"{run_dir}: missing {', '.join(sorted(missing))}")
    manifest = read_manifest(paths[MANIFEST_FILE])
    spans = read_spans(paths[SPANS_FILE])
    samples, truncated = read_samples(paths[TRACE_FILE])
    return RunData(manifest=manifest, spans=spans, samples=samples, truncated_trace=truncated)


def detect_code_version() -> str:
    """Short git commit of the working tree, or 'unknown' outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=2.0, check=False,
        )
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    return out.stdout.strip() or "unknown"


def environment_descriptor() -> dict[str, str]:
    """Host facts worth pinning in a manifest."""
    return {
        "host": socket.gethostname(),
        "platform": platform.platform(),
        "python": sys.version.split()[0],
    }
