"""End-to-end: a ClientSession instruments one stage against a live collector.

The collector side is driven purely through its public CLI; results are
checked by reading the run-directory files it documents.
"""

import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from wattledger_client import ClientSession


@pytest.fixture
def waveform_file(tmp_path):
    path = tmp_path / "waveform.json"
    path.write_text(json.dumps({"segments": [
        {"duration_s": 60.0, "base_power": 100.0, "shape": "constant"}]}))
    return path


def _wait_for_socket(path: str, proc: subprocess.Popen, timeout: float = 10.0):
    deadline = time.monotonic() + timeout
    while not os.path.exists(path):
        if proc.poll() is not None:
            raise AssertionError(
                f"collector exited early: rc={proc.returncode}\n"
                f"{proc.stderr.read()}")
        if time.monotonic() > deadline:
            proc.kill()
            raise AssertionError("collector socket never appeared")
        time.sleep(0.02)


def test_live_session_records_stage_and_tokens(tmp_path, socket_path,
                                               waveform_file):
    out_dir = tmp_path / "run"
    proc = subprocess.Popen(
        [sys.executable, "-m", "wattledger", "collect",
         "--source", "sim", "--waveform", str(waveform_file),
         "--endpoint", socket_path, "--out", str(out_dir),
         "--interval-ms", "50", "--run-id", "live-client"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        _wait_for_socket(socket_path, proc)

        with ClientSession(socket_path, strict=True) as session:
            with session.stage("student_training"):
                time.sleep(0.35)  # let a handful of samples land in-stage
                session.add_tokens(8192)

        time.sleep(0.2)  # sampler passes the stage boundary before shutdown
        proc.send_signal(signal.SIGINT)
        rc = proc.wait(timeout=10)
        assert rc == 0, proc.stderr.read()
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()

    spans = json.loads((out_dir / "spans.json").read_text())
    assert len(spans) == 1
    (span,) = spans
    assert span["kind"] == "student_training"
    assert span["counters"] == {"tokens": 8192}
    assert span["end"] > span["start"]
    assert "force_closed" not in span

    trace_lines = (out_dir / "trace.jsonl").read_text().splitlines()
    assert trace_lines, "no power samples recorded"
    in_stage = [json.loads(line) for line in trace_lines
                if span["start"] <= json.loads(line)["timestamp"] <= span["end"]]
    assert len(in_stage) >= 2
    assert all(sample["power"] == 100.0 for sample in in_stage)

    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["run_id"] == "live-client"

    sidecar = json.loads((out_dir / "diagnostics.json").read_text())
    assert sidecar["diagnostics"] == []
    assert sidecar["partial"] is False
    assert sidecar["force_closed"] == []
