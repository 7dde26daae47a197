import json

import pytest

from wattledger import Pipeline, PowerSample, RunManifest, Source, StageSpan
from wattledger.errors import IncompleteRunError, TraceFormatError
from wattledger.storage import (
    MANIFEST_FILE,
    SPANS_FILE,
    TRACE_FILE,
    detect_code_version,
    encode_sample_line,
    environment_descriptor,
    load_run,
    read_manifest,
    read_samples,
    read_spans,
    write_manifest,
    write_spans,
)


def _sample(ts, power=100.0):
    return PowerSample(timestamp=ts, device_id="gpu0", source=Source.GPU, power=power)


def _manifest():
    return RunManifest(run_id="r1", pipeline=Pipeline.KD, model_scale="1B",
                       dataset="synthetic", code_version="abc", hardware={},
                       sampling_interval=500, created_at=1_700_000_000_000)


class TestTraceFile:
    def test_encode_is_one_compact_line(self):
        line = encode_sample_line(_sample(1000))
        assert line.endswith("\n") and line.count("\n") == 1
        assert json.loads(line)["timestamp"] == 1000
        assert ": " not in line and ", " not in line

    def test_round_trip(self, tmp_path):
        path = tmp_path / TRACE_FILE
        samples = [_sample(t, 100.0 + t) for t in range(0, 2000, 500)]
        path.write_text("".join(map(encode_sample_line, samples)), encoding="utf-8")
        loaded, truncated = read_samples(path)
        assert loaded == samples
        assert truncated is False

    def test_partial_final_line_dropped(self, tmp_path):
        path = tmp_path / TRACE_FILE
        good = encode_sample_line(_sample(0)) + encode_sample_line(_sample(500))
        path.write_text(good + '{"timestamp":1000,"device', encoding="utf-8")
        loaded, truncated = read_samples(path)
        assert [s.timestamp for s in loaded] == [0, 500]
        assert truncated is True

    def test_every_possible_crash_point_recovers(self, tmp_path):
        """Cutting the file at any byte of the last line loses only that line."""
        lines = [encode_sample_line(_sample(t)) for t in (0, 500, 1000)]
        full = "".join(lines).encode("utf-8")
        tail_start = len("".join(lines[:2]).encode("utf-8"))
        path = tmp_path / TRACE_FILE
        for cut in range(tail_start, len(full)):  # excludes the intact file
            path.write_bytes(full[:cut])
            loaded, truncated = read_samples(path)
            if cut == len(full) - 1:
                # Only the terminator is missing; the record itself is whole.
                assert [s.timestamp for s in loaded] == [0, 500, 1000]
                assert truncated is False
            else:
                assert [s.timestamp for s in loaded] == [0, 500]
                assert truncated is (cut > tail_start)

    def test_mid_file_corruption_raises(self, tmp_path):
        path = tmp_path / TRACE_FILE
        path.write_text(encode_sample_line(_sample(0)) + "garbage\n"
                        + encode_sample_line(_sample(500)), encoding="utf-8")
        with pytest.raises(TraceFormatError):
            read_samples(path)

    def test_empty_file_is_valid(self, tmp_path):
        path = tmp_path / TRACE_FILE
        path.write_text("", encoding="utf-8")
        assert read_samples(path) == ([], False)


class TestSpansFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / SPANS_FILE
        spans = [StageSpan(kind="prerun", start=0, end=100),
                 StageSpan(kind="evaluation", start=100, end=300,
                           counters={"tokens": 5})]
        write_spans(path, [s.to_dict() for s in spans])
        assert read_spans(path) == spans

    def test_extra_keys_ignored_on_read(self, tmp_path):
        path = tmp_path / SPANS_FILE
        d = StageSpan(kind="prerun", start=0, end=100).to_dict()
        d["force_closed"] = True
        write_spans(path, [d])
        assert read_spans(path)[0].kind.name == "prerun"


class TestManifestFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / MANIFEST_FILE
        write_manifest(path, _manifest())
        assert read_manifest(path) == _manifest()


class TestLoadRun:
    def _write_run(self, run_dir):
        run_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(run_dir / MANIFEST_FILE, _manifest())
        write_spans(run_dir / SPANS_FILE,
                    [StageSpan(kind="prerun", start=0, end=1000).to_dict()])
        (run_dir / TRACE_FILE).write_text(
            encode_sample_line(_sample(0)) + encode_sample_line(_sample(500)),
            encoding="utf-8")

    def test_complete_run(self, tmp_path):
        self._write_run(tmp_path / "run")
        data = load_run(tmp_path / "run")
        assert data.manifest.run_id == "r1"
        assert len(data.spans) == 1 and len(data.samples) == 2
        assert data.truncated_trace is False

    @pytest.mark.parametrize("missing", [MANIFEST_FILE, SPANS_FILE, TRACE_FILE])
    def test_each_missing_file_is_reported(self, tmp_path, missing):
        self._write_run(tmp_path / "run")
        (tmp_path / "run" / missing).unlink()
        with pytest.raises(IncompleteRunError, match=missing):
            load_run(tmp_path / "run")


def test_environment_descriptor_fields():
    env = environment_descriptor()
    assert set(env) == {"host", "platform", "python"}
    assert all(isinstance(v, str) and v for v in env.values())


def test_detect_code_version_never_raises():
    assert isinstance(detect_code_version(), str)
    assert detect_code_version()
