"""Marker wire format: newline-delimited JSON over a unix stream socket.

One JSON object per line, keys always emitted in the order event, stage, name,
value, ts, no whitespace. Three event kinds:

    {"event":"stage_start","stage":"<kind>","ts":<ms>}
    {"event":"stage_end","stage":"<kind>","ts":<ms>}
    {"event":"counter","name":"<counter>","value":<int>,"ts":<ms>}

``ts`` is epoch milliseconds and is optional: collectors that stamp receipt
times ignore it, collectors configured to trust the sender require it on
stage markers. Stage kinds are lowercase words joined by single underscores.
"""

from __future__ import annotations

import json
import re

__all__ = ["encode_marker", "valid_stage_kind"]

_STAGE_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")


def valid_stage_kind(kind: str) -> bool:
    return isinstance(kind, str) and _STAGE_RE.fullmatch(kind) is not None


def encode_marker(event: str, *, stage: str | None = None,
                  name: str | None = None, value: int | None = None,
                  ts: int | None = None) -> bytes:
    """Build one wire line. Raises ValueError on anything the collector would reject."""
    if event in ("stage_start", "stage_end"):
        if not valid_stage_kind(stage or ""):
            raise ValueError(f"bad stage kind {stage!r}")
        if name is not None or value is not None:
            raise ValueError("stage markers carry no counter fields")
    elif event == "counter":
        if stage is not None:
            raise ValueError("counters carry no stage field")
        if not isinstance(name, str) or not name:
            raise ValueError("counter name must be a non-empty string")
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ValueError(f"counter value must be an int >= 0, got {value!r}")
    else:
        raise ValueError(f"unknown event {event!r}")
    if ts is not None and (not isinstance(ts, int) or isinstance(ts, bool)):
        raise ValueError(f"ts must be integer milliseconds, got {ts!r}")

    obj: dict[str, object] = {"event": event}
    if stage is not None:
        obj["stage"] = stage
    if name is not None:
        obj["name"] = name
    if value is not None:
        obj["value"] = value
    if ts is not None:
        obj["ts"] = ts
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")
