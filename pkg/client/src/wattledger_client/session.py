"""Session object an instrumented training script talks to the collector with.

Design goals: never crash or stall the training loop. Sends are best-effort;
if the collector is down, markers queue in a bounded buffer and are retried on
the next call, and ``close(strict=False)`` degrades to a warning rather than
an exception.
"""

from __future__ import annotations

import os
import socket
import time
import warnings
from collections import deque
from contextlib import contextmanager
from typing import Callable, Iterator

from .wire import encode_marker

__all__ = [
    "ENDPOINT_ENV_VAR",
    "ClientError",
    "ClientSession",
    "DeliveryError",
    "StageStateError",
]

ENDPOINT_ENV_VAR = "WATTLEDGER_ENDPOINT"


class ClientError(Exception):
    """Base class for instrumentation-client failures."""


class StageStateError(ClientError):
    """Stage markers would not nest correctly (stages must not overlap)."""


class DeliveryError(ClientError):
    """Markers could not be delivered and strict mode was requested."""


def _now_ms() -> int:
    return int(time.time() * 1000)


class ClientSession:
    """Marker channel to one collector endpoint.

    ``endpoint`` defaults to $WATTLEDGER_ENDPOINT. The connection is opened
    lazily on the first marker; on any socket error the line is kept in a
    buffer (at most ``buffer_limit`` lines, oldest dropped first) and delivery
    is retried on each subsequent call and on close().

    ``timestamps=True`` stamps every marker with ``clock()`` milliseconds so
    the session works against collectors that trust sender clocks; pass False
    to omit ``ts`` when the collector stamps receipt times anyway.
    """

    def __init__(self, endpoint: str | None = None, *,
                 clock: Callable[[], int] = _now_ms,
                 buffer_limit: int = 1024,
                 strict: bool = False,
                 timestamps: bool = True):
        endpoint = endpoint if endpoint is not None else os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise ClientError(
                f"no collector endpoint: pass one or set ${ENDPOINT_ENV_VAR}")
        if buffer_limit < 1:
            raise ClientError("buffer_limit must be >= 1")
        self.endpoint = endpoint
        self.strict = strict
        self.dropped = 0
        self._clock = clock
        self._timestamps = timestamps
        self._limit = buffer_limit
        self._pending: deque[bytes] = deque()
        self._sock: socket.socket | None = None
        self._open_stage: str | None = None
        self._closed = False

    # -- delivery ------------------------------------------------------------

    def _connect(self) -> socket.socket:
        if self._sock is None:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            try:
                sock.connect(self.endpoint)
            except OSError:
                sock.close()
                raise
            self._sock = sock
        return self._sock

    def _drop_connection(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def flush(self) -> bool:
        """Retry buffered markers; True when nothing is left undelivered."""
        while self._pending:
            try:
                self._connect().sendall(self._pending[0])
            except OSError:
                self._drop_connection()
                return False
            self._pending.popleft()
        return True

    def _send(self, line: bytes) -> None:
        if self._closed:
            raise ClientError("session is closed")
        if self.flush():
            try:
                self._connect().sendall(line)
                return
            except OSError:
                self._drop_connection()
        if len(self._pending) >= self._limit:
            self._pending.popleft()
            self.dropped += 1
        self._pending.append(line)

    def _emit(self, event: str, *, stage: str | None = None,
              name: str | None = None, value: int | None = None) -> None:
        ts = self._clock() if self._timestamps else None
        self._send(encode_marker(event, stage=stage, name=name, value=value,
                                 ts=ts))

    # -- markers ---------------------------------------------------------------

    @contextmanager
    def stage(self, kind: str) -> Iterator["ClientSession"]:
        """Bracket a block of work with start/end markers for ``kind``.

        Stages are flat: entering one while another is open is an error (the
        collector would reject the overlap anyway). The end marker is emitted
        even when the block raises.
        """
        if self._open_stage is not None:
            raise StageStateError(
                f"stage {kind!r} started while {self._open_stage!r} is open")
        self._emit("stage_start", stage=kind)
        self._open_stage = kind
        try:
            yield self
        finally:
            self._open_stage = None
            self._emit("stage_end", stage=kind)

    def add_counter(self, name: str, value: int) -> None:
        """Report ``value`` more units of ``name`` (attributed to the open stage)."""
        self._emit("counter", name=name, value=value)

    def add_tokens(self, count: int) -> None:
        self.add_counter("tokens", count)

    # -- lifecycle -------------------------------------------------------------

    def close(self) -> None:
        """Flush and disconnect. Undelivered markers raise or warn per ``strict``."""
        if self._closed:
            return
        self._closed = True
        delivered = self.flush()
        self._drop_connection()
        if delivered and not self.dropped:
            return
        msg = (f"{len(self._pending)} marker(s) undelivered and "
               f"{self.dropped} dropped for collector at {self.endpoint}")
        if self.strict:
            raise DeliveryError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
