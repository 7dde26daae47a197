import socket
import tempfile
import threading
import time
from pathlib import Path

import pytest


@pytest.fixture
def socket_path():
    """A short-lived unix socket path (pytest tmp dirs exceed AF_UNIX limits)."""
    with tempfile.TemporaryDirectory(prefix="wlc-") as d:
        yield str(Path(d) / "ctl.sock")


class CaptureServer:
    """Accepts marker connections on a unix socket and records every byte."""

    def __init__(self, path: str):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(path)
        self._sock.listen(4)
        self._sock.settimeout(0.05)
        self._chunks: list[bytes] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except TimeoutError:
                continue
            with conn:
                while chunk := conn.recv(65536):
                    with self._lock:
                        self._chunks.append(chunk)

    def data(self) -> bytes:
        with self._lock:
            return b"".join(self._chunks)

    def wait_bytes(self, count: int, timeout: float = 5.0) -> bytes:
        """Block until at least ``count`` bytes arrived; returns everything."""
        deadline = time.monotonic() + timeout
        while len(self.data()) < count:
            if time.monotonic() > deadline:
                raise AssertionError(
                    f"server got {len(self.data())} bytes, wanted {count}")
            time.sleep(0.005)
        return self.data()

    def wait_lines(self, count: int, timeout: float = 5.0) -> bytes:
        """Block until ``count`` complete marker lines arrived."""
        deadline = time.monotonic() + timeout
        while (got := self.data().count(b"\n")) < count:
            if time.monotonic() > deadline:
                raise AssertionError(f"server got {got} lines, wanted {count}")
            time.sleep(0.005)
        return self.data()

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)
        self._sock.close()


@pytest.fixture
def start_server():
    """Factory so tests can bring a listener up mid-test (recovery paths)."""
    servers = []

    def make(path: str) -> CaptureServer:
        server = CaptureServer(path)
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.close()


@pytest.fixture
def capture_server(start_server, socket_path):
    return start_server(socket_path)
