"""Version-1 wire protocol for remote batch scoring.

Frame layout, over any reliable byte stream (TCP here):

    u32 little-endian header length
    UTF-8 JSON header
    raw payload bytes (length implied by the header fields)

Requests:

* ``{"proto": 1, "op": "hello"}`` with no payload; the response header
  ``{"proto": 1, "classes": K}`` announces the class count.
* ``{"proto": 1, "op": "score", "batch": B, "h": H, "w": W, "c": C,
  "dtype": "f32"}`` followed by ``B*H*W*C`` little-endian float32 values,
  row-major, channels last. The response is ``{"proto": 1, "classes": K}``
  followed by ``B*K`` little-endian float32 scores in request order.

Errors travel as ``{"proto": 1, "error": "<code>", "msg": "..."}`` with no
payload. Codes: ``bad-header``, ``bad-version``, ``bad-shape``, ``internal``.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .classifier import Scorer, as_batch

__all__ = [
    "PROTO_VERSION",
    "WireError",
    "TransportError",
    "ProtocolError",
    "RemoteScoringError",
    "write_frame",
    "read_frame",
    "RemoteScorer",
    "ScoringServer",
    "serve_scorer",
]

PROTO_VERSION = 1
_MAX_HEADER = 1 << 20  # sanity bound; headers are tiny


class WireError(Exception):
    """Base for everything that can go wrong on the wire."""


class TransportError(WireError):
    """The byte stream broke: connection refused, reset, or truncated."""


class ProtocolError(WireError):
    """The peer spoke, but not protocol v1 (bad JSON, version, or shape)."""


class RemoteScoringError(WireError):
    """The peer answered with an in-protocol error frame."""

    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code
        self.msg = msg


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(65536, n - len(buf)))
        if not chunk:
            raise TransportError(f"stream closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def write_frame(sock: socket.socket, header: dict, payload: bytes = b"") -> None:
    body = json.dumps(header, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack("<I", len(body)) + body + payload)


def read_frame(sock: socket.socket, payload_len: "int | None" = None) -> tuple[dict, bytes]:
    """Read a header and, if ``payload_len`` is known up front, its payload.

    Score responses carry a payload whose length is derived from the header,
    so callers usually read the header first (``payload_len=None``) and then
    fetch the payload with :func:`read_payload`.
    """
    raw = _read_exact(sock, 4)
    (hlen,) = struct.unpack("<I", raw)
    if hlen == 0 or hlen > _MAX_HEADER:
        raise ProtocolError(f"implausible header length {hlen}")
    try:
        header = json.loads(_read_exact(sock, hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("header is not a JSON object")
    payload = _read_exact(sock, payload_len) if payload_len else b""
    return header, payload


def read_payload(sock: socket.socket, n: int) -> bytes:
    return _read_exact(sock, n)


class RemoteScorer:
    """Client side of the protocol; a drop-in :class:`~vrise.classifier.Scorer`.

    Connects lazily, handshakes with ``hello`` to learn the class count, and
    serializes concurrent callers with a lock (one stream, one request in
    flight). A transport failure triggers exactly one reconnect-and-retry,
    since scoring is stateless; protocol errors are never retried.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._host = host
        self._port = port
        self._timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self._classes: int | None = None

    @classmethod
    def parse(cls, address: str, timeout: float = 30.0) -> "RemoteScorer":
        """Build from "host:port"."""
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"remote address must be host:port, got {address!r}")
        return cls(host, int(port), timeout=timeout)

    @property
    def num_classes(self) -> int:
        if self._classes is None:
            with self._lock:
                self._ensure_connected()
        assert self._classes is not None
        return self._classes

    def _connect(self) -> None:
        try:
            self._sock = socket.create_connection(
                (self._host, self._port), timeout=self._timeout
            )
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError as exc:
            self._sock = None
            raise TransportError(f"cannot connect to {self._host}:{self._port}: {exc}") from exc
        header = self._exchange({"proto": PROTO_VERSION, "op": "hello"}, b"")[0]
        classes = header.get("classes")
        if not isinstance(classes, int) or classes < 1:
            raise ProtocolError(f"hello response lacks a class count: {header}")
        if self._classes is not None and classes != self._classes:
            raise ProtocolError(
                f"server changed class count mid-run: {self._classes} -> {classes}"
            )
        self._classes = classes

    def _ensure_connected(self) -> None:
        if self._sock is None:
            self._connect()

    def _exchange(self, header: dict, payload: bytes) -> tuple[dict, socket.socket]:
        assert self._sock is not None
        try:
            write_frame(self._sock, header, payload)
            resp, _ = read_frame(self._sock)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if "error" in resp:
            raise RemoteScoringError(str(resp.get("error")), str(resp.get("msg", "")))
        if resp.get("proto") != PROTO_VERSION:
            raise ProtocolError(f"unsupported response version: {resp.get('proto')!r}")
        return resp, self._sock

    def _drop_connection(self) -> None:
        """Close the socket without touching the lock; callers hold it."""
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        with self._lock:
            self._drop_connection()

    def __enter__(self) -> "RemoteScorer":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        batch = as_batch(images)
        b, h, w, c = batch.shape
        header = {
            "proto": PROTO_VERSION,
            "op": "score",
            "batch": b,
            "h": h,
            "w": w,
            "c": c,
            "dtype": "f32",
        }
        payload = np.ascontiguousarray(batch, dtype="<f4").tobytes()
        with self._lock:
            for attempt in (0, 1):
                self._ensure_connected()
                try:
                    resp, sock = self._exchange(header, payload)
                    classes = resp.get("classes")
                    if not isinstance(classes, int) or classes < 1:
                        raise ProtocolError(f"score response lacks a class count: {resp}")
                    if self._classes is not None and classes != self._classes:
                        raise ProtocolError(
                            f"server changed class count mid-run: {self._classes} -> {classes}"
                        )
                    raw = read_payload(sock, b * classes * 4)
                    scores = np.frombuffer(raw, dtype="<f4").reshape(b, classes)
                    return scores.astype(np.float32)
                except TransportError:
                    # One reconnect for an idempotent request, then give up.
                    self._drop_connection()
                    if attempt == 1:
                        raise
        raise AssertionError("unreachable")


@dataclass
class ScoringServer:
    """Serves one scorer over TCP; single connection at a time.

    ``batch_cap`` bounds the per-request batch the server will accept, which
    lets tests exercise client-side behavior against small servers.
    """

    scorer: Scorer
    host: str = "127.0.0.1"
    port: int = 0
    batch_cap: int = 4096

    def __post_init__(self) -> None:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self.host, self.port))
        self._listener.listen(4)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "ScoringServer":
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            # Unblock accept() with a throwaway connection.
            poke = socket.create_connection((self.host, self.port), timeout=1.0)
            poke.close()
        except OSError:
            pass
        self._listener.close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "ScoringServer":
        return self.start()

    def __exit__(self, *exc_info: object) -> None:
        self.stop()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with conn:
                if self._stop.is_set():
                    return
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                try:
                    self._serve_connection(conn)
                except (TransportError, OSError):
                    continue  # client went away; await the next one

    def _serve_connection(self, conn: socket.socket) -> None:
        # Any error response also ends the connection: a rejected score
        # request may still have its payload in flight, and parsing those
        # bytes as the next header would desynchronize the stream.
        while not self._stop.is_set():
            try:
                header, _ = read_frame(conn)
            except ProtocolError as exc:
                write_frame(conn, self._error("bad-header", str(exc)))
                return
            except TransportError:
                return  # clean disconnect between requests
            if not self._handle(conn, header):
                return

    def _error(self, code: str, msg: str) -> dict:
        return {"proto": PROTO_VERSION, "error": code, "msg": msg}

    def _handle(self, conn: socket.socket, header: dict) -> bool:
        """Serve one request; False means the connection must close."""
        if header.get("proto") != PROTO_VERSION:
            write_frame(conn, self._error("bad-version", f"proto {header.get('proto')!r}"))
            return False
        op = header.get("op")
        if op == "hello":
            write_frame(conn, {"proto": PROTO_VERSION, "classes": self.scorer.num_classes})
            return True
        if op != "score":
            write_frame(conn, self._error("bad-header", f"unknown op {op!r}"))
            return False

        dims = []
        for key in ("batch", "h", "w", "c"):
            v = header.get(key)
            if not isinstance(v, int) or v < 1:
                write_frame(conn, self._error("bad-shape", f"field {key!r} = {v!r}"))
                return False
            dims.append(v)
        b, h, w, c = dims
        if header.get("dtype") != "f32":
            write_frame(conn, self._error("bad-shape", f"dtype {header.get('dtype')!r}"))
            return False
        if b > self.batch_cap:
            write_frame(conn, self._error("bad-shape", f"batch {b} exceeds cap {self.batch_cap}"))
            return False
        if b * h * w * c * 4 > (1 << 31):
            write_frame(conn, self._error("bad-shape", "payload over 2 GiB"))
            return False

        payload = read_payload(conn, b * h * w * c * 4)
        images = np.frombuffer(payload, dtype="<f4").reshape(b, h, w, c)
        try:
            scores = np.ascontiguousarray(self.scorer.score_batch(images), dtype="<f4")
        except Exception as exc:  # noqa: BLE001 - surface as in-protocol error
            write_frame(conn, self._error("internal", str(exc)))
            return False
        write_frame(
            conn,
            {"proto": PROTO_VERSION, "classes": int(scores.shape[1])},
            scores.tobytes(),
        )
        return True


def serve_scorer(
    scorer: Scorer, host: str = "127.0.0.1", port: int = 0, batch_cap: int = 4096
) -> ScoringServer:
    """Start serving in a background thread; returns the (started) server."""
    return ScoringServer(scorer=scorer, host=host, port=port, batch_cap=batch_cap).start()
