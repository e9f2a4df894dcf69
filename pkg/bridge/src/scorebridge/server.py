"""Version-1 wire protocol server.

Frame layout, over TCP:

    u32 little-endian header length
    UTF-8 JSON header
    raw payload bytes (length implied by the header fields)

Requests:

* ``{"proto": 1, "op": "hello"}`` with no payload; answered by
  ``{"proto": 1, "classes": K}``.
* ``{"proto": 1, "op": "score", "batch": B, "h": H, "w": W, "c": C,
  "dtype": "f32"}`` followed by ``B*H*W*C`` little-endian float32 values,
  row-major, channels last.  Answered by ``{"proto": 1, "classes": K}``
  followed by ``B*K`` little-endian float32 scores in request order.

Errors are ``{"proto": 1, "error": "<code>", "msg": "..."}`` with no payload,
codes ``bad-header``, ``bad-version``, ``bad-shape``, ``internal``.  Any error
also ends the connection: a rejected score request may still have its payload
in flight, and parsing those bytes as the next header would desynchronize the
stream.

Request batches of any size are accepted (up to a 2 GiB payload sanity bound);
the scorer splits them into model-sized chunks internally, so a batch above
the configured cap is served, never refused.
"""

from __future__ import annotations

import json
import socket
import struct
import threading

import numpy as np

__all__ = [
    "PROTO_VERSION",
    "MAX_HEADER_BYTES",
    "MAX_PAYLOAD_BYTES",
    "FramingError",
    "PeerGone",
    "BridgeServer",
    "serve",
]

PROTO_VERSION = 1
MAX_HEADER_BYTES = 1 << 20
MAX_PAYLOAD_BYTES = 1 << 31  # 2 GiB


class FramingError(Exception):
    """The peer's bytes do not parse as a protocol frame."""


class PeerGone(Exception):
    """The byte stream ended mid-frame or between frames."""


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(65536, n - len(buf)))
        if not chunk:
            raise PeerGone(f"stream closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def write_frame(sock: socket.socket, header: dict, payload: bytes = b"") -> None:
    body = json.dumps(header, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack("<I", len(body)) + body + payload)


def read_header(sock: socket.socket) -> dict:
    (hlen,) = struct.unpack("<I", _read_exact(sock, 4))
    if hlen == 0 or hlen > MAX_HEADER_BYTES:
        raise FramingError(f"implausible header length {hlen}")
    try:
        header = json.loads(_read_exact(sock, hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FramingError("header is not a JSON object")
    return header


class BridgeServer:
    """Serves one scorer over TCP.

    Connections are accepted concurrently (one thread each) so a stalled or
    misbehaving client never wedges the listener, but requests are consumed
    one at a time at the model: the scorer serializes inference internally.
    """

    def __init__(self, scorer, host: str = "127.0.0.1", port: int = 0):
        self.scorer = scorer
        self.host = host
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._accept_thread: "threading.Thread | None" = None
        self._conn_lock = threading.Lock()
        self._conns: set[socket.socket] = set()
        self._workers: list[threading.Thread] = []

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "BridgeServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
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
        with self._conn_lock:
            leftovers = list(self._conns)
        for conn in leftovers:
            try:
                conn.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5.0)
        for worker in self._workers:
            worker.join(timeout=5.0)

    def __enter__(self) -> "BridgeServer":
        return self.start()

    def __exit__(self, *exc_info: object) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            if self._stop.is_set():
                conn.close()
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conn_lock:
                self._conns.add(conn)
            worker = threading.Thread(target=self._run_connection, args=(conn,), daemon=True)
            self._workers.append(worker)
            worker.start()

    def _run_connection(self, conn: socket.socket) -> None:
        try:
            with conn:
                self._serve_connection(conn)
        except OSError:
            pass  # client vanished mid-frame; nothing to answer
        finally:
            with self._conn_lock:
                self._conns.discard(conn)

    def _serve_connection(self, conn: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                header = read_header(conn)
            except FramingError as exc:
                self._send_error(conn, "bad-header", str(exc))
                return
            except PeerGone:
                return  # clean disconnect between requests
            if not self._handle(conn, header):
                return

    def _send_error(self, conn: socket.socket, code: str, msg: str) -> None:
        try:
            write_frame(conn, {"proto": PROTO_VERSION, "error": code, "msg": msg})
        except OSError:
            pass

    def _handle(self, conn: socket.socket, header: dict) -> bool:
        """Serve one request; False closes the connection."""
        if header.get("proto") != PROTO_VERSION:
            self._send_error(conn, "bad-version", f"proto {header.get('proto')!r}")
            return False
        op = header.get("op")
        if op == "hello":
            write_frame(conn, {"proto": PROTO_VERSION, "classes": self.scorer.num_classes})
            return True
        if op != "score":
            self._send_error(conn, "bad-header", f"unknown op {op!r}")
            return False

        dims = []
        for key in ("batch", "h", "w", "c"):
            value = header.get(key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                self._send_error(conn, "bad-shape", f"field {key!r} = {value!r}")
                return False
            dims.append(value)
        b, h, w, c = dims
        if header.get("dtype") != "f32":
            self._send_error(conn, "bad-shape", f"dtype {header.get('dtype')!r}")
            return False
        if c not in (1, 3):
            self._send_error(conn, "bad-shape", f"channels must be 1 or 3, got {c}")
            return False
        payload_bytes = b * h * w * c * 4
        if payload_bytes > MAX_PAYLOAD_BYTES:
            self._send_error(conn, "bad-shape", "payload over 2 GiB")
            return False

        try:
            payload = _read_exact(conn, payload_bytes)
        except PeerGone:
            return False  # client vanished mid-payload; nothing to answer
        images = np.frombuffer(payload, dtype="<f4").reshape(b, h, w, c)
        try:
            scores = np.ascontiguousarray(self.scorer.score_batch(images), dtype="<f4")
        except Exception as exc:  # noqa: BLE001 - surface as in-protocol error
            self._send_error(conn, "internal", str(exc))
            return False
        write_frame(
            conn,
            {"proto": PROTO_VERSION, "classes": int(scores.shape[1])},
            scores.tobytes(),
        )
        return True


def serve(scorer, host: str = "127.0.0.1", port: int = 0) -> BridgeServer:
    """Start serving in a background thread; returns the (started) server."""
    return BridgeServer(scorer, host=host, port=port).start()
