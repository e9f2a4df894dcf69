"""Protocol conformance under malformed, truncated, and inconsistent input.

Every case talks to the bridge over a raw socket — no client library — so the
byte-level frame grammar is what is being tested.  After any error response
the server must close the connection (a rejected request may still have
payload in flight, and parsing those bytes as a header would desynchronize
the stream), and the listener must survive to serve the next connection.
"""

from __future__ import annotations

import json
import socket
import struct

import numpy as np
import pytest

from scorebridge.server import MAX_HEADER_BYTES, PROTO_VERSION


def connect(server) -> socket.socket:
    sock = socket.create_connection((server.host, server.port), timeout=30)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def send_header(sock: socket.socket, header: dict, payload: bytes = b"") -> None:
    body = json.dumps(header).encode("utf-8")
    sock.sendall(struct.pack("<I", len(body)) + body + payload)


def read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise AssertionError(f"peer closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> dict:
    (hlen,) = struct.unpack("<I", read_exact(sock, 4))
    return json.loads(read_exact(sock, hlen).decode("utf-8"))


def expect_error(sock: socket.socket, code: str) -> dict:
    header = read_frame(sock)
    assert header.get("proto") == PROTO_VERSION
    assert header.get("error") == code, f"expected {code!r}, got {header}"
    assert "msg" in header
    return header


def assert_closed(sock: socket.socket) -> None:
    assert sock.recv(1) == b"", "server left the connection open after an error"


def score_header(batch=1, h=8, w=8, c=1, dtype="f32", **extra) -> dict:
    header = {
        "proto": PROTO_VERSION,
        "op": "score",
        "batch": batch,
        "h": h,
        "w": w,
        "c": c,
        "dtype": dtype,
    }
    header.update(extra)
    return header


def payload_for(header: dict, seed: int = 0) -> bytes:
    shape = (header["batch"], header["h"], header["w"], header["c"])
    return np.random.default_rng(seed).random(shape, dtype=np.float32).tobytes()


def test_hello_reports_classes_and_keeps_connection(server, scorer):
    with connect(server) as sock:
        for _ in range(2):  # the connection survives repeated handshakes
            send_header(sock, {"proto": PROTO_VERSION, "op": "hello"})
            resp = read_frame(sock)
            assert resp == {"proto": PROTO_VERSION, "classes": scorer.num_classes}
        assert scorer.num_classes == 1000


def test_zero_header_length(server):
    with connect(server) as sock:
        sock.sendall(struct.pack("<I", 0))
        expect_error(sock, "bad-header")
        assert_closed(sock)


@pytest.mark.parametrize("hlen", [MAX_HEADER_BYTES + 1, 0xFFFFFFFF])
def test_implausible_header_length(server, hlen):
    with connect(server) as sock:
        sock.sendall(struct.pack("<I", hlen))
        expect_error(sock, "bad-header")
        assert_closed(sock)


def test_header_not_json(server):
    with connect(server) as sock:
        body = b"{nope nope"
        sock.sendall(struct.pack("<I", len(body)) + body)
        expect_error(sock, "bad-header")
        assert_closed(sock)


def test_header_not_an_object(server):
    with connect(server) as sock:
        body = json.dumps([1, 2, 3]).encode()
        sock.sendall(struct.pack("<I", len(body)) + body)
        expect_error(sock, "bad-header")
        assert_closed(sock)


@pytest.mark.parametrize("proto", [0, 2, "1", None])
def test_wrong_or_missing_version(server, proto):
    with connect(server) as sock:
        header = {"op": "hello"}
        if proto is not None:
            header["proto"] = proto
        send_header(sock, header)
        expect_error(sock, "bad-version")
        assert_closed(sock)


def test_unknown_op(server):
    with connect(server) as sock:
        send_header(sock, {"proto": PROTO_VERSION, "op": "classify"})
        expect_error(sock, "bad-header")
        assert_closed(sock)


@pytest.mark.parametrize(
    "mutation",
    [
        {"batch": 0},
        {"batch": -4},
        {"batch": True},
        {"h": "8"},
        {"w": None},
        {"c": 2.5},
    ],
)
def test_invalid_dimension_fields(server, mutation):
    with connect(server) as sock:
        send_header(sock, score_header(**mutation))
        expect_error(sock, "bad-shape")
        assert_closed(sock)


def test_missing_dimension_field(server):
    with connect(server) as sock:
        header = score_header()
        del header["w"]
        send_header(sock, header)
        expect_error(sock, "bad-shape")
        assert_closed(sock)


@pytest.mark.parametrize("dtype", ["f64", "f16", "", None])
def test_wrong_dtype(server, dtype):
    with connect(server) as sock:
        send_header(sock, score_header(dtype=dtype))
        expect_error(sock, "bad-shape")
        assert_closed(sock)


@pytest.mark.parametrize("channels", [2, 4, 7])
def test_unsupported_channel_count(server, channels):
    with connect(server) as sock:
        send_header(sock, score_header(c=channels))
        expect_error(sock, "bad-shape")
        assert_closed(sock)


def test_payload_size_guard(server):
    # 2048 * 1024 * 1024 * 1 float32s = 8 GiB, over the 2 GiB sanity bound;
    # rejected from the header alone, before any payload is read.
    with connect(server) as sock:
        send_header(sock, score_header(batch=2048, h=1024, w=1024, c=1))
        expect_error(sock, "bad-shape")
        assert_closed(sock)


def test_truncated_payload_drops_connection_not_server(server, scorer):
    header = score_header(batch=1, h=8, w=8, c=3)  # promises 768 payload bytes
    with connect(server) as sock:
        send_header(sock, header, payload=b"\x00" * 100)
        sock.shutdown(socket.SHUT_WR)
        sock.settimeout(30)
        assert sock.recv(1) == b"", "server answered a half-delivered request"
    # The listener must still be alive for the next client.
    with connect(server) as sock:
        send_header(sock, {"proto": PROTO_VERSION, "op": "hello"})
        assert read_frame(sock)["classes"] == scorer.num_classes


def test_oversized_payload_desynchronizes_loudly(server):
    # Four bytes more than the header promises: the request itself is served,
    # then the stray bytes (0xFFFFFFFF) parse as an implausible header length
    # and the server must answer bad-header and hang up, not guess.
    header = score_header(batch=1, h=8, w=8, c=1)
    with connect(server) as sock:
        send_header(sock, header, payload=payload_for(header) + b"\xff\xff\xff\xff")
        resp = read_frame(sock)
        assert resp["classes"] >= 1
        read_exact(sock, header["batch"] * resp["classes"] * 4)
        expect_error(sock, "bad-header")
        assert_closed(sock)


def test_class_count_consistent_across_requests_and_connections(server, scorer):
    counts = []
    for _ in range(2):
        with connect(server) as sock:
            send_header(sock, {"proto": PROTO_VERSION, "op": "hello"})
            counts.append(read_frame(sock)["classes"])
            header = score_header(batch=1, h=8, w=8, c=1)
            send_header(sock, header, payload=payload_for(header))
            resp = read_frame(sock)
            counts.append(resp["classes"])
            read_exact(sock, resp["classes"] * 4)
    assert set(counts) == {scorer.num_classes}, f"class count wobbled: {counts}"


def test_batch_above_cap_is_split_not_refused(server, scorer, config):
    # 19 images with batch_cap=8 forces three internal chunks (8+8+3); the
    # request must succeed and match a direct in-process scoring call exactly.
    header = score_header(batch=19, h=16, w=16, c=1)
    assert header["batch"] > config.batch_cap
    raw = payload_for(header, seed=3)
    with connect(server) as sock:
        send_header(sock, header, payload=raw)
        resp = read_frame(sock)
        assert "error" not in resp
        scores = np.frombuffer(
            read_exact(sock, 19 * resp["classes"] * 4), dtype="<f4"
        ).reshape(19, resp["classes"])
    assert np.all(np.isfinite(scores))
    images = np.frombuffer(raw, dtype="<f4").reshape(19, 16, 16, 1)
    direct = scorer.score_batch(images)
    assert np.array_equal(scores, direct)
