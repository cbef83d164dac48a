"""Evaluator contract and a client for out-of-process evaluators.

The environment's "training process" is abstracted behind `Evaluator`:
evaluate a genotype prefix for some epochs and return scores plus the
progressive state representation. Out-of-process evaluators speak a
line-delimited JSON protocol over a spawned child's stdio or a TCP stream;
one request is outstanding at a time and responses correlate by id.
"""

from __future__ import annotations

import json
import math
import os
import selectors
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from . import genotype as gt
from . import rng

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 600.0
STUB_PSR_DIM = 64


class EvaluatorError(Exception):
    """Base class for evaluator and protocol failures."""


class ConnectError(EvaluatorError):
    """Endpoint could not be spawned or reached."""


class HandshakeError(EvaluatorError):
    """Peer spoke a different protocol version or a malformed hello."""


class ProtocolError(EvaluatorError):
    """Malformed or mis-correlated frame; poisons the handle."""


class EvaluatorTimeout(EvaluatorError):
    """No response within the configured timeout; poisons the handle."""


class ConnectionLost(EvaluatorError):
    """Transport closed while a conversation was in progress."""


class EvaluationError(EvaluatorError):
    """A specific evaluation failed; carries the offending genotype prefix."""

    def __init__(self, message: str, genotype: gt.Genotype | None = None):
        super().__init__(message)
        self.genotype = genotype


@dataclass(frozen=True)
class EvalResult:
    is_score: float
    fid_score: float
    psr: np.ndarray

    def __post_init__(self):
        psr = np.asarray(self.psr, dtype=np.float64)
        psr.setflags(write=False)
        object.__setattr__(self, "psr", psr)
        object.__setattr__(self, "is_score", float(self.is_score))
        object.__setattr__(self, "fid_score", float(self.fid_score))
        if psr.ndim != 1:
            raise ValueError(f"psr must be a vector, got shape {psr.shape}")
        if not (math.isfinite(self.is_score) and math.isfinite(self.fid_score)):
            raise ValueError("is/fid scores must be finite")
        if not np.all(np.isfinite(psr)):
            raise ValueError("psr must be finite")


@runtime_checkable
class Evaluator(Protocol):
    def evaluate(self, prefix: gt.Genotype, epochs: int = 1) -> EvalResult: ...
    def reset_weights(self) -> None: ...
    def descriptor(self) -> tuple[str, int]: ...


# ---------------------------------------------------------------------------
# Transports


class _LineTransport:
    """Line-oriented byte transport over a child process's stdio or a socket."""

    def __init__(self, read_fd: int, write, close_fn, kind: str):
        self._read_fd = read_fd
        self._write = write
        self._close = close_fn
        self._buf = b""
        self._closed = False
        self.kind = kind
        self._sel = selectors.DefaultSelector()
        self._sel.register(read_fd, selectors.EVENT_READ)

    def send_line(self, line: str) -> None:
        if self._closed:
            raise ConnectionLost("transport is closed")
        try:
            self._write(line.encode() + b"\n")
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise ConnectionLost(f"write failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        deadline = time.monotonic() + timeout
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = self._buf[:nl]
                self._buf = self._buf[nl + 1 :]
                return line.decode()
            if self._closed:
                raise ConnectionLost("transport is closed")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise EvaluatorTimeout(f"no response within {timeout} s")
            if not self._sel.select(remaining):
                continue
            try:
                chunk = os.read(self._read_fd, 65536)
            except OSError as exc:
                raise ConnectionLost(f"read failed: {exc}") from exc
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            self._buf += chunk

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._sel.close()
            self._close()


def _spawn_transport(argv: list[str]) -> _LineTransport:
    try:
        proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
        )
    except OSError as exc:
        raise ConnectError(f"cannot spawn {argv!r}: {exc}") from exc

    def write(data: bytes):
        proc.stdin.write(data)
        proc.stdin.flush()

    def close():
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    return _LineTransport(proc.stdout.fileno(), write, close, "pipe")


def _tcp_transport(host: str, port: int, timeout: float) -> _LineTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.setblocking(False)
    return _LineTransport(sock.fileno(), lambda d: sock.sendall(d), sock.close, "tcp")


def parse_endpoint(endpoint: str) -> tuple[str, object]:
    """Classify an endpoint: 'host:port' -> TCP, anything else -> command line."""
    host, sep, port = endpoint.rpartition(":")
    if sep and host and port.isdigit() and " " not in host and "/" not in host:
        return "tcp", (host, int(port))
    argv = shlex.split(endpoint)
    if not argv:
        raise ConnectError("empty evaluator endpoint")
    return "cmd", argv


class ExternalEvaluator:
    """Evaluator handle over the wire protocol; strictly sequential requests.

    The first protocol violation (malformed frame, id mismatch, timeout)
    poisons the handle: every later call fails fast.
    """

    def __init__(self, transport: _LineTransport, timeout: float):
        self._transport = transport
        self._timeout = timeout
        self._next_id = 1
        self._poisoned: EvaluatorError | None = None
        self._name = ""
        self._psr_dim = 0
        self._handshake()

    def _handshake(self) -> None:
        self._transport.send_line(json.dumps({"type": "hello", "version": PROTOCOL_VERSION}))
        try:
            reply = json.loads(self._transport.recv_line(self._timeout))
        except json.JSONDecodeError as exc:
            raise HandshakeError(f"malformed hello reply: {exc}") from exc
        if not isinstance(reply, dict) or reply.get("type") != "hello":
            raise HandshakeError(f"expected hello reply, got {reply!r}")
        if reply.get("version") != PROTOCOL_VERSION:
            raise HandshakeError(
                f"protocol version mismatch: peer {reply.get('version')}, ours {PROTOCOL_VERSION}"
            )
        self._name = str(reply.get("name", ""))
        self._psr_dim = int(reply.get("psr_dim", 0))

    def _poison(self, exc: EvaluatorError) -> EvaluatorError:
        self._poisoned = exc
        return exc

    def _request(self, msg: dict) -> dict:
        if self._poisoned is not None:
            raise type(self._poisoned)(f"handle poisoned by earlier error: {self._poisoned}")
        req_id = self._next_id
        self._next_id += 1
        msg = dict(msg, id=req_id)
        self._transport.send_line(json.dumps(msg))
        try:
            raw = self._transport.recv_line(self._timeout)
        except (EvaluatorTimeout, ConnectionLost) as exc:
            raise self._poison(exc)
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise self._poison(ProtocolError(f"malformed frame: {raw!r}")) from exc
        if not isinstance(reply, dict) or reply.get("id") != req_id:
            raise self._poison(
                ProtocolError(f"response id {reply.get('id')!r} != request id {req_id}")
            )
        if reply.get("type") == "error":
            raise EvaluationError(str(reply.get("message", "evaluator error")))
        return reply

    def evaluate(self, prefix: gt.Genotype, epochs: int = 1) -> EvalResult:
        reply = self._request(
            {"type": "evaluate", "epochs": int(epochs), "genotype": gt.to_wire(prefix)}
        )
        if reply.get("type") != "result":
            raise self._poison(ProtocolError(f"expected result, got {reply.get('type')!r}"))
        try:
            psr = np.asarray(reply["psr"], dtype=np.float64)
            result = EvalResult(float(reply["is"]), float(reply["fid"]), psr)
        except (KeyError, TypeError, ValueError) as exc:
            raise self._poison(ProtocolError(f"bad result payload: {exc}")) from exc
        if psr.shape != (self._psr_dim,):
            raise self._poison(
                ProtocolError(f"psr has dim {psr.shape}, handshake promised {self._psr_dim}")
            )
        return result

    def reset_weights(self) -> None:
        reply = self._request({"type": "reset_weights"})
        if reply.get("type") != "ok":
            raise self._poison(ProtocolError(f"expected ok, got {reply.get('type')!r}"))

    def descriptor(self) -> tuple[str, int]:
        return self._name, self._psr_dim

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_connect(endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> ExternalEvaluator:
    """Spawn or dial an external evaluator and complete the handshake."""
    kind, target = parse_endpoint(endpoint)
    if kind == "tcp":
        host, port = target
        transport = _tcp_transport(host, port, min(timeout, 30.0))
    else:
        transport = _spawn_transport(target)
    try:
        return ExternalEvaluator(transport, timeout)
    except EvaluatorError:
        transport.close()
        raise


# ---------------------------------------------------------------------------
# Bundled echo stub: a protocol-complete evaluator whose scores and psr are
# derived from a checksum of the received genotype, so a client can verify
# that the genotype survived the round trip byte-for-byte.

_STUB_TAG = 0x57AB


def stub_result(g: gt.Genotype, psr_dim: int = STUB_PSR_DIM) -> EvalResult:
    csum = int(gt.checksum(g), 16)
    is_score = 1.0 + 8.0 * rng.u01(_STUB_TAG, csum, 1)
    fid_score = 5.0 + 40.0 * rng.u01(_STUB_TAG, csum, 2)
    psr = rng.symmetric_array(psr_dim, _STUB_TAG, csum, 3)
    return EvalResult(is_score, fid_score, psr)


def serve_stub(in_stream, out_stream, name: str = "stub", psr_dim: int = STUB_PSR_DIM) -> None:
    """Serve the wire protocol on text streams until EOF. Blocking, sequential."""

    def reply(obj: dict):
        out_stream.write(json.dumps(obj) + "\n")
        out_stream.flush()

    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            reply({"type": "error", "id": -1, "message": "malformed frame"})
            continue
        mtype = msg.get("type")
        mid = msg.get("id", -1)
        if mtype == "hello":
            if msg.get("version") != PROTOCOL_VERSION:
                reply({"type": "error", "id": mid, "message": "unsupported protocol version"})
            else:
                reply(
                    {
                        "type": "hello",
                        "version": PROTOCOL_VERSION,
                        "name": name,
                        "psr_dim": psr_dim,
                    }
                )
        elif mtype == "evaluate":
            try:
                g = gt.from_wire(msg["genotype"])
                res = stub_result(g, psr_dim)
            except (KeyError, gt.GenotypeError, TypeError) as exc:
                reply({"type": "error", "id": mid, "message": f"bad genotype: {exc}"})
                continue
            reply(
                {
                    "type": "result",
                    "id": mid,
                    "is": res.is_score,
                    "fid": res.fid_score,
                    "psr": list(res.psr),
                    "genotype_checksum": gt.checksum(g),
                }
            )
        elif mtype == "reset_weights":
            reply({"type": "ok", "id": mid})
        else:
            reply({"type": "error", "id": mid, "message": f"unknown message type {mtype!r}"})
