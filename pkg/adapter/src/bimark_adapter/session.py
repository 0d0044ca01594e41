"""Transports and the request/response session for the serve protocol.

Wire format (one JSON object per line, UTF-8, order-preserving):

    {"op": "profile"}                                   -> parameter object
    {"op": "reweight", "probs": [...], "window": [...],
     "message": "0101"}                                 -> {"probs": [...]}
    {"op": "detect", "tokens": [...], "threshold": z}   -> report object
    server-side failures                                -> {"error": {...}}

Probabilities round-trip exactly: both ends serialize IEEE doubles with
shortest-round-trip decimals, so a reweight reply is bit-identical to the
server's in-process computation.
"""
from __future__ import annotations

import json
import socket as socketlib
import subprocess
from typing import Optional, Sequence, Union


class ProtocolError(RuntimeError):
    """The endpoint misbehaved: EOF, bad JSON, or an error response."""

    def __init__(self, message: str, error: Optional[dict] = None):
        super().__init__(message)
        self.error = error or {}


class ValidationError(ValueError):
    """A request does not fit the endpoint's cached profile."""


class StdioTransport:
    """Spawns the serve process and talks over its standard streams."""

    def __init__(self, argv: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8",
            )
        except OSError as exc:
            raise ConnectionError(f"cannot spawn {argv!r}: {exc}") from exc

    def round_trip(self, line: str) -> str:
        proc = self._proc
        if proc.poll() is not None:
            raise ProtocolError(f"serve process exited with {proc.returncode}")
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ProtocolError(f"endpoint closed its input: {exc}") from exc
        reply = proc.stdout.readline()
        if not reply:
            raise ProtocolError("endpoint closed without responding")
        return reply

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class SocketTransport:
    """Connects to a unix-socket serve endpoint."""

    def __init__(self, path: str):
        self._sock = socketlib.socket(socketlib.AF_UNIX, socketlib.SOCK_STREAM)
        try:
            self._sock.connect(path)
        except OSError as exc:
            self._sock.close()
            raise ConnectionError(f"cannot connect to {path!r}: {exc}") from exc
        self._reader = self._sock.makefile("r", encoding="utf-8")
        self._writer = self._sock.makefile("w", encoding="utf-8")

    def round_trip(self, line: str) -> str:
        self._writer.write(line + "\n")
        self._writer.flush()
        reply = self._reader.readline()
        if not reply:
            raise ProtocolError("endpoint closed without responding")
        return reply

    def close(self) -> None:
        self._reader.close()
        self._writer.close()
        self._sock.close()


Endpoint = Union[Sequence[str], str, StdioTransport, SocketTransport]


class BridgeSession:
    """One serve connection: cached profile, strictly paired requests."""

    def __init__(self, transport):
        self._transport = transport
        self.requests = 0
        self.profile = self._request({"op": "profile"})
        for field in ("vocab_size", "d", "ell", "h"):
            if field not in self.profile:
                raise ProtocolError(f"profile reply missing {field!r}")

    def _request(self, payload: dict) -> dict:
        reply_line = self._transport.round_trip(json.dumps(payload))
        self.requests += 1
        try:
            reply = json.loads(reply_line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"endpoint sent bad JSON: {exc}") from exc
        if not isinstance(reply, dict):
            raise ProtocolError("endpoint reply is not an object")
        if "error" in reply:
            error = reply["error"]
            raise ProtocolError(
                f"endpoint error {error.get('code')}: {error.get('message')}",
                error=error,
            )
        return reply

    def reweight_step(
        self, probs: Sequence[float], window: Sequence[int], message: str
    ) -> list[float]:
        """Remote watermark step; bit-identical to the server's own math."""
        if len(probs) != self.profile["vocab_size"]:
            raise ValidationError(
                f"expected {self.profile['vocab_size']} probabilities, "
                f"got {len(probs)}"
            )
        if len(window) != self.profile["h"]:
            raise ValidationError(
                f"expected a window of {self.profile['h']} ids, got {len(window)}"
            )
        if len(message) != self.profile["ell"]:
            raise ValidationError(
                f"expected {self.profile['ell']} message bits, got {len(message)}"
            )
        reply = self._request({
            "op": "reweight",
            "probs": [float(p) for p in probs],
            "window": [int(t) for t in window],
            "message": message,
        })
        out = reply.get("probs")
        if not isinstance(out, list) or len(out) != len(probs):
            raise ProtocolError("reweight reply has the wrong shape")
        return out

    def detect_remote(self, tokens: Sequence[int], threshold: float = 4.0) -> dict:
        """Run detection server-side; returns the report document."""
        return self._request({
            "op": "detect",
            "tokens": [int(t) for t in tokens],
            "threshold": float(threshold),
        })

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "BridgeSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_session(endpoint: Endpoint) -> BridgeSession:
    """Connect and fetch the profile.

    ``endpoint`` is an argv list (spawn a stdio serve process), a unix
    socket path, or an already-built transport.
    """
    if isinstance(endpoint, (StdioTransport, SocketTransport)):
        return BridgeSession(endpoint)
    if isinstance(endpoint, str):
        return BridgeSession(SocketTransport(endpoint))
    return BridgeSession(StdioTransport(endpoint))


def watermark_hook(session: BridgeSession, message: str):
    """Logits-processor-style hook closed over a session and a message.

    The returned callable maps (input probabilities, preceding ids) to the
    reweighted probabilities; the context window is the last h ids of the
    running sequence, sentinel-padded at the start exactly as the server
    pads it.
    """
    h = session.profile["h"]
    sentinel = session.profile["vocab_size"]

    def hook(probs: Sequence[float], preceding_ids: Sequence[int]) -> list[float]:
        tail = [int(t) for t in preceding_ids[max(0, len(preceding_ids) - h):]]
        window = [sentinel] * (h - len(tail)) + tail
        return session.reweight_step(probs, window, message)

    return hook
