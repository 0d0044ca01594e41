"""Newline-delimited JSON request loop for external inference stacks.

One JSON object per line in, one per line out, order-preserving, UTF-8.

Requests:
    {"op": "profile"}
        -> {"scheme": ..., "vocab_size": ..., "d": ..., "ell": ..., "h": ...,
            "delta_base": ...}
    {"op": "reweight", "probs": [...], "window": [h ids], "message": "0101"}
        -> {"probs": [...]}
    {"op": "detect", "tokens": [...], "threshold": 4.0}
        -> {"z": ..., "p_value": ..., "message": ..., "G": ..., "N": ...,
            "ambiguous": [...], "skipped": ..., "decision": ...}
    anything else
        -> {"error": {"code": ..., "message": ...}} and the loop continues.

The repeated-window skip log lives in the session, so a reweight request
whose window was already consumed echoes its probs untouched — exactly what
the in-process embedding step does. Sessions never share logs: each stdio
process or socket connection gets a fresh one.
"""
from __future__ import annotations

import json
import socket as socketlib
from typing import Optional

import numpy as np

from .detect import detect
from .embed import EmbedParams, Message, watermark_step
from .errors import BimarkError, ParseError
from .prf import ContextWindow, SeenContextLog, derive_partitions
from .profiles import DetectionProfile
from .reweight import ProbabilityDistribution


class ServeSession:
    """Request dispatcher bound to one profile and one skip log."""

    def __init__(self, profile: DetectionProfile):
        if profile.delta_base is None:
            raise ParseError("serve profile must carry delta_base")
        self.profile = profile
        self.params = EmbedParams(
            vocab_size=profile.vocab_size, ell=profile.ell, d=profile.d,
            delta_base=profile.delta_base, h=profile.h,
        )
        self.stack = derive_partitions(profile.key, profile.vocab_size, profile.d)
        self.log = SeenContextLog()

    def handle_line(self, line: str) -> str:
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return _error("parse", f"bad JSON: {exc}")
        if not isinstance(request, dict):
            return _error("parse", "request must be a JSON object")
        try:
            return json.dumps(self._dispatch(request))
        except BimarkError as exc:
            return _error(_code_for(exc), str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            return _error("invalid_request", str(exc))

    def _dispatch(self, request: dict) -> dict:
        op = request.get("op")
        if op == "profile":
            return {
                "scheme": self.profile.scheme,
                "vocab_size": self.profile.vocab_size,
                "d": self.profile.d,
                "ell": self.profile.ell,
                "h": self.profile.h,
                "delta_base": self.profile.delta_base,
            }
        if op == "reweight":
            return self._reweight(request)
        if op == "detect":
            tokens = [int(t) for t in request["tokens"]]
            threshold = float(request.get("threshold", 4.0))
            report = detect(
                tokens, self.profile.key, self.params, self.stack, threshold
            )
            return report.to_dict()
        raise ParseError(f"unknown op {op!r}")

    def _reweight(self, request: dict) -> dict:
        probs = np.asarray(request["probs"], dtype=np.float64)
        if probs.size != self.params.vocab_size:
            raise ParseError(
                f"expected {self.params.vocab_size} probabilities, got {probs.size}"
            )
        window_ids = [int(t) for t in request["window"]]
        if len(window_ids) != self.params.h:
            raise ParseError(
                f"expected a window of {self.params.h} ids, got {len(window_ids)}"
            )
        message = Message.from_bitstring(str(request["message"]))
        dist = ProbabilityDistribution(probs)
        window = ContextWindow(tuple(window_ids))
        out, _ = watermark_step(
            dist, self.profile.key, window, message, self.params, self.stack, self.log
        )
        return {"probs": [float(p) for p in out.probs]}


def _code_for(exc: BimarkError) -> str:
    name = type(exc).__name__
    return {
        "ParseError": "parse",
        "DimensionError": "dimension",
        "DomainError": "domain",
        "StatisticUndefinedError": "undefined_statistic",
        "ContractViolationError": "contract",
    }.get(name, "error")


def _error(code: str, message: str) -> str:
    return json.dumps({"error": {"code": code, "message": message}})


def serve_streams(profile: DetectionProfile, reader, writer) -> None:
    """One session over a pair of text streams (the stdio transport)."""
    session = ServeSession(profile)
    for line in reader:
        line = line.strip()
        if not line:
            continue
        writer.write(session.handle_line(line) + "\n")
        writer.flush()


def serve_socket(
    profile: DetectionProfile, path: str, max_connections: Optional[int] = None
) -> None:
    """Unix-socket transport; each connection is an isolated session."""
    server = socketlib.socket(socketlib.AF_UNIX, socketlib.SOCK_STREAM)
    server.bind(path)
    server.listen(1)
    served = 0
    try:
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            served += 1
            session = ServeSession(profile)
            with conn, conn.makefile("r", encoding="utf-8") as reader, \
                    conn.makefile("w", encoding="utf-8") as writer:
                for line in reader:
                    line = line.strip()
                    if not line:
                        continue
                    writer.write(session.handle_line(line) + "\n")
                    writer.flush()
    finally:
        server.close()
