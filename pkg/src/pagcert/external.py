"""Client (and a minimal server loop) for the line-delimited JSON
quality-provider protocol spoken by out-of-process robustness tools.

Request:  {"id": <int>, "x": [<float>, ...]}
Response: {"id": <int>, "rho": <float>, "kappa": <float>, "kind": <kind>}

Responses may arrive in any order; they are matched to requests by id.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import sys
import threading
import time
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import OracleTimeout, ProtocolViolation, ToolCrash
from .oracles import KINDS, OracleResult

ENV_COMMAND = "PAG_ORACLE_CMD"


def _parse_response(line: str, outstanding) -> tuple[int, float, float, str]:
    """Validate one response line; blame the oldest outstanding request
    when the line carries no usable id."""
    fallback = min(outstanding) if outstanding else None
    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        raise ProtocolViolation(f"response is not valid JSON: {line[:80]!r}", fallback)
    if not isinstance(msg, dict):
        raise ProtocolViolation("response is not a JSON object", fallback)
    rid = msg.get("id")
    if isinstance(rid, bool) or not isinstance(rid, int):
        raise ProtocolViolation(f"response has no integer id: {line[:80]!r}", fallback)
    if rid not in outstanding:
        raise ProtocolViolation(f"response for unknown or already answered id {rid}", rid)
    rho, kappa, kind = msg.get("rho"), msg.get("kappa"), msg.get("kind")
    for name, v in (("rho", rho), ("kappa", kappa)):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ProtocolViolation(f"request {rid}: field {name!r} is not a finite number", rid)
    if rho < 0:
        raise ProtocolViolation(f"request {rid}: negative rho {rho}", rid)
    if not 0 < kappa <= 1:
        raise ProtocolViolation(f"request {rid}: kappa {kappa} outside (0, 1]", rid)
    if kind not in KINDS:
        raise ProtocolViolation(f"request {rid}: unknown kind {kind!r}", rid)
    return rid, float(rho), float(kappa), kind


class ExternalOracle:
    """One subprocess speaking the quality-provider protocol.

    Requests are pipelined: a writer thread streams them while the calling
    thread collects responses, so a tool may buffer and reorder freely.
    ``timeout_ms`` bounds how long any outstanding request may wait
    without the tool producing a response.
    """

    def __init__(self, command, timeout_ms: Optional[float] = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = None if timeout_ms is None else timeout_ms / 1000.0
        self._proc = None
        self._next_id = 0
        self._completed = 0
        self._write_lock = threading.Lock()
        self._lines = []
        self._cond = threading.Condition()
        self._eof = False

    # lifecycle

    def start(self) -> "ExternalOracle":
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        threading.Thread(target=self._read_loop, daemon=True).start()
        return self

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.stdin.close()
        except (BrokenPipeError, OSError):
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    @property
    def completed(self) -> int:
        return self._completed

    # io

    def _read_loop(self):
        stream = self._proc.stdout
        for line in stream:
            with self._cond:
                self._lines.append(line)
                self._cond.notify_all()
        with self._cond:
            self._eof = True
            self._cond.notify_all()

    def _write_all(self, requests, errors):
        try:
            with self._write_lock:
                for rid, x in requests:
                    self._proc.stdin.write(json.dumps({"id": rid, "x": x}) + "\n")
                self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            errors.append(exc)

    def query_many(self, X) -> tuple[np.ndarray, np.ndarray, list]:
        """Return ``(rho, kappa, kinds)`` for every row of X, in row order."""
        if self._proc is None:
            raise RuntimeError("oracle not started")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = len(X)
        ids = list(range(self._next_id, self._next_id + n))
        self._next_id += n
        row_of = {rid: k for k, rid in enumerate(ids)}
        outstanding = set(ids)
        rho = np.empty(n)
        kappa = np.empty(n)
        kinds = [None] * n

        write_errors = []
        writer = threading.Thread(
            target=self._write_all,
            args=([(rid, X[row_of[rid]].tolist()) for rid in ids], write_errors),
            daemon=True,
        )
        writer.start()

        last_progress = time.monotonic()
        while outstanding:
            with self._cond:
                while not self._lines and not self._eof:
                    wait = None
                    if self.timeout is not None:
                        wait = self.timeout - (time.monotonic() - last_progress)
                        if wait <= 0:
                            oldest = min(outstanding)
                            self._kill()
                            raise OracleTimeout(
                                f"request {oldest}: no response within {self.timeout * 1000:.0f} ms",
                                oldest,
                            )
                    self._cond.wait(wait)
                lines, self._lines = self._lines, []
                eof = self._eof
            for line in lines:
                if not line.strip():
                    continue
                try:
                    rid, r, k, kind = _parse_response(line, outstanding)
                except ProtocolViolation:
                    self._kill()
                    raise
                row = row_of[rid]
                rho[row], kappa[row], kinds[row] = r, k, kind
                outstanding.discard(rid)
                self._completed += 1
                last_progress = time.monotonic()
            if eof and outstanding:
                oldest = min(outstanding)
                code = self._proc.poll() if self._proc else None
                raise ToolCrash(
                    f"tool exited (code {code}) after {self._completed} completed requests; "
                    f"request {oldest} unanswered",
                    oldest,
                    completed=self._completed,
                )
        writer.join()
        return rho, kappa, kinds

    def _kill(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()

    def query(self, x) -> tuple[OracleResult, float]:
        rho, kappa, kinds = self.query_many(np.asarray(x, dtype=np.float64)[None, :])
        return OracleResult(float(rho[0]), kinds[0]), float(kappa[0])


def external_oracle(command, x, timeout_ms: Optional[float] = None) -> tuple[OracleResult, float]:
    """One-shot query: launch the tool, ask about x, shut it down."""
    with ExternalOracle(command, timeout_ms) as oracle:
        return oracle.query(x)


def serve(evaluate: Callable[[Sequence[float]], tuple[float, float, str]], stdin=None, stdout=None) -> None:
    """Server loop for tool authors: answer each request line with
    ``evaluate(x) -> (rho, kappa, kind)`` until end of input."""
    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        rho, kappa, kind = evaluate(req["x"])
        stdout.write(json.dumps({"id": req["id"], "rho": rho, "kappa": kappa, "kind": kind}) + "\n")
        stdout.flush()

