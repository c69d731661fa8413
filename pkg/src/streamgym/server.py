"""HTTP ABR decision service and a client driver that replays simulated sessions through it.

Wire format (JSON over HTTP/1.1)::

    POST /v1/decision
    {"session": "abc", "buffer_level_s": 7.5, "last_chunk_bytes": 600000,
     "last_download_s": 1.2, "last_rtprop_s": 0.08,
     "next_chunk_sizes_bytes": [...], "remaining_chunks": 40}
    -> {"session": "abc", "quality": 3}

    GET /healthz -> {"status": "ok", "model": "<fingerprint>", "version": "..."}

The ``last_*`` fields are null on a session's first request. The server keeps
the measurement history and the last chosen quality per session.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import __version__
from .abr import HISTORY, History, OracleAbr, algorithm_rng, session_seed
from .sim import SessionRun, SimConfig, SimState, VideoManifest, step
from .trace import TimedTrace

log = logging.getLogger(__name__)

SESSION_TTL = 600.0


class RequestError(ValueError):
    """Malformed decision request (answered with HTTP 400)."""


class DriveError(RuntimeError):
    def __init__(self, chunk: int, reason: str):
        super().__init__(f"chunk {chunk}: {reason}")
        self.chunk = chunk


@dataclass
class SessionRecord:
    session_id: str
    history: History
    rng: np.random.Generator
    chunks: int = 0
    created: float = field(default_factory=time.monotonic)
    last_seen: float = field(default_factory=time.monotonic)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def _number(payload, key, minimum=0.0, nullable=False, strict=False):
    value = payload.get(key)
    if value is None:
        if nullable:
            return None
        raise RequestError(f"missing field {key!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise RequestError(f"field {key!r} must be a finite number")
    if value < minimum or (strict and value == minimum):
        raise RequestError(f"field {key!r} out of range: {value}")
    return value


class DecisionService:
    """Transport-free core of the server: validates requests and keeps session state."""

    def __init__(self, algorithm, manifest: VideoManifest, seed: int = 0, history: int = HISTORY,
                 ttl: float = SESSION_TTL, model_fingerprint: str | None = None, clock=time.monotonic):
        if isinstance(algorithm, OracleAbr):
            raise ValueError("the oracle needs the whole trace and cannot be served")
        self.algorithm = algorithm
        self.manifest = manifest
        self.seed = seed
        self.history = history
        self.ttl = ttl
        self.clock = clock
        self.model_fingerprint = model_fingerprint or getattr(getattr(algorithm, "model", None),
                                                              "fingerprint", lambda: repr(algorithm))()
        self._sessions: dict[str, SessionRecord] = {}
        self._lock = threading.Lock()

    def health(self) -> dict:
        return {"status": "ok", "model": self.model_fingerprint, "version": __version__}

    @property
    def session_count(self) -> int:
        return len(self._sessions)

    def _record(self, session_id: str) -> SessionRecord:
        now = self.clock()
        with self._lock:
            stale = [k for k, r in self._sessions.items() if now - r.last_seen > self.ttl]
            for k in stale:
                del self._sessions[k]
            rec = self._sessions.get(session_id)
            if rec is None:
                rec = SessionRecord(session_id, History(self.history), algorithm_rng(self.seed, session_id),
                                    created=now, last_seen=now)
                self._sessions[session_id] = rec
            rec.last_seen = now
            return rec

    def parse(self, payload) -> dict:
        if not isinstance(payload, dict):
            raise RequestError("request body must be a JSON object")
        sid = payload.get("session")
        if not isinstance(sid, str) or not sid:
            raise RequestError("field 'session' must be a non-empty string")
        req = {"session": sid, "buffer_level_s": _number(payload, "buffer_level_s")}
        last = [_number(payload, "last_chunk_bytes", nullable=True, strict=True),
                _number(payload, "last_download_s", nullable=True, strict=True),
                _number(payload, "last_rtprop_s", nullable=True)]
        if any(v is None for v in last) and not all(v is None for v in last):
            raise RequestError("last_chunk_bytes, last_download_s and last_rtprop_s go together")
        req["last"] = None if last[0] is None else last
        sizes = payload.get("next_chunk_sizes_bytes")
        if (not isinstance(sizes, list) or len(sizes) != self.manifest.levels
                or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in sizes)):
            raise RequestError(f"next_chunk_sizes_bytes must list {self.manifest.levels} positive integers")
        req["sizes"] = sizes
        remaining = payload.get("remaining_chunks")
        if isinstance(remaining, bool) or not isinstance(remaining, int) or remaining < 1:
            raise RequestError("remaining_chunks must be a positive integer")
        req["remaining"] = remaining
        return req

    def handle_decision(self, payload) -> dict:
        req = self.parse(payload)
        rec = self._record(req["session"])
        with rec.lock:
            if rec.chunks >= self.manifest.chunk_count:
                raise RequestError(f"session {rec.session_id!r} already received {rec.chunks} decisions")
            if req["last"] is not None:
                rec.history.record(*req["last"])
            obs = rec.history.observation(req["buffer_level_s"], req["sizes"], req["remaining"],
                                          self.manifest.bitrates)
            quality = int(self.algorithm(obs, rec.rng))
            rec.history.last_quality = quality
            rec.chunks += 1
        return {"session": rec.session_id, "quality": quality}


def _make_handler(service: DecisionService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = f"streamgym/{__version__}"

        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, service.health())
            else:
                self._send(404, {"error": f"no route {self.path}"})

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            if self.path != "/v1/decision":
                self._send(404, {"error": f"no route {self.path}"})
                return
            try:
                payload = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError):
                self._send(400, {"error": "body is not valid JSON"})
                return
            try:
                self._send(200, service.handle_decision(payload))
            except RequestError as exc:
                self._send(400, {"error": str(exc)})

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


def make_server(service: DecisionService, host: str = "127.0.0.1", port: int = 8333) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _make_handler(service))
    server.daemon_threads = True
    return server


def start_background(service: DecisionService, host: str = "127.0.0.1", port: int = 0):
    """Serve on a daemon thread; returns (server, base_url). Port 0 picks a free port."""
    server = make_server(service, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    return server, f"http://{host}:{port}"


def _post(url: str, body: dict, timeout: float) -> dict:
    req = urllib.request.Request(url, data=json.dumps(body).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read())


def drive_session(endpoint: str, trace: TimedTrace, manifest: VideoManifest, sim_cfg: SimConfig,
                  session_id: str = "session", seed: int = 0, start_time: float = 0.0,
                  timeout: float = 10.0) -> SessionRun:
    """Client loop: ask the service before every chunk, then simulate its download."""
    url = endpoint.rstrip("/") + "/v1/decision"
    sim_rng = np.random.default_rng(session_seed(seed, session_id))
    state = SimState(wall_time=start_time)
    run = SessionRun(manifest)
    last = None
    for n in range(manifest.chunk_count):
        body = {"session": session_id, "buffer_level_s": state.buffer_level,
                "last_chunk_bytes": None, "last_download_s": None, "last_rtprop_s": None,
                "next_chunk_sizes_bytes": [row[n] for row in manifest.chunk_sizes],
                "remaining_chunks": manifest.chunk_count - n}
        if last is not None:
            body.update(last_chunk_bytes=last.chunk_size, last_download_s=last.download_time,
                        last_rtprop_s=last.rtprop_effective)
        try:
            reply = _post(url, body, timeout)
        except urllib.error.HTTPError as exc:
            raise DriveError(n, f"server answered {exc.code}: {exc.read().decode(errors='replace')}") from exc
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise DriveError(n, f"transport failure: {exc}") from exc
        q = reply.get("quality")
        if not isinstance(q, int) or not 0 <= q < manifest.levels:
            raise DriveError(n, f"invalid quality in reply {reply!r}")
        state, last = step(state, q, trace, manifest, sim_cfg, sim_rng)
        run.append(q, last)
    return run


def serve(service: DecisionService, host: str, port: int) -> None:
    server = make_server(service, host, port)
    log.info("serving ABR decisions on %s:%d", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
