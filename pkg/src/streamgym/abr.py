"""ABR decision algorithms and the session loop that feeds them.

Every algorithm is a callable ``(Observation, rng) -> quality index``.
"""

from __future__ import annotations

import math
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .qoe import QoEConfig, chunk_reward, session_qoe
from .sim import SessionRun, SimConfig, SimState, Variant, VideoManifest, step
from .trace import TimedTrace

HISTORY = 8
MAX_EXHAUSTIVE_HORIZON = 9


@dataclass(frozen=True)
class Observation:
    throughput_history: tuple[float, ...]  # Mbps, oldest first, zero-padded at the front
    download_time_history: tuple[float, ...]
    buffer_level: float
    next_chunk_sizes: tuple[int, ...]
    remaining_chunks: int
    last_quality: int | None
    rtprop_last: float
    bitrates: tuple[float, ...]

    @property
    def levels(self) -> int:
        return len(self.bitrates)


class History:
    """Bounded per-session measurement history; shared by in-process runs and the server."""

    def __init__(self, k: int = HISTORY):
        self.k = k
        self.throughput = deque([0.0] * k, maxlen=k)
        self.download = deque([0.0] * k, maxlen=k)
        self.rtprop_last = 0.0
        self.last_quality: int | None = None

    def record(self, chunk_bytes: int, download_s: float, rtprop_s: float, quality: int | None = None) -> None:
        self.throughput.append(chunk_bytes * 8 / download_s / 1e6)
        self.download.append(download_s)
        self.rtprop_last = rtprop_s
        if quality is not None:
            self.last_quality = quality

    def observation(self, buffer_level: float, next_chunk_sizes: Sequence[int], remaining_chunks: int,
                    bitrates: Sequence[float]) -> Observation:
        return Observation(tuple(self.throughput), tuple(self.download), float(buffer_level),
                           tuple(int(s) for s in next_chunk_sizes), int(remaining_chunks),
                           self.last_quality, float(self.rtprop_last), tuple(bitrates))


class Algorithm(Protocol):
    def __call__(self, obs: Observation, rng: np.random.Generator) -> int: ...


def decide_fixed(obs: Observation, q: int) -> int:
    return q


def harmonic_mean(values: Sequence[float]) -> float:
    vals = [v for v in values if v > 0]
    if not vals:
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


def decide_rate_based(obs: Observation, safety: float = 0.9) -> int:
    if not 0 < safety <= 1:
        raise ValueError(f"safety must be in (0, 1], got {safety}")
    budget = harmonic_mean(obs.throughput_history) * safety
    choice = 0
    for i, rate in enumerate(obs.bitrates):
        # relative slack absorbs rounding in the harmonic mean
        if rate <= budget * (1 + 1e-9):
            choice = i
    return choice


def decide_buffer_based(obs: Observation, reservoir: float = 5.0, cushion: float = 10.0) -> int:
    if not cushion > 0:
        raise ValueError(f"cushion must be > 0, got {cushion}")
    top = obs.levels - 1
    frac = (obs.buffer_level - reservoir) / cushion
    return int(min(top, max(0, math.floor(frac * top))))


@dataclass
class FixedAbr:
    quality: int

    def __call__(self, obs, rng=None):
        if not 0 <= self.quality < obs.levels:
            raise ValueError(f"fixed quality {self.quality} outside ladder")
        return decide_fixed(obs, self.quality)


@dataclass
class RateAbr:
    safety: float = 0.9

    def __call__(self, obs, rng=None):
        return decide_rate_based(obs, self.safety)


@dataclass
class BufferAbr:
    reservoir: float = 5.0
    cushion: float = 10.0

    def __call__(self, obs, rng=None):
        return decide_buffer_based(obs, self.reservoir, self.cushion)


@dataclass
class SequenceAbr:
    """Replays a precomputed quality sequence (oracle plans)."""

    qualities: Sequence[int]
    _i: int = field(default=0, repr=False)

    def __call__(self, obs, rng=None):
        q = self.qualities[self._i]
        self._i += 1
        return q


@dataclass
class OracleAbr:
    """Marker for the offline-optimal planner; evaluation plans per trace."""

    mode: str = "dp"
    horizon: int | None = None


def session_seed(seed: int, session_id: str) -> list[int]:
    """Seed material for one session's simulator stream."""
    return [int(seed), zlib.crc32(session_id.encode())]


def algorithm_rng(seed: int, session_id: str) -> np.random.Generator:
    """Decision stream of one session; the server derives it the same way."""
    return np.random.default_rng(session_seed(seed, session_id) + [1])


def run_session(algorithm: Algorithm, trace: TimedTrace, manifest: VideoManifest, cfg: SimConfig,
                sim_rng: np.random.Generator | None = None, alg_rng: np.random.Generator | None = None,
                start_time: float = 0.0, history: int = HISTORY) -> SessionRun:
    """Play one full session, asking ``algorithm`` before every chunk."""
    if sim_rng is None:
        sim_rng = np.random.default_rng(0)
    state = SimState(wall_time=start_time)
    hist = History(history)
    run = SessionRun(manifest)
    for n in range(manifest.chunk_count):
        obs = hist.observation(state.buffer_level, [row[n] for row in manifest.chunk_sizes],
                               manifest.chunk_count - n, manifest.bitrates)
        q = int(algorithm(obs, alg_rng))
        if not 0 <= q < manifest.levels:
            raise ValueError(f"algorithm returned invalid quality {q}")
        state, res = step(state, q, trace, manifest, cfg, sim_rng)
        hist.record(res.chunk_size, res.download_time, res.rtprop_effective, q)
        run.append(q, res)
    return run


def _deterministic(cfg: SimConfig) -> SimConfig:
    return SimConfig(Variant.SIM_T, cfg.fixed_rtprop, cfg.noise_fraction, cfg.packet_size,
                     cfg.buffer_capacity, 0.0)


def _oracle_inputs(manifest, sim_cfg, qoe_cfg, horizon):
    if horizon is not None:
        manifest = manifest.truncated(horizon)
    qoe_cfg = qoe_cfg.for_ladder(manifest.bitrates, manifest.quality_values)
    return manifest, _deterministic(sim_cfg), qoe_cfg


def replay_qoe(qualities: Sequence[int], trace: TimedTrace, manifest: VideoManifest, sim_cfg: SimConfig,
               qoe_cfg: QoEConfig, start_time: float = 0.0) -> float:
    run = run_session(SequenceAbr(list(qualities)), trace, manifest, sim_cfg, start_time=start_time)
    return session_qoe(run.log(), qoe_cfg)


def _exhaustive(trace, manifest, cfg, qoe_cfg, start_time):
    levels, n_chunks = manifest.levels, manifest.chunk_count
    best = [-math.inf, None]
    seq = [0] * n_chunks

    def dfs(state: SimState, n: int, acc: float, prev_rate):
        if n == n_chunks:
            if acc > best[0]:
                best[0], best[1] = acc, list(seq)
            return
        for q in range(levels):
            nxt, res = step(state, q, trace, manifest, cfg)
            rate = manifest.bitrates[q]
            seq[n] = q
            dfs(nxt, n + 1, acc + chunk_reward(prev_rate, rate, res.rebuffer_time, qoe_cfg), rate)

    dfs(SimState(wall_time=start_time), 0, 0.0, None)
    return best[1], best[0]


def _dp(trace, manifest, cfg, qoe_cfg, start_time, cell, alternatives):
    # frontier: (last quality, buffer cell) -> [(qoe so far, exact state, sequence), ...]
    # Each cell keeps its best-QoE state plus up to ``alternatives - 1`` lower-QoE
    # states that download earlier or hold more buffer. After a stall the buffer
    # is exactly one chunk, so very different wall times share a cell.
    frontier = {(None, 0): [(0.0, SimState(wall_time=start_time), ())]}
    for n in range(manifest.chunk_count):
        candidates = {}
        for (last, _), entries in frontier.items():
            prev_rate = None if last is None else manifest.bitrates[last]
            for acc, state, seq in entries:
                for q in range(manifest.levels):
                    ns, res = step(state, q, trace, manifest, cfg)
                    value = acc + chunk_reward(prev_rate, manifest.bitrates[q], res.rebuffer_time, qoe_cfg)
                    key = (q, int(round(ns.buffer_level / cell)))
                    candidates.setdefault(key, []).append((value, ns, seq + (q,)))
        frontier = {}
        for key, entries in candidates.items():
            entries.sort(key=lambda e: (-e[0], -e[1].buffer_level, e[1].wall_time))
            kept = []
            for e in entries:
                if all(e[1].wall_time < k[1].wall_time or e[1].buffer_level > k[1].buffer_level for k in kept):
                    kept.append(e)
                    if len(kept) == alternatives:
                        break
            frontier[key] = kept
    value, _, seq = max((e for entries in frontier.values() for e in entries), key=lambda e: e[0])
    return list(seq), value


def offline_optimal(trace: TimedTrace, manifest: VideoManifest, sim_cfg: SimConfig, qoe_cfg: QoEConfig,
                    horizon: int | None = None, mode: str = "exhaustive", buffer_cell: float = 0.1,
                    start_time: float = 0.0, alternatives: int = 2) -> tuple[list[int], float]:
    """Best quality sequence for the first ``horizon`` chunks under noise-free SIM_T.

    ``exhaustive`` enumerates every sequence (depth-first, sharing prefixes).
    ``dp`` groups states by (last quality, buffer rounded to ``buffer_cell``) and
    keeps at most ``alternatives`` non-dominated states per group; its result is a feasible sequence, so its QoE
    never exceeds the exhaustive optimum.
    """
    n = manifest.chunk_count if horizon is None else horizon
    manifest, cfg, qoe_cfg = _oracle_inputs(manifest, sim_cfg, qoe_cfg, horizon)
    if mode == "exhaustive":
        if n > MAX_EXHAUSTIVE_HORIZON:
            raise ValueError(f"exhaustive mode supports at most {MAX_EXHAUSTIVE_HORIZON} chunks, got {n}")
        return _exhaustive(trace, manifest, cfg, qoe_cfg, start_time)
    if mode == "dp":
        if alternatives < 1:
            raise ValueError(f"alternatives must be >= 1, got {alternatives}")
        seq, _ = _dp(trace, manifest, cfg, qoe_cfg, start_time, buffer_cell, alternatives)
        # report the exact QoE of the returned sequence, not the merged estimate
        return seq, replay_qoe(seq, trace, manifest, cfg, qoe_cfg, start_time)
    raise ValueError(f"unknown oracle mode {mode!r}")


def parse_algorithm(text: str, manifest: VideoManifest | None = None, greedy: bool = True) -> Callable:
    """Build an algorithm from ``fixed:<i>``, ``rate``, ``buffer``, ``policy:<file>`` or ``oracle``."""
    kind, _, arg = text.partition(":")
    if kind == "fixed":
        try:
            q = int(arg)
        except ValueError:
            raise ValueError(f"fixed needs an integer quality, got {arg!r}") from None
        if manifest is not None and not 0 <= q < manifest.levels:
            raise ValueError(f"fixed quality {q} outside ladder of {manifest.levels}")
        return FixedAbr(q)
    if kind == "rate":
        return RateAbr(float(arg) if arg else 0.9)
    if kind == "buffer":
        if arg:
            reservoir, _, cushion = arg.partition(",")
            return BufferAbr(float(reservoir), float(cushion))
        return BufferAbr()
    if kind == "policy":
        from .learn import PolicyAbr, load_model
        if not arg:
            raise ValueError("policy needs a model file: policy:<path>")
        return PolicyAbr(load_model(arg), greedy=greedy)
    if kind == "oracle":
        return OracleAbr(arg or "dp")
    raise ValueError(f"unknown algorithm {text!r}")
