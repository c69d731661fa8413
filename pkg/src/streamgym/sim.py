"""Chunk-level DASH download simulation.

``SIM_O`` adds a fixed RTprop to the trace-driven transmission delay and then
scales the total by uniform noise. ``SIM_T`` replays the timed trace packet by
packet: every packet is sent at the throughput holding at its send time, and
the chunk's RTprop is half the request RTprop plus the largest response
half-RTprop.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .trace import TimedTrace, sample_at

DEFAULT_BITRATES = (0.3, 0.75, 1.2, 1.85, 2.85, 4.3)
DEFAULT_QUALITY_VALUES = (1, 2, 3, 12, 15, 20)
DEFAULT_CHUNK_DURATION = 4.0
DEFAULT_TOTAL_LENGTH = 193.0
LOG_FIELDS = ("chunk", "quality", "bitrate_mbps", "download_s", "dtrans_s", "rtprop_s",
              "rebuffer_s", "sleep_s", "buffer_s")


class SimError(RuntimeError):
    pass


class Variant(enum.Enum):
    SIM_O = "o"
    SIM_T = "t"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.lower().replace("-", "_")
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        raise ValueError(f"unknown simulator variant {text!r}")


@dataclass(frozen=True)
class VideoManifest:
    bitrates: tuple[float, ...]
    chunk_durations: tuple[float, ...]
    chunk_sizes: tuple[tuple[int, ...], ...]  # [quality][chunk], bytes
    quality_values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "bitrates", tuple(float(b) for b in self.bitrates))
        object.__setattr__(self, "chunk_durations", tuple(float(d) for d in self.chunk_durations))
        object.__setattr__(self, "chunk_sizes", tuple(tuple(int(s) for s in row) for row in self.chunk_sizes))
        object.__setattr__(self, "quality_values", tuple(self.quality_values))
        if not self.bitrates:
            raise ValueError("empty bitrate ladder")
        if any(b <= a for a, b in zip(self.bitrates, self.bitrates[1:])):
            raise ValueError("bitrates must be strictly increasing")
        if len(self.quality_values) != len(self.bitrates):
            raise ValueError("quality_values must match the bitrate ladder")
        if len(self.chunk_sizes) != len(self.bitrates):
            raise ValueError("chunk_sizes needs one row per quality")
        n = len(self.chunk_durations)
        if n == 0 or any(d <= 0 for d in self.chunk_durations):
            raise ValueError("chunk durations must be positive")
        for row in self.chunk_sizes:
            if len(row) != n or any(s <= 0 for s in row):
                raise ValueError("chunk_sizes rows must be positive and cover every chunk")
        for lo, hi in zip(self.chunk_sizes, self.chunk_sizes[1:]):
            if any(b <= a for a, b in zip(lo, hi)):
                raise ValueError("chunk sizes must strictly increase with quality")

    @property
    def chunk_count(self) -> int:
        return len(self.chunk_durations)

    @property
    def levels(self) -> int:
        return len(self.bitrates)

    @property
    def chunk_duration(self) -> float:
        return self.chunk_durations[0]

    @property
    def total_length(self) -> float:
        return sum(self.chunk_durations)

    def truncated(self, chunks: int) -> "VideoManifest":
        if not 1 <= chunks <= self.chunk_count:
            raise ValueError(f"cannot truncate {self.chunk_count} chunks to {chunks}")
        return replace(self, chunk_durations=self.chunk_durations[:chunks],
                       chunk_sizes=tuple(row[:chunks] for row in self.chunk_sizes))

    def to_json(self) -> dict:
        return {
            "chunk_duration_s": self.chunk_duration,
            "total_length_s": self.total_length,
            "bitrates_mbps": list(self.bitrates),
            "quality_values": list(self.quality_values),
            "chunk_sizes_bytes": [list(row) for row in self.chunk_sizes],
        }

    @classmethod
    def from_json(cls, data: dict) -> "VideoManifest":
        dur = float(data["chunk_duration_s"])
        total = float(data["total_length_s"])
        sizes = data["chunk_sizes_bytes"]
        durations = _chunk_durations(dur, total)
        if len(durations) != len(sizes[0]):
            raise ValueError("chunk_sizes_bytes does not match chunk_duration_s/total_length_s")
        return cls(tuple(data["bitrates_mbps"]), durations, tuple(tuple(r) for r in sizes),
                   tuple(data["quality_values"]))

    def fingerprint(self) -> str:
        import hashlib
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _chunk_durations(chunk_duration: float, total_length: float) -> tuple[float, ...]:
    count = math.ceil(total_length / chunk_duration - 1e-9)
    last = total_length - (count - 1) * chunk_duration
    return (chunk_duration,) * (count - 1) + (last,)


def make_manifest(bitrates=DEFAULT_BITRATES, chunk_duration: float = DEFAULT_CHUNK_DURATION,
                  total_length: float = DEFAULT_TOTAL_LENGTH, quality_values=None,
                  vbr: float = 0.15, seed: int = 0) -> VideoManifest:
    """Synthetic manifest: size = bitrate * duration / 8 scaled by a per-chunk VBR factor.

    The factor is drawn once per chunk from [1 - vbr, 1 + vbr] and shared by every
    quality, so sizes stay strictly increasing along the ladder.
    """
    bitrates = tuple(float(b) for b in bitrates)
    if quality_values is None:
        quality_values = DEFAULT_QUALITY_VALUES if len(bitrates) == len(DEFAULT_QUALITY_VALUES) \
            else tuple(range(1, len(bitrates) + 1))
    durations = _chunk_durations(chunk_duration, total_length)
    if vbr:
        factors = np.random.default_rng(seed).uniform(1 - vbr, 1 + vbr, len(durations))
    else:
        factors = np.ones(len(durations))
    sizes = tuple(tuple(int(round(b * 1e6 * d / 8 * f)) for d, f in zip(durations, factors))
                  for b in bitrates)
    return VideoManifest(bitrates, durations, sizes, tuple(quality_values))


def load_manifest(path: str | os.PathLike) -> VideoManifest:
    return VideoManifest.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def save_manifest(manifest: VideoManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1), encoding="utf-8")


@dataclass(frozen=True)
class SimConfig:
    variant: Variant = Variant.SIM_T
    fixed_rtprop: float = 0.080
    noise_fraction: float = 0.10
    packet_size: int = 1500
    buffer_capacity: float = 60.0
    loss_rate: float = 0.0

    def __post_init__(self):
        if not self.packet_size > 0:
            raise ValueError("packet_size must be > 0")
        if not 0 <= self.noise_fraction < 1:
            raise ValueError("noise_fraction must be in [0, 1)")
        if not self.buffer_capacity > 0:
            raise ValueError("buffer_capacity must be > 0")
        if not 0 <= self.loss_rate < 1:
            raise ValueError("loss_rate must be in [0, 1)")
        if not self.fixed_rtprop >= 0:
            raise ValueError("fixed_rtprop must be >= 0")


@dataclass(frozen=True)
class SimState:
    wall_time: float = 0.0
    buffer_level: float = 0.0
    next_chunk: int = 0
    last_quality: int | None = None


@dataclass(frozen=True)
class StepResult:
    download_time: float
    dtrans: float
    rtprop_effective: float
    rebuffer_time: float
    sleep_time: float
    buffer_after: float
    chunk_size: int
    done: bool
    startup_time: float = 0.0
    noise_factor: float = 1.0
    packets: int = 0


def chunk_rtprop(request_rtprop: float, response_rtprops) -> float:
    """Half the request RTprop plus the largest response half-RTprop."""
    responses = list(response_rtprops) if not isinstance(response_rtprops, np.ndarray) else response_rtprops
    if len(responses) == 0:
        raise ValueError("at least one response RTprop is required")
    return request_rtprop / 2 + max(responses) / 2


def packet_runs(chunk_size: int, packet_size: int) -> list[tuple[int, int]]:
    """(count, size) runs splitting a chunk into full packets plus a short tail."""
    if chunk_size <= 0:
        raise ValueError("chunk_size must be > 0")
    full, tail = divmod(int(chunk_size), int(packet_size))
    runs = []
    if full:
        runs.append((full, int(packet_size)))
    if tail:
        runs.append((1, tail))
    return runs


def transmit(trace: TimedTrace, start_time: float, runs) -> tuple[float, float, list[tuple[int, float]]]:
    """Send packet runs back to back starting at ``start_time``.

    Each packet uses the throughput holding at its own send time, so the next
    packet leaves after this one's transmission delay. Packets sharing a trace
    segment are batched. Returns (dtrans, max rtprop, [(packets, rtprop), ...]).
    """
    samples = trace.samples
    tau = start_time
    dtrans = 0.0
    max_rt = 0.0
    groups = []
    for count, size in runs:
        bits = 8.0 * size
        remaining = count
        while remaining:
            i, end = trace.segment(tau)
            s = samples[i]
            per_packet = bits / (s.bw * 1e6)
            k = math.ceil((end - tau) / per_packet)
            k = 1 if k < 1 else (remaining if k > remaining else k)
            elapsed = k * per_packet
            tau += elapsed
            dtrans += elapsed
            remaining -= k
            if s.rtprop > max_rt:
                max_rt = s.rtprop
            groups.append((k, s.rtprop))
    return dtrans, max_rt, groups


def chunk_dtrans(chunk_size: int, packet_size: int, trace: TimedTrace,
                 start_time: float = 0.0) -> tuple[float, np.ndarray]:
    """Sum of per-packet transmission delays and the RTprop seen by each packet."""
    dtrans, _, groups = transmit(trace, start_time, packet_runs(chunk_size, packet_size))
    counts = [k for k, _ in groups]
    rts = [r for _, r in groups]
    return dtrans, np.repeat(np.array(rts), counts)


def _lossy_runs(chunk_size: int, packet_size: int, loss_rate: float,
                rng: np.random.Generator) -> list[tuple[int, int]]:
    runs = packet_runs(chunk_size, packet_size)
    if loss_rate <= 0:
        return runs
    # each lost transmission is re-sent at the end; retransmissions can be lost too
    extra = [(int(rng.negative_binomial(count, 1 - loss_rate)), size) for count, size in runs]
    return runs + [r for r in extra if r[0]]


def step(state: SimState, quality: int, trace: TimedTrace, manifest: VideoManifest, cfg: SimConfig,
         rng: np.random.Generator | None = None) -> tuple[SimState, StepResult]:
    n = state.next_chunk
    if n >= manifest.chunk_count:
        raise SimError("session already finished")
    if not 0 <= quality < manifest.levels:
        raise SimError(f"quality {quality} outside ladder of {manifest.levels}")
    size = manifest.chunk_sizes[quality][n]
    t0 = state.wall_time
    u = 1.0
    if cfg.variant is Variant.SIM_T:
        runs = _lossy_runs(size, cfg.packet_size, cfg.loss_rate, rng) if cfg.loss_rate > 0 \
            else packet_runs(size, cfg.packet_size)
        dtrans, max_rt, _ = transmit(trace, t0, runs)
        rtprop = sample_at(trace, t0).rtprop / 2 + max_rt / 2
        download = dtrans + rtprop
    else:
        dtrans, _, _ = transmit(trace, t0, packet_runs(size, cfg.packet_size))
        rtprop = cfg.fixed_rtprop
        if cfg.noise_fraction > 0:
            if rng is None:
                raise SimError("SIM_O needs a random generator for its delay noise")
            u = rng.uniform(1 - cfg.noise_fraction, 1 + cfg.noise_fraction)
        download = (dtrans + rtprop) * u
        runs = packet_runs(size, cfg.packet_size)

    startup = 0.0
    if state.last_quality is None:
        rebuffer = 0.0
        startup = max(0.0, download - state.buffer_level)
    else:
        rebuffer = max(0.0, download - state.buffer_level)
    buffer = max(state.buffer_level - download, 0.0) + manifest.chunk_durations[n]
    sleep = 0.0
    if buffer > cfg.buffer_capacity:
        sleep = buffer - cfg.buffer_capacity
        buffer = cfg.buffer_capacity
    nxt = SimState(wall_time=t0 + download + sleep, buffer_level=buffer, next_chunk=n + 1,
                   last_quality=quality)
    result = StepResult(download_time=download, dtrans=dtrans, rtprop_effective=rtprop,
                        rebuffer_time=rebuffer, sleep_time=sleep, buffer_after=buffer, chunk_size=size,
                        done=n + 1 == manifest.chunk_count, startup_time=startup, noise_factor=u,
                        packets=sum(c for c, _ in runs))
    return nxt, result


@dataclass
class SessionRun:
    """Qualities chosen and step results of one simulated session."""

    manifest: VideoManifest
    qualities: list[int] = field(default_factory=list)
    steps: list[StepResult] = field(default_factory=list)

    def append(self, quality: int, result: StepResult) -> None:
        self.qualities.append(quality)
        self.steps.append(result)

    @property
    def bitrates(self) -> list[float]:
        return [self.manifest.bitrates[q] for q in self.qualities]

    def log(self):
        from .qoe import SessionLog
        return SessionLog([(self.manifest.bitrates[q], s.rebuffer_time)
                           for q, s in zip(self.qualities, self.steps)])

    def rows(self) -> list[dict]:
        return [{"chunk": i, "quality": q, "bitrate_mbps": self.manifest.bitrates[q],
                 "download_s": s.download_time, "dtrans_s": s.dtrans, "rtprop_s": s.rtprop_effective,
                 "rebuffer_s": s.rebuffer_time, "sleep_s": s.sleep_time, "buffer_s": s.buffer_after}
                for i, (q, s) in enumerate(zip(self.qualities, self.steps))]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return out.getvalue()

    @property
    def wall_time(self) -> float:
        return sum(s.download_time + s.sleep_time for s in self.steps)
