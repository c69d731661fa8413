"""Timed network traces: (time, throughput, round-trip propagation delay) samples.

Trace files are whitespace-separated text, one sample per line::

    t_seconds bw_mbps [rtprop_seconds]

Legacy two-column files get a default RTprop. Lines starting with ``#`` are
comments.
"""

from __future__ import annotations

import bisect
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

DEFAULT_RTPROP = 0.080
TRAIN = "train"
TEST = "test"


class TraceError(ValueError):
    pass


class TraceSample(NamedTuple):
    t: float
    bw: float
    rtprop: float


@dataclass(frozen=True)
class TimedTrace:
    name: str
    samples: tuple[TraceSample, ...]

    def __post_init__(self):
        samples = tuple(TraceSample(float(s[0]), float(s[1]), float(s[2])) for s in self.samples)
        if not samples:
            raise TraceError(f"trace {self.name!r} has no samples")
        prev = -math.inf
        for i, s in enumerate(samples):
            if not (s.t >= 0 and math.isfinite(s.t)):
                raise TraceError(f"trace {self.name!r}: sample {i} has invalid time {s.t}")
            if s.t <= prev:
                raise TraceError(f"trace {self.name!r}: timestamps not strictly increasing at sample {i}")
            if not (s.bw > 0 and math.isfinite(s.bw)):
                raise TraceError(f"trace {self.name!r}: sample {i} has non-positive bandwidth {s.bw}")
            if not (s.rtprop >= 0 and math.isfinite(s.rtprop)):
                raise TraceError(f"trace {self.name!r}: sample {i} has negative rtprop {s.rtprop}")
            prev = s.t
        object.__setattr__(self, "samples", samples)
        # lookup tables for the simulator hot path
        times = [s.t for s in samples]
        if len(times) == 1:
            duration = times[0] + 1.0
        else:
            duration = times[-1] + (times[-1] - times[-2])
        object.__setattr__(self, "_times", times)
        object.__setattr__(self, "_ends", times[1:] + [duration])
        object.__setattr__(self, "_duration", duration)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        """Cyclic period: last timestamp plus the final inter-sample gap (1 s for one sample)."""
        return self._duration

    @property
    def times(self) -> np.ndarray:
        return np.array(self._times)

    @property
    def bandwidths(self) -> np.ndarray:
        return np.array([s.bw for s in self.samples])

    @property
    def rtprops(self) -> np.ndarray:
        return np.array([s.rtprop for s in self.samples])

    def segment(self, time: float) -> tuple[int, float]:
        """Index of the sample holding at absolute ``time`` and the absolute end of its hold."""
        cycle = math.floor(time / self._duration)
        local = time - cycle * self._duration
        i = bisect.bisect_right(self._times, local) - 1
        if i < 0:
            i = 0
        end = cycle * self._duration + self._ends[i]
        if end <= time:
            # local rounded onto a boundary
            i += 1
            if i == len(self._times):
                i = 0
                cycle += 1
            end = cycle * self._duration + self._ends[i]
        return i, end

    def mean_bw(self) -> float:
        """Time-weighted mean throughput over one period."""
        widths = np.diff(np.append(self.times, self.duration))
        return float(np.dot(widths, self.bandwidths) / self.duration)


def sample_at(trace: TimedTrace, time: float) -> TraceSample:
    if time < 0:
        raise ValueError(f"time must be >= 0, got {time}")
    i, _ = trace.segment(time)
    return trace.samples[i]


def parse_trace(text: str | Iterable[str], default_rtprop: float = DEFAULT_RTPROP,
                name: str = "trace") -> TimedTrace:
    lines = text.splitlines() if isinstance(text, str) else text
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (2, 3):
            raise TraceError(f"line {lineno}: expected 2 or 3 fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise TraceError(f"line {lineno}: non-numeric field in {line!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise TraceError(f"line {lineno}: non-finite value in {line!r}")
        if len(values) == 2:
            values.append(default_rtprop)
        if rows and values[0] <= rows[-1][0]:
            raise TraceError(f"line {lineno}: timestamp {values[0]} not after {rows[-1][0]}")
        rows.append(values)
    if not rows:
        raise TraceError("empty trace")
    t0 = rows[0][0]
    samples = [TraceSample(t - t0, bw, rt) for t, bw, rt in rows]
    try:
        return TimedTrace(name, tuple(samples))
    except TraceError as exc:
        raise TraceError(str(exc)) from None


def serialize_trace(trace: TimedTrace) -> str:
    # repr keeps the shortest string that round-trips exactly
    return "".join(f"{_fmt(s.t)} {_fmt(s.bw)} {_fmt(s.rtprop)}\n" for s in trace.samples)


def _fmt(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def load_trace(path: str | os.PathLike, default_rtprop: float = DEFAULT_RTPROP) -> TimedTrace:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_trace(f.read(), default_rtprop, name=path.stem)


def save_trace(trace: TimedTrace, path: str | os.PathLike) -> None:
    Path(path).write_text(serialize_trace(trace), encoding="utf-8", newline="\n")


def augment_rtprop(trace: TimedTrace, base: float = DEFAULT_RTPROP, noise_fraction: float = 0.10,
                   seed: int = 0) -> TimedTrace:
    """Replace every RTprop with an independent uniform draw in base*(1 +/- noise_fraction)."""
    if not base > 0:
        raise ValueError(f"base must be > 0, got {base}")
    if not 0 <= noise_fraction < 1:
        raise ValueError(f"noise_fraction must be in [0, 1), got {noise_fraction}")
    rng = np.random.default_rng(seed)
    n = len(trace)
    if noise_fraction == 0:
        rtprops = np.full(n, base)
    else:
        lo, hi = base * (1 - noise_fraction), base * (1 + noise_fraction)
        rtprops = np.clip(rng.uniform(lo, hi, n), lo, hi)
    samples = tuple(TraceSample(s.t, s.bw, float(r)) for s, r in zip(trace.samples, rtprops))
    return TimedTrace(trace.name, samples)


def constant_trace(bw: float, rtprop: float = DEFAULT_RTPROP, name: str = "constant") -> TimedTrace:
    return TimedTrace(name, (TraceSample(0.0, bw, rtprop),))


@dataclass
class Corpus:
    traces: list[TimedTrace]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [t.name for t in self.traces]
        if len(set(names)) != len(names):
            raise TraceError("corpus trace names must be unique")
        for name in names:
            self.split.setdefault(name, TRAIN)
        unknown = set(self.split) - set(names)
        if unknown:
            raise TraceError(f"split refers to unknown traces: {sorted(unknown)}")
        bad = {v for v in self.split.values()} - {TRAIN, TEST}
        if bad:
            raise TraceError(f"invalid split labels: {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.traces)

    @property
    def train(self) -> list[TimedTrace]:
        return [t for t in self.traces if self.split[t.name] == TRAIN]

    @property
    def test(self) -> list[TimedTrace]:
        return [t for t in self.traces if self.split[t.name] == TEST]


def split_corpus(corpus: Corpus, test_fraction: float = 0.2, seed: int = 0) -> Corpus:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(corpus.traces)
    if n < 2:
        raise TraceError(f"need at least 2 traces to split, got {n}")
    n_test = min(n - 1, max(1, round(test_fraction * n)))
    order = np.random.default_rng(seed).permutation(n)
    test_names = {corpus.traces[i].name for i in order[:n_test]}
    split = {t.name: TEST if t.name in test_names else TRAIN for t in corpus.traces}
    return Corpus(list(corpus.traces), split)


def save_corpus(corpus: Corpus, directory: str | os.PathLike) -> Path:
    """Write ``directory/{train,test}/<name>.trace``."""
    directory = Path(directory)
    for part in (TRAIN, TEST):
        (directory / part).mkdir(parents=True, exist_ok=True)
    for trace in corpus.traces:
        save_trace(trace, directory / corpus.split[trace.name] / f"{trace.name}.trace")
    return directory


def load_corpus(directory: str | os.PathLike, default_rtprop: float = DEFAULT_RTPROP) -> Corpus:
    directory = Path(directory)
    traces, split = [], {}
    for part in (TRAIN, TEST):
        for path in sorted((directory / part).glob("*.trace")):
            trace = load_trace(path, default_rtprop)
            traces.append(trace)
            split[trace.name] = part
    if not traces:
        raise TraceError(f"no traces under {directory}/{{train,test}}")
    return Corpus(traces, split)
