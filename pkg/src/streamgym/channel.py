"""Fluid models of a single flow over one bottleneck, emitted as timed traces.

Two congestion-control families are modeled:

* ``LOSS_BASED``: CUBIC window growth, multiplicative decrease on any loss
  (random per-packet loss or bottleneck queue overflow).
* ``MODEL_BASED``: paces at the bottleneck rate and keeps the queue empty;
  random loss costs only the lost packets, never the sending rate.

The flow is simulated round by round (one round = one RTT) and the delivered
bits and queuing delay are accumulated into fixed-width ticks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .trace import Corpus, TimedTrace, TraceSample

CUBIC_C = 0.4
CUBIC_BETA = 0.7
INITIAL_WINDOW = 10.0
MIN_WINDOW = 2.0


class CcaKind(enum.Enum):
    LOSS_BASED = "loss"
    MODEL_BASED = "model"

    @classmethod
    def parse(cls, text: str) -> "CcaKind":
        aliases = {"loss": cls.LOSS_BASED, "cubic": cls.LOSS_BASED, "loss_based": cls.LOSS_BASED,
                   "model": cls.MODEL_BASED, "bbr": cls.MODEL_BASED, "model_based": cls.MODEL_BASED}
        try:
            return aliases[text.lower()]
        except KeyError:
            raise ValueError(f"unknown congestion control kind {text!r}") from None


@dataclass(frozen=True)
class ChannelConfig:
    btlbw: float  # Mbps
    rtprop: float = 0.080  # s
    buffer_bdp: float = 0.1
    loss_rate: float = 0.0
    mss: int = 1500
    cubic_c: float = CUBIC_C
    cubic_beta: float = CUBIC_BETA

    def __post_init__(self):
        if not self.btlbw > 0:
            raise ValueError(f"btlbw must be > 0, got {self.btlbw}")
        if not self.rtprop > 0:
            raise ValueError(f"rtprop must be > 0, got {self.rtprop}")
        if not self.buffer_bdp >= 0:
            raise ValueError(f"buffer_bdp must be >= 0, got {self.buffer_bdp}")
        if not 0 <= self.loss_rate < 1:
            raise ValueError(f"loss_rate must be in [0, 1), got {self.loss_rate}")
        if not self.mss > 0:
            raise ValueError(f"mss must be > 0, got {self.mss}")
        if not (self.cubic_c > 0 and 0 < self.cubic_beta < 1):
            raise ValueError("cubic constants out of range")

    @property
    def bdp_packets(self) -> float:
        return self.btlbw * 1e6 * self.rtprop / (8 * self.mss)


def cubic_window(t: float, w_max: float, c: float = CUBIC_C, beta: float = CUBIC_BETA) -> float:
    """CUBIC window ``t`` seconds after a reduction from ``w_max`` (packets)."""
    return c * (t - cubic_k(w_max, c, beta)) ** 3 + w_max


def cubic_k(w_max: float, c: float = CUBIC_C, beta: float = CUBIC_BETA) -> float:
    return (w_max * (1 - beta) / c) ** (1 / 3)


class _TickAccumulator:
    def __init__(self, n_ticks: int, granularity: float):
        self.granularity = granularity
        self.bits = np.zeros(n_ticks)
        self.qdelay_time = np.zeros(n_ticks)
        self.n = n_ticks

    def add(self, start: float, length: float, bitrate: float, qdelay: float) -> None:
        """Spread a constant-rate interval over the ticks it overlaps."""
        end = start + length
        i = int(start // self.granularity)
        while i < self.n and start < end:
            tick_end = (i + 1) * self.granularity
            span = min(end, tick_end) - start
            if span > 0:
                self.bits[i] += bitrate * span
                self.qdelay_time[i] += qdelay * span
            start = tick_end
            i += 1


def _loss_based(cfg: ChannelConfig, n_ticks: int, granularity: float,
                rng: np.random.Generator) -> _TickAccumulator:
    acc = _TickAccumulator(n_ticks, granularity)
    horizon = n_ticks * granularity
    link = cfg.btlbw * 1e6
    pkt_bits = 8.0 * cfg.mss
    bdp = cfg.bdp_packets
    qcap = cfg.buffer_bdp * bdp
    p = cfg.loss_rate

    now = 0.0
    w = INITIAL_WINDOW
    w_max = 0.0
    epoch = 0.0
    slow_start = True
    while now < horizon:
        overflow = w > bdp + qcap
        inflight = min(w, bdp + qcap)
        queue = max(0.0, inflight - bdp)
        qdelay = queue * pkt_bits / link
        rtt = cfg.rtprop + qdelay
        rate = min(link, inflight * pkt_bits / rtt)
        acc.add(now, rtt, rate * (1 - p), qdelay)
        sent = rate * rtt / pkt_bits
        random_loss = p > 0 and rng.random() < 1.0 - (1.0 - p) ** sent
        now += rtt
        if overflow or random_loss:
            w_max = w
            w = max(cfg.cubic_beta * w, MIN_WINDOW)
            epoch = now
            slow_start = False
        elif slow_start:
            w *= 2.0
        else:
            w = max(cubic_window(now - epoch, w_max, cfg.cubic_c, cfg.cubic_beta), MIN_WINDOW)
    return acc


def generate_trace(cfg: ChannelConfig, cca: CcaKind, duration: float = 300.0, granularity: float = 1.0,
                   seed: int = 0, name: str | None = None) -> TimedTrace:
    if not granularity > 0:
        raise ValueError(f"granularity must be > 0, got {granularity}")
    if duration < granularity:
        raise ValueError(f"duration {duration} shorter than granularity {granularity}")
    n_ticks = int(round(duration / granularity))
    if name is None:
        name = f"{cca.value}_{cfg.btlbw:g}mbps_seed{seed}"
    times = [i * granularity for i in range(n_ticks)]
    if cca is CcaKind.MODEL_BASED:
        bw = cfg.btlbw * (1.0 - cfg.loss_rate)
        samples = tuple(TraceSample(t, bw, cfg.rtprop) for t in times)
        return TimedTrace(name, samples)

    acc = _loss_based(cfg, n_ticks, granularity, np.random.default_rng(seed))
    samples = []
    for i, t in enumerate(times):
        bw = min(acc.bits[i] / granularity / 1e6, cfg.btlbw)
        # a tick with no delivered bits can only happen for absurd configs
        bw = max(bw, 1e-6)
        samples.append(TraceSample(t, bw, cfg.rtprop + acc.qdelay_time[i] / granularity))
    return TimedTrace(name, tuple(samples))


def generate_dash_corpus(levels=(3.0, 3.5, 4.0, 4.5), rtprop: float = 0.080,
                         cca: CcaKind = CcaKind.MODEL_BASED, repetitions: int = 25,
                         duration: float = 300.0, seed: int = 0, loss_rate: float = 0.0,
                         buffer_bdp: float = 0.1, granularity: float = 1.0) -> Corpus:
    """``repetitions`` traces per bottleneck level, all in the train split."""
    levels = list(levels)
    if not levels:
        raise ValueError("levels must be non-empty")
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    seeds = np.random.SeedSequence(seed).spawn(len(levels) * repetitions)
    traces = []
    for li, level in enumerate(levels):
        cfg = ChannelConfig(btlbw=level, rtprop=rtprop, buffer_bdp=buffer_bdp, loss_rate=loss_rate)
        for r in range(repetitions):
            child = int(seeds[li * repetitions + r].generate_state(1)[0])
            name = f"{cca.value}_{level:g}mbps_r{r:02d}"
            traces.append(generate_trace(cfg, cca, duration, granularity, child, name=name))
    return Corpus(traces)
