"""Session QoE: utility of each chunk's bitrate, minus a rebuffering penalty,
minus the utility jump at every quality switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

HD_TABLE = {0.3: 1.0, 0.75: 2.0, 1.2: 3.0, 1.85: 12.0, 2.85: 15.0, 4.3: 20.0}
LINEAR_MU = 4.3
HD_MU = 8.0


class QoEError(ValueError):
    pass


@dataclass(frozen=True)
class Utility:
    kind: str = "linear"
    table: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("linear", "hd"):
            raise QoEError(f"unknown utility kind {self.kind!r}")
        if self.kind == "hd":
            if not self.table:
                object.__setattr__(self, "table", tuple(sorted(HD_TABLE.items())))
            table = tuple(sorted((float(r), float(v)) for r, v in dict(self.table).items()))
            values = [v for _, v in table]
            if any(b <= a for a, b in zip(values, values[1:])):
                raise QoEError("HD utility values must increase strictly with bitrate")
            object.__setattr__(self, "table", table)

    @classmethod
    def hd(cls, table: dict | None = None) -> "Utility":
        return cls("hd", tuple((table or HD_TABLE).items()))


def utility(rate: float, kind: Utility) -> float:
    if kind.kind == "linear":
        if not rate > 0:
            raise QoEError(f"bitrate must be > 0, got {rate}")
        return float(rate)
    for r, v in kind.table:
        if math.isclose(r, rate, rel_tol=1e-9, abs_tol=1e-12):
            return v
    raise QoEError(f"bitrate {rate} Mbps not in the HD utility table")


@dataclass(frozen=True)
class QoEConfig:
    utility: Utility = field(default_factory=Utility)
    mu: float = LINEAR_MU

    def __post_init__(self):
        if not self.mu >= 0:
            raise QoEError(f"mu must be >= 0, got {self.mu}")

    @classmethod
    def linear(cls, mu: float = LINEAR_MU) -> "QoEConfig":
        return cls(Utility("linear"), mu)

    @classmethod
    def hd(cls, mu: float = HD_MU, table: dict | None = None) -> "QoEConfig":
        return cls(Utility.hd(table), mu)

    @classmethod
    def from_name(cls, name: str, mu: float | None = None) -> "QoEConfig":
        name = name.lower()
        if name in ("linear", "lin"):
            return cls.linear() if mu is None else cls.linear(mu)
        if name == "hd":
            return cls.hd() if mu is None else cls.hd(mu)
        raise QoEError(f"unknown QoE metric {name!r}")

    @property
    def name(self) -> str:
        return self.utility.kind

    def for_ladder(self, bitrates: Sequence[float], quality_values: Sequence[float]) -> "QoEConfig":
        """HD config whose table is the manifest's own quality values; linear unchanged."""
        if self.utility.kind == "linear":
            return self
        return QoEConfig(Utility.hd(dict(zip(bitrates, quality_values))), self.mu)


@dataclass
class SessionLog:
    entries: list[tuple[float, float]]  # (bitrate Mbps, rebuffer s)

    def __post_init__(self):
        self.entries = [(float(r), float(t)) for r, t in self.entries]
        for r, t in self.entries:
            if t < 0:
                raise QoEError(f"negative rebuffer time {t}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def chunk_reward(prev_rate: float | None, rate: float, rebuffer: float, cfg: QoEConfig) -> float:
    if rebuffer < 0:
        raise QoEError(f"negative rebuffer time {rebuffer}")
    q = utility(rate, cfg.utility)
    smooth = 0.0 if prev_rate is None else abs(q - utility(prev_rate, cfg.utility))
    return q - cfg.mu * rebuffer - smooth


def session_qoe(log: SessionLog | Iterable[tuple[float, float]], cfg: QoEConfig) -> float:
    entries = log.entries if isinstance(log, SessionLog) else list(log)
    if not entries:
        raise QoEError("empty session log")
    qs = [utility(r, cfg.utility) for r, _ in entries]
    total_util = sum(qs)
    total_rebuf = sum(t for _, t in entries)
    switches = sum(abs(b - a) for a, b in zip(qs, qs[1:]))
    return total_util - cfg.mu * total_rebuf - switches


def chunk_rewards(log: SessionLog, cfg: QoEConfig) -> list[float]:
    out, prev = [], None
    for rate, rebuf in log:
        out.append(chunk_reward(prev, rate, rebuf, cfg))
        prev = rate
    return out
