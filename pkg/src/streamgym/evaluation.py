"""Evaluate ABR algorithms over a corpus' test split and compare the reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .abr import OracleAbr, SequenceAbr, algorithm_rng, offline_optimal, run_session, session_seed
from .qoe import QoEConfig, session_qoe
from .sim import SimConfig, VideoManifest
from .trace import Corpus, TimedTrace

REPORT_FIELDS = ("trace", "seed", "session_qoe", "mean_bitrate_mbps", "total_rebuffer_s", "switch_count")
PERCENTILES = (5, 25, 50, 75, 95)


class EvalError(RuntimeError):
    pass


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def fingerprint(*parts) -> str:
    blob = json.dumps([_plain(p) for p in parts], sort_keys=True, default=repr).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    name: str
    rows: list[dict]
    manifest_fingerprint: str
    config_fingerprint: str
    chunk_count: int
    qoe_values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r["trace"], r["seed"]))
        self.qoe_values = np.array([r["session_qoe"] for r in self.rows])

    @property
    def keys(self) -> list[tuple[str, int]]:
        return [(r["trace"], r["seed"]) for r in self.rows]

    @property
    def mean(self) -> float:
        return float(self.qoe_values.mean())

    @property
    def median(self) -> float:
        return self.percentile(50)

    def percentile(self, p: float) -> float:
        # inverted-CDF percentiles are actual samples, so they sit on the empirical CDF
        return float(np.percentile(self.qoe_values, p, method="inverted_cdf"))

    @property
    def percentiles(self) -> dict[int, float]:
        return {p: self.percentile(p) for p in PERCENTILES}

    def cdf(self) -> list[tuple[float, float]]:
        xs = np.sort(self.qoe_values)
        n = len(xs)
        return [(float(x), (i + 1) / n) for i, x in enumerate(xs)]

    @property
    def mean_bitrate(self) -> float:
        return float(np.mean([r["mean_bitrate_mbps"] for r in self.rows]))

    @property
    def mean_rebuffer_per_chunk(self) -> float:
        return float(np.mean([r["total_rebuffer_s"] for r in self.rows])) / self.chunk_count

    def summary(self) -> dict:
        return {
            "name": self.name,
            "sessions": len(self.rows),
            "mean_qoe": self.mean,
            "median_qoe": self.median,
            "mean_qoe_per_chunk": self.mean / self.chunk_count,
            "percentiles": {str(k): v for k, v in self.percentiles.items()},
            "min_qoe": float(self.qoe_values.min()),
            "max_qoe": float(self.qoe_values.max()),
            "mean_bitrate_mbps": self.mean_bitrate,
            "mean_rebuffer_per_chunk_s": self.mean_rebuffer_per_chunk,
            "cdf": self.cdf(),
            "manifest_fingerprint": self.manifest_fingerprint,
            "config_fingerprint": self.config_fingerprint,
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return out.getvalue()

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=1), encoding="utf-8")
        return out


def _one_session(algorithm, trace: TimedTrace, manifest, sim_cfg, qoe_cfg, seed, random_start):
    sim_rng = np.random.default_rng(session_seed(seed, trace.name))
    alg_rng = algorithm_rng(seed, trace.name)
    start = float(sim_rng.uniform(0, trace.duration)) if random_start else 0.0
    try:
        if isinstance(algorithm, OracleAbr):
            plan, _ = offline_optimal(trace, manifest, sim_cfg, qoe_cfg, horizon=algorithm.horizon,
                                      mode=algorithm.mode, start_time=start)
            algorithm = SequenceAbr(plan)
        run = run_session(algorithm, trace, manifest, sim_cfg, sim_rng, alg_rng, start_time=start)
    except Exception as exc:
        raise EvalError(f"trace {trace.name!r} seed {seed}: {exc}") from exc
    rates = run.bitrates
    return {
        "trace": trace.name,
        "seed": int(seed),
        "session_qoe": session_qoe(run.log(), qoe_cfg),
        "mean_bitrate_mbps": float(np.mean(rates)),
        "total_rebuffer_s": float(sum(s.rebuffer_time for s in run.steps)),
        "switch_count": int(sum(a != b for a, b in zip(run.qualities, run.qualities[1:]))),
    }


def _session_task(args):
    return _one_session(*args)


def evaluate(algorithm, corpus: Corpus | Sequence[TimedTrace], manifest: VideoManifest, sim_cfg: SimConfig,
             qoe_cfg: QoEConfig, seeds: Sequence[int] = (0,), name: str | None = None,
             random_start: bool = True, workers: int = 1) -> EvalReport:
    """One session per (test trace, seed); each seed also picks the session's start offset."""
    traces = corpus.test if isinstance(corpus, Corpus) else list(corpus)
    if not traces:
        raise EvalError("empty test split")
    qoe_cfg = qoe_cfg.for_ladder(manifest.bitrates, manifest.quality_values)
    jobs = [(algorithm, t, manifest, sim_cfg, qoe_cfg, s, random_start) for t in traces for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_session_task, jobs))
    else:
        rows = [_one_session(*job) for job in jobs]
    if name is None:
        name = type(algorithm).__name__
    cfg_fp = fingerprint(manifest.to_json(), sim_cfg, qoe_cfg, list(seeds), random_start,
                         sorted(t.name for t in traces), repr(algorithm)[:200])
    return EvalReport(name, rows, manifest.fingerprint(), cfg_fp, manifest.chunk_count)


@dataclass
class PairwiseDiff:
    a: str
    b: str
    diff: float  # mean(a) - mean(b)
    ci_low: float
    ci_high: float
    paired: bool

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0


@dataclass
class Comparison:
    rows: list[dict]
    diffs: list[PairwiseDiff]

    def diff(self, a: str, b: str) -> PairwiseDiff:
        for d in self.diffs:
            if (d.a, d.b) == (a, b):
                return d
            if (d.a, d.b) == (b, a):
                return PairwiseDiff(a, b, -d.diff, -d.ci_high, -d.ci_low, d.paired)
        raise KeyError((a, b))

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, ("name", "mean", "median", "p5", "p95", "relative_to_best"),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        out.write("\n")
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(("a", "b", "mean_diff", "ci95_low", "ci95_high", "paired"))
        for d in self.diffs:
            writer.writerow((d.a, d.b, d.diff, d.ci_low, d.ci_high, d.paired))
        return out.getvalue()


def bootstrap_diff(a: np.ndarray, b: np.ndarray, paired: bool, resamples: int = 10_000,
                   seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Mean difference a - b with a percentile bootstrap confidence interval."""
    rng = np.random.default_rng(seed)
    a, b = np.asarray(a, float), np.asarray(b, float)
    if paired:
        d = a - b
        idx = rng.integers(0, len(d), (resamples, len(d)))
        stats = d[idx].mean(axis=1)
    else:
        ia = rng.integers(0, len(a), (resamples, len(a)))
        ib = rng.integers(0, len(b), (resamples, len(b)))
        stats = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    return float(a.mean() - b.mean()), float(lo), float(hi)


def compare(reports: Sequence[EvalReport], resamples: int = 10_000, seed: int = 0) -> Comparison:
    if len(reports) < 2:
        raise EvalError("compare needs at least two reports")
    fps = {r.manifest_fingerprint for r in reports}
    if len(fps) != 1:
        raise EvalError("reports were produced with different manifests")
    best = max(r.mean for r in reports)
    rows = [{"name": r.name, "mean": r.mean, "median": r.median, "p5": r.percentile(5),
             "p95": r.percentile(95), "relative_to_best": r.mean / best if best else float("nan")}
            for r in reports]
    diffs = []
    for i, ra in enumerate(reports):
        for rb in reports[i + 1:]:
            paired = ra.keys == rb.keys
            d, lo, hi = bootstrap_diff(ra.qoe_values, rb.qoe_values, paired, resamples, seed)
            diffs.append(PairwiseDiff(ra.name, rb.name, d, lo, hi, paired))
    return Comparison(rows, diffs)
