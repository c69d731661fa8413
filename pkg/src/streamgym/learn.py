"""Desk-scale advantage actor-critic for ABR policies.

The actor and the critic are separate one-hidden-layer ReLU networks over the
same normalized observation vector. Training follows the usual advantage
actor-critic losses with an entropy bonus whose weight decays on a staircase
from ``start`` to ``end``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .abr import HISTORY, History, Observation
from .qoe import QoEConfig, chunk_reward
from .sim import SessionRun, SimConfig, SimState, VideoManifest, step
from .trace import Corpus, TimedTrace

log = logging.getLogger(__name__)

MODEL_VERSION = "sgym-policy-v1"
ACTOR_KEYS = ("W1", "b1", "W2", "b2")
CRITIC_KEYS = ("V1", "c1", "V2", "c2")
CURVE_FIELDS = ("iteration", "mean_reward", "entropy_weight", "loss_actor", "loss_critic")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class EntropySchedule:
    start: float = 1.0
    end: float = 0.1
    step: float = 0.01
    total_iterations: int = 100_000

    def __post_init__(self):
        if not (self.start >= self.end > 0):
            raise ValueError("entropy schedule needs start >= end > 0")
        if not self.step > 0:
            raise ValueError("entropy schedule step must be > 0")
        if not self.total_iterations > 0:
            raise ValueError("total_iterations must be > 0")

    @property
    def n_steps(self) -> int:
        return int(round((self.start - self.end) / self.step))


def entropy_weight(iteration: int, sched: EntropySchedule = EntropySchedule()) -> float:
    """Staircase decay: one ``step`` drop every ``total_iterations / n_steps`` iterations."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration >= sched.total_iterations:
        return sched.end
    done = (iteration * sched.n_steps) // sched.total_iterations
    # round away accumulated binary error of start - k*step
    return max(sched.end, round(sched.start - sched.step * done, 12))


@dataclass
class Normalization:
    top_rate: float
    buffer_capacity: float
    download_scale: float
    chunk_count: int
    rtprop_scale: float = 0.1
    use_rtprop: bool = True


@dataclass
class PolicyModel:
    bitrates: tuple[float, ...]
    history: int
    norm: Normalization
    params: dict[str, np.ndarray]
    version: str = MODEL_VERSION

    @property
    def levels(self) -> int:
        return len(self.bitrates)

    @property
    def n_inputs(self) -> int:
        return feature_size(self.history, self.levels)

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.bitrates, self.history, self.norm,
                           {k: v.copy() for k, v in self.params.items()}, self.version)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "bitrates_mbps": list(self.bitrates),
            "history": self.history,
            "normalization": vars(self.norm),
            "layers": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolicyModel":
        if data.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {data.get('version')!r}")
        params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in data["layers"].items()}
        missing = set(ACTOR_KEYS + CRITIC_KEYS) - set(params)
        if missing:
            raise ValueError(f"model file lacks layers {sorted(missing)}")
        model = cls(tuple(data["bitrates_mbps"]), int(data["history"]), Normalization(**data["normalization"]),
                    params, data["version"])
        if params["W1"].shape[0] != model.n_inputs:
            raise ValueError("model input layer does not match its ladder/history")
        return model

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def feature_size(history: int, levels: int) -> int:
    return 2 * history + 2 * levels + 3


def init_model(manifest: VideoManifest, sim_cfg: SimConfig, hidden: int = 64, seed: int = 0,
               history: int = HISTORY, zero: bool = False, use_rtprop: bool = True) -> PolicyModel:
    levels = manifest.levels
    n_in = feature_size(history, levels)
    norm = Normalization(top_rate=max(manifest.bitrates), buffer_capacity=sim_cfg.buffer_capacity,
                         download_scale=manifest.chunk_duration, chunk_count=manifest.chunk_count,
                         use_rtprop=use_rtprop)
    rng = np.random.default_rng(seed)
    if zero:
        params = {"W1": np.zeros((n_in, hidden)), "b1": np.zeros(hidden), "W2": np.zeros((hidden, levels)),
                  "b2": np.zeros(levels), "V1": np.zeros((n_in, hidden)), "c1": np.zeros(hidden),
                  "V2": np.zeros((hidden, 1)), "c2": np.zeros(1)}
    else:
        he = math.sqrt(2.0 / n_in)
        params = {"W1": rng.normal(0, he, (n_in, hidden)), "b1": np.zeros(hidden),
                  "W2": rng.normal(0, 0.01, (hidden, levels)), "b2": np.zeros(levels),
                  "V1": rng.normal(0, he, (n_in, hidden)), "c1": np.zeros(hidden),
                  "V2": rng.normal(0, 0.01, (hidden, 1)), "c2": np.zeros(1)}
    return PolicyModel(tuple(manifest.bitrates), history, norm, params)


def features(model: PolicyModel, obs: Observation) -> np.ndarray:
    norm = model.norm
    if len(obs.throughput_history) != model.history or obs.levels != model.levels:
        raise ValueError("observation shape does not match the model")
    sizes = np.asarray(obs.next_chunk_sizes, dtype=float)
    last = np.zeros(model.levels)
    if obs.last_quality is not None:
        last[obs.last_quality] = 1.0
    x = np.concatenate([
        np.asarray(obs.throughput_history) / norm.top_rate,
        np.asarray(obs.download_time_history) / norm.download_scale,
        [obs.buffer_level / norm.buffer_capacity],
        sizes / sizes.max(),
        [obs.remaining_chunks / norm.chunk_count],
        last,
        [obs.rtprop_last / norm.rtprop_scale if norm.use_rtprop else 0.0],
    ])
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite observation")
    return x


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _actor_logits(params, X):
    pre = X @ params["W1"] + params["b1"]
    h = np.maximum(pre, 0.0)
    return h @ params["W2"] + params["b2"], pre, h


def _critic_values(params, X):
    pre = X @ params["V1"] + params["c1"]
    h = np.maximum(pre, 0.0)
    return (h @ params["V2"] + params["c2"])[..., 0], pre, h


def policy_forward(model: PolicyModel, obs: Observation | np.ndarray) -> tuple[np.ndarray, float]:
    x = obs if isinstance(obs, np.ndarray) else features(model, obs)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite observation")
    z, _, _ = _actor_logits(model.params, x)
    probs = np.exp(_log_softmax(z))
    value, _, _ = _critic_values(model.params, x)
    return probs, float(value)


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse CDF with one uniform draw, so every caller consumes the stream identically
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


@dataclass
class PolicyAbr:
    model: PolicyModel
    greedy: bool = True

    def __call__(self, obs: Observation, rng: np.random.Generator | None = None) -> int:
        probs, _ = policy_forward(self.model, obs)
        if self.greedy:
            return int(np.argmax(probs))
        if rng is None:
            raise ValueError("stochastic policy needs a random generator")
        return sample_index(probs, rng)


@dataclass
class Trajectory:
    X: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def rollout(trace: TimedTrace, manifest: VideoManifest, model: PolicyModel, sim_cfg: SimConfig,
            qoe_cfg: QoEConfig, seed: int | np.random.Generator = 0,
            start_time: float = 0.0) -> tuple[Trajectory, SessionRun]:
    """One full session with actions sampled from the policy; rewards are per-chunk QoE."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    qoe_cfg = qoe_cfg.for_ladder(manifest.bitrates, manifest.quality_values)
    state = SimState(wall_time=start_time)
    hist = History(model.history)
    run = SessionRun(manifest)
    xs, acts, rewards = [], [], []
    prev_rate = None
    for n in range(manifest.chunk_count):
        obs = hist.observation(state.buffer_level, [row[n] for row in manifest.chunk_sizes],
                               manifest.chunk_count - n, manifest.bitrates)
        x = features(model, obs)
        probs, _ = policy_forward(model, x)
        q = sample_index(probs, rng)
        state, res = step(state, q, trace, manifest, sim_cfg, rng)
        hist.record(res.chunk_size, res.download_time, res.rtprop_effective, q)
        rate = manifest.bitrates[q]
        rewards.append(chunk_reward(prev_rate, rate, res.rebuffer_time, qoe_cfg))
        prev_rate = rate
        xs.append(x)
        acts.append(q)
        run.append(q, res)
    return Trajectory(np.array(xs), np.array(acts), np.array(rewards)), run


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def actor_loss_and_grad(params, X, actions, advantages, entropy_w):
    """-sum log pi(a|s) * A - entropy_w * sum H(pi(.|s)), with A held constant."""
    z, pre, h = _actor_logits(params, X)
    logp = _log_softmax(z)
    p = np.exp(logp)
    T = len(actions)
    ent = -(p * logp).sum(axis=1)
    loss = -np.sum(logp[np.arange(T), actions] * advantages) - entropy_w * ent.sum()
    onehot = np.zeros_like(p)
    onehot[np.arange(T), actions] = 1.0
    dz = -advantages[:, None] * (onehot - p) + entropy_w * p * (logp + ent[:, None])
    dh = dz @ params["W2"].T
    dpre = dh * (pre > 0)
    grads = {"W2": h.T @ dz, "b2": dz.sum(axis=0), "W1": X.T @ dpre, "b1": dpre.sum(axis=0)}
    return float(loss), grads, float(ent.mean())


def critic_loss_and_grad(params, X, returns):
    """sum (G - V(s))^2."""
    v, pre, h = _critic_values(params, X)
    err = returns - v
    loss = float(np.sum(err ** 2))
    dv = (-2.0 * err)[:, None]
    dh = dv @ params["V2"].T
    dpre = dh * (pre > 0)
    grads = {"V2": h.T @ dv, "c2": dv.sum(axis=0), "V1": X.T @ dpre, "c1": dpre.sum(axis=0)}
    return loss, grads


@dataclass
class Gradients:
    grads: dict[str, np.ndarray]
    loss_actor: float
    loss_critic: float
    entropy: float

    def finite(self) -> bool:
        return (math.isfinite(self.loss_actor) and math.isfinite(self.loss_critic)
                and all(np.all(np.isfinite(g)) for g in self.grads.values()))


def compute_gradients(traj: Trajectory, model: PolicyModel, gamma: float, entropy_w: float) -> Gradients:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    params = model.params
    returns = discounted_returns(traj.rewards, gamma)
    # overflow shows up as a non-finite loss, which the caller turns into TrainingDiverged
    with np.errstate(over="ignore", invalid="ignore"):
        values, _, _ = _critic_values(params, traj.X)
        advantages = returns - values
        la, ga, ent = actor_loss_and_grad(params, traj.X, traj.actions, advantages, entropy_w)
        lc, gc = critic_loss_and_grad(params, traj.X, returns)
    out = Gradients({**ga, **gc}, la, lc, ent)
    if not (math.isfinite(la) and math.isfinite(lc)):
        raise FloatingPointError("non-finite loss")
    return out


class Adam:
    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = lrs
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[k] -= self.lrs[k] * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    iterations: int = 5000
    workers: int = 1
    gamma: float = 0.99
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    seed: int = 0
    qoe: QoEConfig = field(default_factory=QoEConfig.linear)
    sim: SimConfig = field(default_factory=SimConfig)
    hidden: int = 64
    reward_scale: float | None = None  # None: 1 / utility of the top rung
    random_start: bool = True
    checkpoint_every: int = 0
    out_dir: str | None = None
    use_rtprop: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not self.iterations > 0:
            raise ValueError("iterations must be > 0")
        if not self.workers >= 1:
            raise ValueError("workers must be >= 1")


def _reward_scale(cfg: TrainConfig, manifest: VideoManifest) -> float:
    if cfg.reward_scale is not None:
        return cfg.reward_scale
    q = cfg.qoe.for_ladder(manifest.bitrates, manifest.quality_values)
    from .qoe import utility
    return 1.0 / utility(manifest.bitrates[-1], q.utility)


def _episode(model, trace, manifest, cfg, scale, entropy_w, rng):
    start = rng.uniform(0, trace.duration) if cfg.random_start else 0.0
    traj, run = rollout(trace, manifest, model, cfg.sim, cfg.qoe, rng, start)
    mean_reward = float(traj.rewards.mean())
    scaled = Trajectory(traj.X, traj.actions, traj.rewards * scale)
    return compute_gradients(scaled, model, cfg.gamma, entropy_w), mean_reward


_WORKER: dict = {}


def _worker_init(traces, manifest, cfg, scale):
    _WORKER.update(traces=traces, manifest=manifest, cfg=cfg, scale=scale)


def _worker_task(model, trace_idx, entropy_w, seed):
    rng = np.random.default_rng(seed)
    w = _WORKER
    return _episode(model, w["traces"][trace_idx], w["manifest"], w["cfg"], w["scale"], entropy_w, rng)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def save_model(model: PolicyModel, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), json.dumps(model.to_json()))


def load_model(path: str | os.PathLike) -> PolicyModel:
    with open(path, encoding="utf-8") as f:
        return PolicyModel.from_json(json.load(f))


@dataclass
class TrainResult:
    model: PolicyModel
    curve: list[dict]


def train(corpus: Corpus | Sequence[TimedTrace], manifest: VideoManifest, cfg: TrainConfig = TrainConfig(),
          sched: EntropySchedule | None = None, model: PolicyModel | None = None) -> TrainResult:
    """Train a policy on the corpus' training split.

    Each iteration draws one training trace per worker, rolls out a session
    against a snapshot of the model, and applies the resulting gradients one
    at a time in arrival order. With one worker everything runs in-process
    and the result is a pure function of ``cfg.seed``.
    """
    traces = corpus.train if isinstance(corpus, Corpus) else list(corpus)
    if not traces:
        raise ValueError("empty training split")
    if sched is None:
        sched = EntropySchedule()
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = init_model(manifest, cfg.sim, cfg.hidden, seed=cfg.seed, use_rtprop=cfg.use_rtprop)
    else:
        model = model.copy()
    lrs = {k: cfg.lr_actor for k in ACTOR_KEYS} | {k: cfg.lr_critic for k in CRITIC_KEYS}
    opt = Adam(lrs)
    scale = _reward_scale(cfg, manifest)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    curve: list[dict] = []

    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                   initargs=(traces, manifest, cfg, scale))
    try:
        for it in range(cfg.iterations):
            w = entropy_weight(it, sched)
            if pool is None:
                trace = traces[int(rng.integers(len(traces)))]
                results = [_episode(model, trace, manifest, cfg, scale, w, rng)]
            else:
                snapshot = model.copy()
                futures = [pool.submit(_worker_task, snapshot, int(rng.integers(len(traces))), w,
                                       int(rng.integers(2 ** 63))) for _ in range(cfg.workers)]
                results = [f.result() for f in as_completed(futures)]
            rewards, la, lc = [], [], []
            for grads, mean_reward in results:
                if not grads.finite():
                    raise TrainingDiverged(it)
                opt.apply(model.params, grads.grads)
                rewards.append(mean_reward)
                la.append(grads.loss_actor)
                lc.append(grads.loss_critic)
            if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                raise TrainingDiverged(it, "weights")
            curve.append({"iteration": it, "mean_reward": float(np.mean(rewards)), "entropy_weight": w,
                          "loss_actor": float(np.mean(la)), "loss_critic": float(np.mean(lc))})
            if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_model(model, out_dir / f"checkpoint_{it + 1:06d}.json")
                log.info("iteration %d mean reward %.3f entropy weight %.2f", it + 1,
                         np.mean([c["mean_reward"] for c in curve[-cfg.checkpoint_every:]]), w)
    except FloatingPointError:
        raise TrainingDiverged(it) from None
    finally:
        if pool is not None:
            pool.shutdown()
    if out_dir:
        save_model(model, out_dir / "model.json")
        write_curve(curve, out_dir / "curve.csv")
    return TrainResult(model, curve)


def write_curve(curve: list[dict], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, CURVE_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(curve)
