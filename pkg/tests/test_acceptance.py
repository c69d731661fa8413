"""Acceptance criteria 1-13, one test each; every test prints a PASS/FAIL line."""

import time
import urllib.request

import numpy as np
import pytest

from streamgym.abr import algorithm_rng, offline_optimal, run_session, session_seed
from streamgym.channel import CcaKind
from streamgym.evaluation import compare
from streamgym.experiments import CcaProtocol, cca_experiment
from streamgym.learn import (EntropySchedule, PolicyAbr, TrainConfig, actor_loss_and_grad, critic_loss_and_grad,
                             discounted_returns, entropy_weight, init_model, rollout, train)
from streamgym.qoe import HD_TABLE, QoEConfig, SessionLog, chunk_rewards, session_qoe, utility, Utility
from streamgym.server import DecisionService, drive_session, start_background
from streamgym.sim import (SimConfig, SimState, Variant, VideoManifest, chunk_dtrans, chunk_rtprop, make_manifest,
                           step)
from streamgym.trace import TimedTrace, TraceSample, augment_rtprop, constant_trace, parse_trace, serialize_trace

from conftest import random_trace, verdict


def test_c01_transmission_delay_per_packet():
    t0 = time.perf_counter()
    tr = constant_trace(15.0)
    five, _ = chunk_dtrans(5 * 1500, 1500, tr)
    two, _ = chunk_dtrans(2 * 1500, 1500, tr)
    elapsed = time.perf_counter() - t0
    ok = abs(five - 0.004) <= 1e-9 * 0.004 and abs(two - 0.0016) <= 1e-9 * 0.0016 and elapsed < 1
    verdict(1, "dtrans of 1500 B packets at 15 Mbps", ok, f"5 pkts {five * 1e3:.12f} ms, 2 pkts {two * 1e3:.12f} ms")


def test_c02_chunk_rtprop():
    t0 = time.perf_counter()
    got = chunk_rtprop(0.005, [0.005, 0.008, 0.005])
    ok = abs(got - 0.0065) <= 1e-9 and time.perf_counter() - t0 < 1
    verdict(2, "RTprop of request 5 ms, responses 5/8/5 ms", ok, f"{got * 1e3:.12f} ms")


def test_c03_hd_table_and_decomposition():
    table = {0.3: 1, 0.75: 2, 1.2: 3, 1.85: 12, 2.85: 15, 4.3: 20}
    mapping_ok = all(utility(r, Utility.hd()) == v for r, v in table.items()) and HD_TABLE == table
    example = session_qoe([(4.3, 0.0), (1.85, 0.5)], QoEConfig.hd(8.0))
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        rates = rng.choice(sorted(table), n)
        rebuf = rng.exponential(1.0, n) * (rng.random(n) < 0.3)
        cfg = QoEConfig.hd() if rng.random() < 0.5 else QoEConfig.linear()
        log = SessionLog(list(zip(rates, rebuf)))
        q = np.array([utility(r, cfg.utility) for r in rates])
        identity = q.sum() - cfg.mu * rebuf.sum() - np.abs(np.diff(q)).sum()
        total = session_qoe(log, cfg)
        worst = max(worst, abs(total - identity), abs(sum(chunk_rewards(log, cfg)) - total))
    ok = mapping_ok and example == 20 and worst < 1e-9
    verdict(3, "HD utility mapping, HD example, decomposition on 1000 logs", ok,
            f"example {example}, max identity error {worst:.2e}")


def test_c04_sim_t_closed_form():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        size = int(rng.integers(1_000, 5_000_000))
        bw = float(rng.uniform(0.2, 50))
        rt = float(rng.uniform(0.005, 0.3))
        m = VideoManifest((1.0,), (4.0,), ((size,),), (1,))
        _, res = step(SimState(), 0, constant_trace(bw, rt), m, SimConfig(Variant.SIM_T))
        want = size * 8 / (bw * 1e6) + rt
        worst = max(worst, abs(res.download_time - want) / want)
    verdict(4, "SIM-T download = size*8/B + R on 100 constant traces", worst <= 1e-9, f"max rel err {worst:.2e}")


def test_c05_sim_o_noise_envelope():
    m = make_manifest()
    cfg = SimConfig(Variant.SIM_O)
    rng = np.random.default_rng(5)
    factors, inside = [], True
    tr = random_trace(5, n=100)
    state = SimState()
    for i in range(10_000):
        if state.next_chunk == m.chunk_count:
            state = SimState(wall_time=state.wall_time)
        state, res = step(state, i % m.levels, tr, m, cfg, rng)
        base = res.dtrans + 0.08
        inside &= 0.9 * base - 1e-12 <= res.download_time <= 1.1 * base + 1e-12
        factors.append(res.download_time / base)
    mean = float(np.mean(factors))
    verdict(5, "SIM-O delay within +/-10% of dtrans + 80 ms; mean factor ~ 1", inside and abs(mean - 1) < 0.01,
            f"{len(factors)} steps, mean factor {mean:.5f}, range [{min(factors):.4f}, {max(factors):.4f}]")


def test_c06_entropy_schedule():
    s = EntropySchedule()
    w = np.array([entropy_weight(i, s) for i in range(0, 100_001)])
    ok = (w[0] == 1.0 and w[100_000] == 0.1 and w[50_000] == 0.55 and np.all(np.diff(w) <= 0)
          and w.min() >= 0.1 and w.max() <= 1.0 and entropy_weight(250_000, s) == 0.1)
    verdict(6, "entropy weight staircase 1.0 -> 0.1", ok,
            f"w(0)={w[0]}, w(50000)={w[50_000]}, w(100000)={w[100_000]}, {len(np.unique(w))} levels")


def _central(loss_fn, params, keys, eps=1e-6):
    grads = {}
    for k in keys:
        g = np.zeros_like(params[k])
        flat, gflat = params[k].reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        grads[k] = g
    return grads


def test_c07_gradient_check():
    t0 = time.perf_counter()
    m = make_manifest().truncated(6)
    sim, qoe = SimConfig(Variant.SIM_O), QoEConfig.hd()
    worst = 0.0
    for k in range(20):
        model = init_model(m, sim, hidden=16, seed=k)
        rng = np.random.default_rng(k)
        for key in model.params:
            model.params[key] = model.params[key] + rng.normal(0, 0.3, model.params[key].shape)
        traj, _ = rollout(random_trace(k), m, model, sim, qoe, seed=k)
        rewards = traj.rewards / 20
        returns = discounted_returns(rewards, 0.99)
        p = model.params
        from streamgym.learn import _critic_values
        adv = returns - _critic_values(p, traj.X)[0]
        w = float(rng.uniform(0, 1))
        _, ga, _ = actor_loss_and_grad(p, traj.X, traj.actions, adv, w)
        fa = _central(lambda: actor_loss_and_grad(p, traj.X, traj.actions, adv, w)[0], p, ("W1", "b1", "W2", "b2"))
        _, gc = critic_loss_and_grad(p, traj.X, returns)
        fc = _central(lambda: critic_loss_and_grad(p, traj.X, returns)[0], p, ("V1", "c1", "V2", "c2"))
        for analytic, numeric in ((ga, fa), (gc, fc)):
            for key in numeric:
                a, n = analytic[key], numeric[key]
                worst = max(worst, np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))
    elapsed = time.perf_counter() - t0
    verdict(7, "actor/critic gradients vs central differences on 20 trajectories", worst < 1e-4 and elapsed < 30,
            f"max rel err {worst:.2e}, {elapsed:.1f} s")


def test_c08_oracle_cross_validation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    ladder = (0.3, 0.75, 1.2, 1.85, 2.85, 4.3)
    worst_gap, above = 0.0, 0.0
    for i in range(50):
        rungs = tuple(sorted(rng.choice(ladder, 3, replace=False)))
        chunks = int(rng.integers(3, 9))
        m = make_manifest(rungs, 4.0, 4.0 * chunks, quality_values=[HD_TABLE[r] for r in rungs], seed=i)
        tr = random_trace(1000 + i, n=int(rng.integers(5, 40)), lo=0.2, hi=5.0, step=float(rng.uniform(0.5, 3)))
        qoe = QoEConfig.hd() if i % 2 else QoEConfig.linear()
        _, ex = offline_optimal(tr, m, SimConfig(), qoe, mode="exhaustive")
        _, dp = offline_optimal(tr, m, SimConfig(), qoe, mode="dp")
        above = max(above, dp - ex)
        worst_gap = max(worst_gap, (ex - dp) / abs(ex))
    elapsed = time.perf_counter() - t0
    ok = worst_gap <= 0.02 and above <= 1e-9 and elapsed < 120
    verdict(8, "DP oracle within 2% of exhaustive on 50 instances", ok,
            f"worst gap {worst_gap:.4%}, max excess {above:.1e}, {elapsed:.1f} s")


def test_c09_learning_sanity():
    t0 = time.perf_counter()
    m = make_manifest((0.3, 1.2, 2.85), 4.0, 32.0, seed=1)
    sim, qoe = SimConfig(), QoEConfig.linear()
    rng = np.random.default_rng(0)
    # every bandwidth sits strictly between the 1.2 and 2.85 Mbps rungs
    train_set = [constant_trace(b, 0.08, name=f"train{i}") for i, b in enumerate(rng.uniform(1.4, 2.6, 40))]
    held_out = [constant_trace(b, 0.08, name=f"test{i}") for i, b in enumerate(rng.uniform(1.4, 2.6, 10))]
    iterations = 5000
    cfg = TrainConfig(iterations=iterations, workers=1, lr_actor=1e-3, seed=0, qoe=qoe, sim=sim, random_start=False)
    model = train(train_set, m, cfg, EntropySchedule(total_iterations=iterations)).model
    policy = PolicyAbr(model)
    learned = [session_qoe(run_session(policy, tr, m, sim).log(), qoe) for tr in held_out]
    oracle = [offline_optimal(tr, m, sim, qoe, mode="exhaustive")[1] for tr in held_out]
    ratio = sum(learned) / sum(oracle)
    elapsed = time.perf_counter() - t0
    verdict(9, "trained policy reaches >= 90% of exhaustive oracle QoE_lin", ratio >= 0.9 and elapsed < 600,
            f"ratio {ratio:.3f} (policy {np.mean(learned):.2f} vs oracle {np.mean(oracle):.2f} per session), "
            f"{elapsed:.0f} s")


@pytest.mark.slow
def test_c10_model_based_beats_loss_based_under_random_loss():
    proto = CcaProtocol(loss_rate=0.02, iterations=1500)
    reports = cca_experiment(proto, pairs=[(CcaKind.MODEL_BASED, CcaKind.MODEL_BASED),
                                           (CcaKind.LOSS_BASED, CcaKind.LOSS_BASED)])
    model, loss = reports[CcaKind.MODEL_BASED, CcaKind.MODEL_BASED], reports[CcaKind.LOSS_BASED, CcaKind.LOSS_BASED]
    d = compare([model, loss]).diff(model.name, loss.name)
    n_traces = len({t for t, _ in model.keys})
    ok = d.diff > 0 and d.ci_low > 0 and n_traces >= 20 and len(proto.train_seeds) >= 5
    verdict(10, "2% loss: MODEL_BASED corpora give higher trained-policy QoE_HD", ok,
            f"{model.mean:.1f} vs {loss.mean:.1f}, diff {d.diff:.1f}, 95% CI [{d.ci_low:.1f}, {d.ci_high:.1f}], "
            f"{n_traces} traces x {len(proto.train_seeds)} seeds")


@pytest.mark.slow
def test_c11_matched_training_beats_mismatched_on_model_channels():
    proto = CcaProtocol(loss_rate=0.0, iterations=4000)
    reports = cca_experiment(proto, pairs=[(CcaKind.MODEL_BASED, CcaKind.MODEL_BASED),
                                           (CcaKind.LOSS_BASED, CcaKind.MODEL_BASED)])
    matched = reports[CcaKind.MODEL_BASED, CcaKind.MODEL_BASED]
    crossed = reports[CcaKind.LOSS_BASED, CcaKind.MODEL_BASED]
    d = compare([matched, crossed]).diff(matched.name, crossed.name)
    n_traces = len({t for t, _ in matched.keys})
    ok = d.paired and d.diff >= 0 and d.ci_low > 0 and n_traces >= 20
    verdict(11, "MODEL_BASED-trained policy beats LOSS_BASED-trained one on MODEL_BASED channels", ok,
            f"{matched.mean:.1f} vs {crossed.mean:.1f}, diff {d.diff:.1f}, "
            f"paired 95% CI [{d.ci_low:.1f}, {d.ci_high:.1f}], {n_traces} traces x {len(proto.train_seeds)} seeds")


def test_c12_wire_parity():
    m = make_manifest()
    model = init_model(m, SimConfig(), seed=12)
    policy = PolicyAbr(model, greedy=False)
    service = DecisionService(policy, m, seed=12)
    server, url = start_background(service)
    mismatches = 0
    try:
        for i in range(100):
            sid = f"session-{i:03d}"
            cfg = SimConfig(Variant.SIM_O if i % 2 else Variant.SIM_T, loss_rate=0.0 if i % 4 < 2 else 0.01)
            tr = random_trace(i, n=50)
            start = float(np.random.default_rng(i).uniform(0, tr.duration))
            wire = drive_session(url, tr, m, cfg, session_id=sid, seed=12, start_time=start)
            local = run_session(policy, tr, m, cfg, np.random.default_rng(session_seed(12, sid)),
                                algorithm_rng(12, sid), start_time=start)
            same = (wire.qualities == local.qualities
                    and session_qoe(wire.log(), QoEConfig.hd()) == session_qoe(local.log(), QoEConfig.hd()))
            mismatches += not same
        with urllib.request.urlopen(url + "/healthz", timeout=5) as resp:
            healthy = resp.status == 200
    finally:
        server.shutdown()
        server.server_close()
    verdict(12, "server-driven sessions reproduce in-process decisions and QoE", mismatches == 0 and healthy,
            f"{100 - mismatches}/100 sessions identical")


def test_c13_trace_tooling():
    rng = np.random.default_rng(13)
    round_trip_ok, in_bounds, n_samples = True, True, 0
    for i in range(200):
        n = int(rng.integers(1, 300))
        t = np.concatenate([[0.0], np.cumsum(rng.uniform(1e-3, 5, n - 1))])
        tr = TimedTrace(f"t{i}", tuple(TraceSample(a, b, c) for a, b, c in
                                       zip(t, rng.uniform(1e-3, 100, n), rng.uniform(0, 1, n))))
        round_trip_ok &= parse_trace(serialize_trace(tr), name=tr.name) == tr
        aug = augment_rtprop(tr, 0.08, 0.1, seed=i)
        in_bounds &= bool(np.all((aug.rtprops >= 0.072) & (aug.rtprops <= 0.088)))
        n_samples += n
    verdict(13, "trace round trip exact; augmented RTprop within [72, 88] ms", round_trip_ok and in_bounds,
            f"200 traces, {n_samples} samples")
