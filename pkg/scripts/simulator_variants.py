"""Train one policy in SIM-O and one in SIM-T, then evaluate both in SIM-T.

The training corpus is a legacy-style trace set whose RTprop column is
re-drawn with uniform noise, so SIM-T sees per-sample delays while SIM-O
always assumes a fixed 80 ms.

    python scripts/simulator_variants.py --iterations 3000 --out results/simvar
"""

import argparse
import time
from pathlib import Path

import numpy as np

from streamgym.abr import BufferAbr, RateAbr
from streamgym.evaluation import compare, evaluate
from streamgym.learn import EntropySchedule, PolicyAbr, TrainConfig, train
from streamgym.qoe import QoEConfig
from streamgym.sim import SimConfig, Variant, make_manifest
from streamgym.trace import Corpus, TimedTrace, TraceSample, augment_rtprop, split_corpus


def synthetic_legacy(n_traces, seed, duration=320):
    """Two-column style traces: a random walk in log-throughput, 1 s samples."""
    rng = np.random.default_rng(seed)
    traces = []
    for i in range(n_traces):
        level = np.log(rng.uniform(0.8, 5.0))
        steps = rng.normal(0, 0.15, duration).cumsum()
        bw = np.clip(np.exp(level + steps - steps.mean()), 0.2, 8.0)
        samples = tuple(TraceSample(float(t), float(b), 0.08) for t, b in enumerate(bw))
        traces.append(augment_rtprop(TimedTrace(f"walk{i:03d}", samples), 0.08, 0.1, seed=seed + i))
    return Corpus(traces)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--traces", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/simvar")
    args = ap.parse_args()

    manifest = make_manifest()
    corpus = split_corpus(synthetic_legacy(args.traces, args.seed), 0.25, seed=args.seed)
    qoe = QoEConfig.hd()
    sim_t = SimConfig(Variant.SIM_T)
    sched = EntropySchedule(total_iterations=args.iterations)
    reports = []
    for variant in Variant:
        t0 = time.time()
        cfg = TrainConfig(iterations=args.iterations, lr_actor=1e-3, seed=args.seed, qoe=qoe,
                          sim=SimConfig(variant))
        model = train(corpus, manifest, cfg, sched).model
        reports.append(evaluate(PolicyAbr(model), corpus, manifest, sim_t, qoe, seeds=range(5),
                                name=f"trained-in-sim-{variant.value}"))
        print(f"sim-{variant.value}: trained in {time.time() - t0:.0f} s, mean QoE {reports[-1].mean:.2f}")
    for alg, name in ((RateAbr(), "rate"), (BufferAbr(), "buffer")):
        reports.append(evaluate(alg, corpus, manifest, sim_t, qoe, seeds=range(5), name=name))
    out = Path(args.out)
    for rep in reports:
        rep.save(out / rep.name)
    cmp = compare(reports)
    (out / "comparison.csv").write_text(cmp.to_csv())
    print(cmp.to_csv())


if __name__ == "__main__":
    main()
