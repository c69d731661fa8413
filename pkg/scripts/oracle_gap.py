"""Baselines against the DP oracle on a saved corpus.

    streamgym gen-corpus --cca cubic --repetitions 5 --out corpus
    python scripts/oracle_gap.py --corpus corpus --qoe hd
"""

import argparse

from streamgym.abr import BufferAbr, FixedAbr, OracleAbr, RateAbr
from streamgym.evaluation import compare, evaluate
from streamgym.qoe import QoEConfig
from streamgym.sim import SimConfig, make_manifest
from streamgym.trace import load_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--qoe", choices=("linear", "hd"), default="hd")
    ap.add_argument("--chunks", type=int, default=None, help="truncate the video to this many chunks")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    manifest = make_manifest()
    if args.chunks:
        manifest = manifest.truncated(args.chunks)
    corpus = load_corpus(args.corpus)
    qoe, sim = QoEConfig.from_name(args.qoe), SimConfig()
    algorithms = {"oracle": OracleAbr("dp"), "rate": RateAbr(), "buffer": BufferAbr(), "fixed0": FixedAbr(0)}
    reports = [evaluate(alg, corpus, manifest, sim, qoe, name=name, workers=args.workers)
               for name, alg in algorithms.items()]
    print(compare(reports).to_csv())


if __name__ == "__main__":
    main()
