"""Train on loss-based vs model-based corpora and compare QoE_HD across channel kinds.

    python scripts/cca_experiment.py --loss 0.02 --iterations 1500 --out results/loss2
    python scripts/cca_experiment.py --loss 0 --iterations 4000 --out results/cross

Writes one report directory per (training CCA, evaluation CCA) pair plus comparison.csv.
"""

import argparse
import logging
import time
from pathlib import Path

from streamgym.channel import CcaKind
from streamgym.evaluation import compare
from streamgym.experiments import CcaProtocol, cca_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--loss", type=float, default=0.0, help="random loss rate on the bottleneck")
    ap.add_argument("--iterations", type=int, default=4000)
    ap.add_argument("--seeds", type=int, default=5, help="training seeds per corpus")
    ap.add_argument("--buffer-bdp", type=float, default=0.1)
    ap.add_argument("--matched-only", action="store_true", help="skip the cross-evaluation pairs")
    ap.add_argument("--out", default="results/cca")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    proto = CcaProtocol(loss_rate=args.loss, iterations=args.iterations, buffer_bdp=args.buffer_bdp,
                        train_seeds=tuple(range(args.seeds)))
    pairs = None
    if args.matched_only:
        pairs = [(k, k) for k in CcaKind]
    t0 = time.time()
    reports = cca_experiment(proto, pairs=pairs)
    out = Path(args.out)
    for (a, b), rep in reports.items():
        rep.save(out / f"train_{a.value}__eval_{b.value}")
        print(f"{rep.name:28s} mean {rep.mean:8.2f}  median {rep.median:8.2f}  n={len(rep.rows)}")
    cmp = compare(list(reports.values()))
    (out / "comparison.csv").write_text(cmp.to_csv())
    for d in cmp.diffs:
        print(f"{d.a} - {d.b}: {d.diff:+.2f}  CI [{d.ci_low:+.2f}, {d.ci_high:+.2f}]  paired={d.paired}")
    print(f"done in {time.time() - t0:.0f} s -> {out}")


if __name__ == "__main__":
    main()
