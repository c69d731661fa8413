"""Desk-scale experiment protocols shared by the scripts and the acceptance suite.

The congestion-control experiments train one policy per seed on each corpus,
then evaluate seed ``s``'s policy with session seed ``s`` on every test trace,
so reports over the same traces are paired by (trace, seed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .channel import CcaKind, generate_dash_corpus
from .evaluation import EvalReport, evaluate, fingerprint
from .learn import EntropySchedule, PolicyAbr, PolicyModel, TrainConfig, train
from .qoe import QoEConfig
from .sim import SimConfig, Variant, VideoManifest, make_manifest
from .trace import Corpus, split_corpus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CcaProtocol:
    loss_rate: float = 0.0
    levels: tuple[float, ...] = (3.0, 3.5, 4.0, 4.5)
    rtprop: float = 0.080
    repetitions: int = 25
    duration: float = 300.0
    buffer_bdp: float = 0.1
    test_fraction: float = 0.2
    train_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    iterations: int = 4000
    lr_actor: float = 1e-3
    corpus_seed: int = 3
    qoe: QoEConfig = field(default_factory=QoEConfig.hd)
    sim: SimConfig = field(default_factory=lambda: SimConfig(variant=Variant.SIM_T))


def cca_corpus(cca: CcaKind, proto: CcaProtocol) -> Corpus:
    corpus = generate_dash_corpus(proto.levels, proto.rtprop, cca, proto.repetitions, proto.duration,
                                  proto.corpus_seed, proto.loss_rate, proto.buffer_bdp)
    return split_corpus(corpus, proto.test_fraction, seed=proto.corpus_seed + 1)


def train_policies(corpus: Corpus, manifest: VideoManifest, proto: CcaProtocol) -> list[PolicyModel]:
    models = []
    sched = EntropySchedule(total_iterations=proto.iterations)
    for seed in proto.train_seeds:
        cfg = TrainConfig(iterations=proto.iterations, lr_actor=proto.lr_actor, seed=seed,
                          qoe=proto.qoe, sim=proto.sim)
        models.append(train(corpus, manifest, cfg, sched).model)
        log.info("trained policy seed %d on %d traces", seed, len(corpus.train))
    return models


def evaluate_policies(models: Sequence[PolicyModel], corpus: Corpus, manifest: VideoManifest,
                      proto: CcaProtocol, name: str) -> EvalReport:
    """Policy ``i`` plays every test trace with session seed ``train_seeds[i]``."""
    rows = []
    for model, seed in zip(models, proto.train_seeds):
        rows += evaluate(PolicyAbr(model), corpus, manifest, proto.sim, proto.qoe, seeds=(seed,)).rows
    cfg_fp = fingerprint(proto, [m.fingerprint() for m in models], sorted(t.name for t in corpus.test))
    return EvalReport(name, rows, manifest.fingerprint(), cfg_fp, manifest.chunk_count)


def cca_experiment(proto: CcaProtocol, manifest: VideoManifest | None = None,
                   pairs: Sequence[tuple[CcaKind, CcaKind]] | None = None) -> dict[tuple[CcaKind, CcaKind], EvalReport]:
    """Reports keyed by (training CCA, evaluation CCA)."""
    manifest = manifest or make_manifest()
    if pairs is None:
        pairs = [(a, b) for a in CcaKind for b in CcaKind]
    corpora = {cca: cca_corpus(cca, proto) for cca in {c for pair in pairs for c in pair}}
    models = {cca: train_policies(corpora[cca], manifest, proto) for cca in {a for a, _ in pairs}}
    return {(a, b): evaluate_policies(models[a], corpora[b], manifest, proto, f"train-{a.value}/eval-{b.value}")
            for a, b in pairs}
