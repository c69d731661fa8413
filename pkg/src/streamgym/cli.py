"""``streamgym`` command line: corpus tooling, simulation, training, evaluation and serving.

Exit codes: 0 success, 1 usage error, 2 runtime error.

A ``--config`` JSON file supplies defaults for any flag. Keys are flag names
with dashes or underscores (``"lr-actor": 1e-3``); nested objects are flattened
with underscores, so ``{"qoe": {"utility": "hd", "mu": 8}}`` sets ``--qoe`` and
``--mu``. Flags given on the command line always win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("streamgym")

SEED_ENV = "STREAMGYM_SEED"
_NESTED_ALIASES = {"qoe_utility": "qoe", "qoe_mu": "mu", "sim_variant": "sim"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or not 0 <= int(port) < 65536:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p, workers=False):
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    if workers:
        p.add_argument("--workers", type=int, default=1)


def _sim_flags(p):
    p.add_argument("--sim", choices=("o", "t"), default="t", help="simulator variant")
    p.add_argument("--manifest", help="manifest JSON (default: synthetic 49-chunk ladder)")
    p.add_argument("--loss-rate", type=float, default=0.0, help="per-packet loss in SIM-T")


def _qoe_flags(p, default="linear"):
    p.add_argument("--qoe", choices=("linear", "hd"), default=default)
    p.add_argument("--mu", type=float, default=None, help="rebuffer penalty (default per metric)")


def build_parser() -> _Parser:
    parser = _Parser(prog="streamgym", description="Trace-driven ABR streaming lab.")
    parser.add_argument("--version", action="version", version=f"streamgym {__version__}")
    parser.add_argument("--config", help="JSON file with flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("augment", help="add uniform RTprop noise to a (legacy) trace")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-rtprop", type=float, default=0.08)
    p.add_argument("--noise", type=float, default=0.10, help="relative half-width of the noise")
    _common(p)

    p = sub.add_parser("gen-trace", help="one synthetic trace from a channel model")
    p.add_argument("--cca", default="model", help="loss|cubic or model|bbr")
    p.add_argument("--btlbw", type=float, required=True, help="bottleneck bandwidth, Mbps")
    p.add_argument("--rtprop", type=float, default=0.08)
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--buffer-bdp", type=float, default=0.1, help="bottleneck queue in BDPs")
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--granularity", type=float, default=1.0)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("gen-corpus", help="channel-model corpus, or a split of existing trace files")
    p.add_argument("--cca", default="model")
    p.add_argument("--levels", type=_floats, default=[3.0, 3.5, 4.0, 4.5], help="Mbps, comma-separated")
    p.add_argument("--repetitions", type=int, default=25)
    p.add_argument("--rtprop", type=float, default=0.08)
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--buffer-bdp", type=float, default=0.1)
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--granularity", type=float, default=1.0)
    p.add_argument("--from", dest="source", help="directory of *.trace files to split instead")
    p.add_argument("--augment", type=float, default=None, metavar="NOISE",
                   help="with --from: add RTprop noise of this relative half-width")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("simulate", help="play one session and print its per-chunk log as CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--abr", default="rate")
    p.add_argument("--start", type=float, default=0.0, help="start offset into the trace, s")
    p.add_argument("--out", help="CSV path (default stdout)")
    _sim_flags(p)
    _qoe_flags(p)
    _common(p)

    p = sub.add_parser("oracle", help="offline-optimal quality sequence for one trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=("exhaustive", "dp"), default="dp")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--start", type=float, default=0.0)
    _sim_flags(p)
    _qoe_flags(p)
    _common(p)

    p = sub.add_parser("train", help="train an actor-critic policy on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory (model.json, curve.csv)")
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--entropy-iterations", type=int, default=100_000,
                   help="length of the entropy staircase")
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lr-actor", type=float, default=1e-4)
    p.add_argument("--lr-critic", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-rtprop", action="store_true", help="zero the RTprop input feature")
    _sim_flags(p)
    _qoe_flags(p)
    _common(p, workers=True)

    p = sub.add_parser("eval", help="evaluate one or more algorithms on a corpus' test split")
    p.add_argument("--abr", action="append", required=True, help="repeat to compare algorithms")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", type=_ints, default=[0], help="comma-separated session seeds")
    p.add_argument("--fixed-start", action="store_true", help="start every session at trace time 0")
    p.add_argument("--out", required=True)
    _sim_flags(p)
    _qoe_flags(p)
    _common(p, workers=True)

    p = sub.add_parser("serve", help="run the HTTP decision service")
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 8333))
    p.add_argument("--abr", required=True)
    p.add_argument("--manifest")
    p.add_argument("--ttl", type=float, default=600.0, help="idle session eviction, s")
    _common(p)
    return parser


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in data.items():
        key = prefix + str(key).replace("-", "_").replace(".", "_")
        if isinstance(value, dict):
            out.update(_flatten(value, key + "_"))
        else:
            out[_NESTED_ALIASES.get(key, key)] = value
    return out


def _load_config(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return _flatten(data)


def _subparsers(parser: _Parser) -> dict[str, _Parser]:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices


def _apply_config(parser: _Parser, values: dict) -> None:
    """Install config values as defaults on every subcommand that knows the key."""
    for subparser in _subparsers(parser).values():
        known = {}
        for action in subparser._actions:
            if action.dest not in values:
                continue
            value = values[action.dest]
            # run string values through the flag's own type conversion
            if isinstance(value, str) and action.type:
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"config key {action.dest}: {exc}") from None
            if action.dest == "abr" and isinstance(action, argparse._AppendAction) and isinstance(value, str):
                value = [value]
            known[action.dest] = value
            action.required = False
        subparser.set_defaults(**known)


def _check_config_keys(parser: _Parser, command: str, values: dict) -> None:
    known = {a.dest for a in _subparsers(parser)[command]._actions} | {"config", "verbose"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")


def _manifest(path):
    from .sim import load_manifest, make_manifest
    return load_manifest(path) if path else make_manifest()


def _configs(args):
    from .qoe import QoEConfig
    from .sim import SimConfig, Variant
    try:
        sim = SimConfig(variant=Variant.parse(args.sim), loss_rate=args.loss_rate)
        qoe = QoEConfig.from_name(args.qoe, args.mu)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return sim, qoe


def _validate(args) -> None:
    """Range checks that argparse types cannot express; run before any work."""
    checks = {
        "workers": lambda v: v >= 1,
        "iterations": lambda v: v > 0,
        "entropy_iterations": lambda v: v > 0,
        "repetitions": lambda v: v >= 1,
        "test_fraction": lambda v: 0 < v < 1,
        "horizon": lambda v: v is None or v >= 1,
        "noise": lambda v: 0 <= v < 1,
        "ttl": lambda v: v > 0,
        "duration": lambda v: v > 0,
        "granularity": lambda v: v > 0,
        "start": lambda v: v >= 0,
    }
    for name, ok in checks.items():
        if hasattr(args, name) and not ok(getattr(args, name)):
            raise UsageError(f"invalid value for --{name.replace('_', '-')}: {getattr(args, name)}")
    if getattr(args, "cca", None) is not None:
        from .channel import CcaKind
        try:
            CcaKind.parse(args.cca)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if hasattr(args, "sim"):
        _configs(args)
    if getattr(args, "abr", None):
        from .abr import parse_algorithm
        algos = args.abr if isinstance(args.abr, list) else [args.abr]
        for algo in algos:
            kind = algo.partition(":")[0]
            if kind not in ("fixed", "rate", "buffer", "policy", "oracle"):
                raise UsageError(f"unknown algorithm {algo!r}")
            if kind != "policy":
                # a custom manifest is only read once work starts; check the ladder bound on the default
                ladder = None if getattr(args, "manifest", None) else _manifest(None)
                try:
                    parse_algorithm(algo, ladder)
                except ValueError as exc:
                    raise UsageError(str(exc)) from None


def cmd_augment(args) -> None:
    from .trace import augment_rtprop, load_trace, save_trace
    trace = load_trace(args.input, default_rtprop=args.base_rtprop)
    save_trace(augment_rtprop(trace, args.base_rtprop, args.noise, args.seed), args.out)


def cmd_gen_trace(args) -> None:
    from .channel import CcaKind, ChannelConfig, generate_trace
    from .trace import save_trace
    cfg = ChannelConfig(btlbw=args.btlbw, rtprop=args.rtprop, buffer_bdp=args.buffer_bdp, loss_rate=args.loss)
    trace = generate_trace(cfg, CcaKind.parse(args.cca), args.duration, args.granularity, args.seed, args.name)
    save_trace(trace, args.out)


def cmd_gen_corpus(args) -> None:
    from .channel import CcaKind, generate_dash_corpus
    from .trace import Corpus, augment_rtprop, load_trace, save_corpus, split_corpus
    if args.source:
        paths = sorted(Path(args.source).glob("*.trace"))
        if not paths:
            raise RuntimeError(f"no *.trace files in {args.source}")
        traces = [load_trace(p, args.rtprop) for p in paths]
        if args.augment is not None:
            traces = [augment_rtprop(t, args.rtprop, args.augment, seed=args.seed + i)
                      for i, t in enumerate(traces)]
        corpus = Corpus(traces)
    else:
        corpus = generate_dash_corpus(args.levels, args.rtprop, CcaKind.parse(args.cca), args.repetitions,
                                      args.duration, args.seed, args.loss, args.buffer_bdp, args.granularity)
    corpus = split_corpus(corpus, args.test_fraction, args.seed)
    save_corpus(corpus, args.out)
    print(f"{len(corpus.train)} train / {len(corpus.test)} test traces -> {args.out}")


def cmd_simulate(args) -> None:
    import numpy as np

    from .abr import OracleAbr, SequenceAbr, algorithm_rng, offline_optimal, parse_algorithm, run_session
    from .abr import session_seed
    from .qoe import session_qoe
    from .trace import load_trace
    manifest = _manifest(args.manifest)
    sim, qoe = _configs(args)
    trace = load_trace(args.trace)
    algorithm = parse_algorithm(args.abr, manifest)
    if isinstance(algorithm, OracleAbr):
        plan, _ = offline_optimal(trace, manifest, sim, qoe, mode=algorithm.mode, start_time=args.start)
        algorithm = SequenceAbr(plan)
    run = run_session(algorithm, trace, manifest, sim, np.random.default_rng(session_seed(args.seed, trace.name)),
                      algorithm_rng(args.seed, trace.name), start_time=args.start)
    text = run.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    score = session_qoe(run.log(), qoe.for_ladder(manifest.bitrates, manifest.quality_values))
    print(f"session QoE ({qoe.name}): {score:.4f}", file=sys.stderr)


def cmd_oracle(args) -> None:
    from .abr import offline_optimal
    from .trace import load_trace
    manifest = _manifest(args.manifest)
    sim, qoe = _configs(args)
    seq, value = offline_optimal(load_trace(args.trace), manifest, sim, qoe, args.horizon, args.mode,
                                 start_time=args.start)
    print(json.dumps({"qualities": seq, "session_qoe": value, "metric": qoe.name, "mode": args.mode}))


def cmd_train(args) -> None:
    from .learn import EntropySchedule, TrainConfig, train
    from .trace import load_corpus
    manifest = _manifest(args.manifest)
    sim, qoe = _configs(args)
    cfg = TrainConfig(iterations=args.iterations, workers=args.workers, gamma=args.gamma,
                      lr_actor=args.lr_actor, lr_critic=args.lr_critic, seed=args.seed, qoe=qoe, sim=sim,
                      hidden=args.hidden, checkpoint_every=args.checkpoint_every, out_dir=args.out,
                      use_rtprop=not args.no_rtprop)
    result = train(load_corpus(args.corpus), manifest, cfg, EntropySchedule(total_iterations=args.entropy_iterations))
    tail = result.curve[-100:]
    print(f"model -> {Path(args.out) / 'model.json'}; mean reward over last {len(tail)} iterations: "
          f"{sum(c['mean_reward'] for c in tail) / len(tail):.4f}")


def cmd_eval(args) -> None:
    from .abr import parse_algorithm
    from .evaluation import compare, evaluate
    from .trace import load_corpus
    manifest = _manifest(args.manifest)
    sim, qoe = _configs(args)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    reports = []
    for algo in args.abr:
        algorithm = parse_algorithm(algo, manifest)
        # session seeds are offset by the master seed so one flag controls everything
        seeds = [args.seed + s for s in args.seeds]
        report = evaluate(algorithm, corpus, manifest, sim, qoe, seeds, name=algo,
                          random_start=not args.fixed_start, workers=args.workers)
        target = out if len(args.abr) == 1 else out / algo.replace(":", "_").replace("/", "_")
        report.save(target)
        reports.append(report)
        print(f"{algo}: mean QoE {report.mean:.3f}, median {report.median:.3f} over {len(report.rows)} sessions")
    if len(reports) > 1:
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(compare(reports, seed=args.seed).to_csv(), encoding="utf-8")


def cmd_serve(args) -> None:
    from .abr import parse_algorithm
    from .server import DecisionService, serve
    manifest = _manifest(args.manifest)
    algorithm = parse_algorithm(args.abr, manifest)
    service = DecisionService(algorithm, manifest, seed=args.seed, ttl=args.ttl)
    host, port = args.listen
    print(f"serving {args.abr} on http://{host}:{port}", file=sys.stderr)
    serve(service, host, port)


COMMANDS = {
    "augment": cmd_augment,
    "gen-trace": cmd_gen_trace,
    "gen-corpus": cmd_gen_corpus,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        config_path = pre.parse_known_args(argv)[0].config
        values = _load_config(config_path) if config_path else {}
        _apply_config(parser, values)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("streamgym: error: a subcommand is required")
        _check_config_keys(parser, args.command, values)
        if args.command == "eval" and "abr" in values and "--abr" in argv:
            # append actions extend their default; command-line algorithms replace the config's
            args.abr = args.abr[len(_subparsers(parser)["eval"].get_default("abr")):]
        if args.seed is None:
            args.seed = _env_seed()
        _validate(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 2
        log.debug("command failed", exc_info=True)
        print(f"streamgym {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
