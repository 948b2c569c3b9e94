"""Command line entry point: ``pergrad {bench,sweep,batchsweep,check}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .bench import (
    BenchConfig,
    ConfigError,
    EquivalenceError,
    NetInfo,
    ToyNetConfig,
    build_preset,
    build_toy_net,
    run_benchmark,
    summarize,
    write_csv,
    PRESETS,
)
from .checks import run_check
from .strategies import StrategyKind


def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected CxHxW with three positive integers, got {text!r}")
    return dims


def _csv_list(cast):
    def parse(text: str):
        try:
            items = [cast(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items
    return parse


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    net = common.add_argument_group("network")
    net.add_argument("--layers", type=_positive_int, default=2, help="number of conv layers")
    net.add_argument("--channel-rate", type=float, default=1.0,
                     help="ratio of channel counts between consecutive conv layers")
    net.add_argument("--base-channels", type=_positive_int, default=8, help="channels of the first conv layer")
    net.add_argument("--kernel", type=_positive_int, default=3)
    net.add_argument("--input", type=parse_shape, default=(3, 32, 32), metavar="CxHxW")
    net.add_argument("--preset", choices=sorted(PRESETS),
                     help="scaled-down AlexNet/VGG16 layer pattern instead of a toy net")
    run = common.add_argument_group("run")
    run.add_argument("--batch", type=_positive_int, default=8)
    run.add_argument("--strategies", type=_csv_list(StrategyKind.parse), default=list(StrategyKind))
    run.add_argument("--batches", type=_positive_int, default=20, help="batches timed per repeat")
    run.add_argument("--repeats", type=_positive_int, default=10)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=_positive_int, default=1, help="thread count for the multi strategy")
    run.add_argument("--out", default="-", metavar="FILE", help="CSV path, '-' for stdout")
    run.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pergrad", description="Per-example gradient strategies for CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("bench", parents=[common], help="time strategies on one network")
    sweep = sub.add_parser("sweep", parents=[common], help="channel-rate sweep")
    sweep.add_argument("--rates", type=_csv_list(float), required=True, metavar="R1,R2,...")
    bsweep = sub.add_parser("batchsweep", parents=[common], help="batch-size sweep")
    bsweep.add_argument("--batch-sizes", "--batches-sizes", dest="batch_sizes",
                        type=_csv_list(_positive_int), required=True, metavar="B1,B2,...")

    check = sub.add_parser("check", help="run the strategy-equivalence and gradient suites")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--tol", type=float, default=1e-10)
    check.add_argument("--workers", type=_positive_int, default=2)
    return parser


def _networks(args, rates):
    if args.preset:
        yield build_preset(args.preset, args.seed)
        return
    for rate in rates:
        cfg = ToyNetConfig(
            n_layers=args.layers,
            base_channels=args.base_channels,
            channel_rate=rate,
            kernel_size=args.kernel,
            input_shape=args.input,
            seed=args.seed,
        )
        yield build_toy_net(cfg), NetInfo.from_config(cfg)


def _run_benchmarks(args) -> int:
    bench = BenchConfig(
        strategies=tuple(args.strategies),
        batch_size=args.batch,
        n_batches=args.batches,
        repeats=args.repeats,
        seed=args.seed,
        workers=args.workers,
    )
    rates = args.rates if args.command == "sweep" else [args.channel_rate]
    batch_sizes = args.batch_sizes if args.command == "batchsweep" else [args.batch]

    records, failed = [], False
    for net, info in _networks(args, rates):
        for batch in batch_sizes:
            result = run_benchmark(net, replace(bench, batch_size=batch), info)
            records += result.records
            failed |= bool(result.failures)
    write_csv(records, args.out)

    stream = sys.stderr if args.out == "-" else sys.stdout
    for (strategy, batch, n_layers, rate), (mean, std) in summarize(records).items():
        print(f"{strategy:>6} batch={batch:<3} layers={n_layers} rate={rate:g}: "
              f"{mean:.4f} +/- {std:.4f} s / {bench.n_batches} batches", file=stream)
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "check":
        report = run_check(seed=args.seed, tol=args.tol, workers=args.workers)
        for line in report.lines():
            print(line)
        return 0 if report.ok else 1
    try:
        return _run_benchmarks(args)
    except ConfigError as exc:
        print(f"pergrad: error: {exc}", file=sys.stderr)
        return 2
    except (EquivalenceError, OSError) as exc:
        print(f"pergrad: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
