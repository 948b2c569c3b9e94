"""Toy CNN generator, timing runner and CSV output for strategy benchmarks."""

from __future__ import annotations

import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .layers import Conv, Dense, Flatten, MaxPool, Network, ReLU
from .strategies import StrategyKind, compare_grads, per_example_grads

log = logging.getLogger(__name__)

# seed-sequence tag for the warm-up batch, distinct from every repeat index
WARMUP_STREAM = 2**32 - 1

CSV_HEADER = ["strategy", "n_layers", "channel_rate", "kernel", "batch", "input_shape", "repeat", "batches", "seconds"]


class ConfigError(ValueError):
    pass


class EquivalenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyNetConfig:
    n_layers: int = 2
    base_channels: int = 8
    channel_rate: float = 1.0
    kernel_size: int = 3
    input_shape: tuple = (3, 32, 32)
    pool_every: int = 2
    n_outputs: int = 10
    seed: int = 0

    def channels(self) -> list[int]:
        # round half up, never below one channel
        return [max(1, math.floor(self.base_channels * self.channel_rate ** i + 0.5)) for i in range(self.n_layers)]

    def validate(self):
        if self.n_layers < 1 or self.base_channels < 1 or self.kernel_size < 1 or self.pool_every < 1:
            raise ConfigError("n_layers, base_channels, kernel_size and pool_every must be >= 1")
        if not self.channel_rate > 0:
            raise ConfigError(f"channel_rate must be positive, got {self.channel_rate}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive extents, got {self.input_shape}")
        spatial = list(self.input_shape[1:])
        for i in range(self.n_layers):
            if min(spatial) < self.kernel_size:
                raise ConfigError(
                    f"conv layer {i} sees spatial extent {tuple(spatial)}, smaller than kernel {self.kernel_size}"
                )
            spatial = [t - self.kernel_size + 1 for t in spatial]
            if (i + 1) % self.pool_every == 0:
                if min(spatial) < 2:
                    raise ConfigError(f"max-pool after conv layer {i} sees spatial extent {tuple(spatial)}")
                spatial = [t // 2 for t in spatial]


def build_toy_net(cfg: ToyNetConfig) -> Network:
    """Stack of kernel_size convs (ReLU after each, 2x2 max-pool after every
    ``pool_every`` convs), then a dense layer to ``n_outputs``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel_size
    layers = []
    in_ch = cfg.input_shape[0]
    for i, out_ch in enumerate(cfg.channels()):
        layers += [Conv.init(rng, in_ch, out_ch, (k, k)), ReLU()]
        if (i + 1) % cfg.pool_every == 0:
            layers.append(MaxPool(2, 2))
        in_ch = out_ch
    features = Network(tuple(layers)).output_shape((1, *cfg.input_shape))
    layers += [Flatten(), Dense.init(rng, math.prod(features[1:]), cfg.n_outputs)]
    return Network(tuple(layers))


@dataclass(frozen=True)
class NetInfo:
    """Architecture columns written to every benchmark record."""

    n_layers: int
    channel_rate: float
    kernel: int
    input_shape: tuple

    @classmethod
    def from_config(cls, cfg: ToyNetConfig) -> "NetInfo":
        return cls(cfg.n_layers, cfg.channel_rate, cfg.kernel_size, tuple(cfg.input_shape))


def _alexnet_mini(seed: int) -> tuple[Network, NetInfo]:
    # AlexNet layer pattern with channels divided by 8 on a 64x64 input
    rng = np.random.default_rng(seed)
    layers = [
        Conv.init(rng, 3, 8, (11, 11), stride=4, padding=2), ReLU(), MaxPool(3, 2),
        Conv.init(rng, 8, 24, (5, 5), padding=2), ReLU(), MaxPool(3, 2),
        Conv.init(rng, 24, 48, (3, 3), padding=1), ReLU(),
        Conv.init(rng, 48, 32, (3, 3), padding=1), ReLU(),
        Conv.init(rng, 32, 32, (3, 3), padding=1), ReLU(), MaxPool(3, 2),
        Flatten(),
        Dense.init(rng, 32, 64), ReLU(),
        Dense.init(rng, 64, 64), ReLU(),
        Dense.init(rng, 64, 10),
    ]
    return Network(tuple(layers)), NetInfo(5, float("nan"), 11, (3, 64, 64))


def _vgg_mini(seed: int) -> tuple[Network, NetInfo]:
    # VGG16 block pattern (2, 2, 3, 3, 3 convs) with channels divided by 16
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = 3
    for n_convs, ch in ((2, 4), (2, 8), (3, 16), (3, 32), (3, 32)):
        for _ in range(n_convs):
            layers += [Conv.init(rng, in_ch, ch, (3, 3), padding=1), ReLU()]
            in_ch = ch
        layers.append(MaxPool(2, 2))
    layers += [
        Flatten(),
        Dense.init(rng, 32, 64), ReLU(),
        Dense.init(rng, 64, 64), ReLU(),
        Dense.init(rng, 64, 10),
    ]
    return Network(tuple(layers)), NetInfo(13, float("nan"), 3, (3, 32, 32))


PRESETS = {"alexnet-mini": _alexnet_mini, "vgg-mini": _vgg_mini}


def build_preset(name: str, seed: int = 0) -> tuple[Network, NetInfo]:
    try:
        return PRESETS[name](seed)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


@dataclass(frozen=True)
class BenchConfig:
    strategies: tuple = tuple(StrategyKind)
    batch_size: int = 8
    n_batches: int = 20
    repeats: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if min(self.batch_size, self.n_batches, self.repeats, self.workers) < 1:
            raise ConfigError("batch_size, n_batches, repeats and workers must all be >= 1")
        if not self.strategies:
            raise ConfigError("need at least one strategy")


@dataclass(frozen=True)
class BenchRecord:
    strategy: str
    n_layers: int
    channel_rate: float
    kernel: int
    batch: int
    input_shape: tuple
    repeat: int
    batches: int
    seconds: float

    def row(self) -> list[str]:
        return [
            self.strategy,
            str(self.n_layers),
            format(self.channel_rate, "g"),
            str(self.kernel),
            str(self.batch),
            "x".join(str(d) for d in self.input_shape),
            str(self.repeat),
            str(self.batches),
            format(self.seconds, "#.9g"),
        ]


def make_batches(seed: int, repeat: int, n_batches: int, shape: tuple) -> list[np.ndarray]:
    """The input stream for one repeat; depends only on (seed, repeat), not on the strategy."""
    return [np.random.default_rng([seed, repeat, i]).standard_normal(shape) for i in range(n_batches)]


@dataclass
class BenchResult:
    records: list = field(default_factory=list)
    # strategy -> error message, for strategies that raised
    failures: dict = field(default_factory=dict)


def run_benchmark(net: Network, bench: BenchConfig, info: NetInfo, check_tol: Optional[float] = 1e-10) -> BenchResult:
    """Time ``per_example_grads`` over ``n_batches`` random batches, ``repeats`` times per strategy.

    Input generation is outside the timed region; one extra batch per strategy
    is run untimed first as warm-up. Gradients from the first batch of repeat 0
    are compared across strategies (``EquivalenceError`` past ``check_tol``).
    """
    shape = (bench.batch_size, *info.input_shape)
    result = BenchResult()
    first_batch = {}
    for strategy in bench.strategies:
        strategy = StrategyKind(strategy)
        records = []
        try:
            warm = np.random.default_rng([bench.seed, WARMUP_STREAM]).standard_normal(shape)
            per_example_grads(net, warm, strategy, bench.workers)
            for repeat in range(bench.repeats):
                batches = make_batches(bench.seed, repeat, bench.n_batches, shape)
                seconds = 0.0
                for i, x in enumerate(batches):
                    start = time.perf_counter()
                    grads = per_example_grads(net, x, strategy, bench.workers)
                    seconds += time.perf_counter() - start
                    if repeat == 0 and i == 0:
                        first_batch[strategy.value] = grads
                records.append(BenchRecord(
                    strategy.value, info.n_layers, info.channel_rate, info.kernel,
                    bench.batch_size, info.input_shape, repeat, bench.n_batches, seconds,
                ))
                log.info("%s repeat %d: %.4f s", strategy.value, repeat, seconds)
        except Exception as exc:  # one broken strategy should not sink the others
            log.error("strategy %s failed: %s", strategy.value, exc)
            result.failures[strategy.value] = str(exc)
            first_batch.pop(strategy.value, None)
            continue
        result.records.extend(records)

    if check_tol is not None and len(first_batch) > 1:
        report = compare_grads(first_batch, check_tol)
        if not report.ok:
            raise EquivalenceError(f"strategies disagree on the first batch: {report.failures[:3]}")
    return result


def write_csv(records: Iterable[BenchRecord], path: str) -> None:
    """Write records with the fixed header; ``path='-'`` writes to stdout."""
    if path == "-":
        _write_rows(records, sys.stdout)
        return
    try:
        with open(path, "w", newline="") as fh:
            _write_rows(records, fh)
    except OSError as exc:
        raise OSError(f"cannot write benchmark CSV to {path}: {exc.strerror or exc}") from exc


def _write_rows(records, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.row())


def summarize(records: Iterable[BenchRecord]) -> dict[tuple, tuple[float, float]]:
    """Mean and standard deviation of seconds per (strategy, batch, n_layers, channel_rate)."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r.strategy, r.batch, r.n_layers, r.channel_rate), []).append(r.seconds)
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in groups.items()}
