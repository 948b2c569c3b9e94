"""Three interchangeable ways to get per-example gradients.

``naive``
    One forward/backward pass per example at batch size 1, run in sequence.
``multi``
    One replica of the network per example. Replicas share the parameter
    arrays of the original (no copies) and run on a thread pool.
``crb``
    Chain-rule based: one batched forward pass and one batched backward pass;
    the per-example weight gradients are formed from each layer's stored input
    and output gradient.

All three return a dict ``{"<layer>.<param>": array of shape (B, *param.shape)}``.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import layers
from .layers import Network
from .tensor_core import as_tensor


class StrategyKind(str, Enum):
    NAIVE = "naive"
    CRB = "crb"
    MULTI = "multi"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "StrategyKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown strategy {text!r}; choose from {choices}") from None


def _single_example(net: Network, x_b: np.ndarray) -> dict[str, np.ndarray]:
    out, cache = layers.forward(net, x_b)
    return layers.aggregate_backward(net, cache, layers.loss_grad(out))


def _stack(rows: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {key: np.stack([r[key] for r in rows]) for key in rows[0]}


def naive_grads(net: Network, x: np.ndarray) -> dict[str, np.ndarray]:
    return _stack([_single_example(net, x[b:b + 1]) for b in range(x.shape[0])])


def multi_grads(net: Network, x: np.ndarray, workers: int = 1) -> dict[str, np.ndarray]:
    B = x.shape[0]
    replicas = [net.share() for _ in range(B)]
    workers = max(1, min(workers, B))
    if workers == 1:
        rows = [_single_example(r, x[b:b + 1]) for b, r in enumerate(replicas)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map preserves submission order, so rows stay in example order
            rows = list(pool.map(_single_example, replicas, [x[b:b + 1] for b in range(B)]))
    return _stack(rows)


def crb_grads(net: Network, x: np.ndarray) -> dict[str, np.ndarray]:
    out, cache = layers.forward(net, x)
    return layers.per_example_backward(net, cache, layers.loss_grad(out))


def per_example_grads(
    net: Network,
    x: np.ndarray,
    strategy: StrategyKind | str = StrategyKind.CRB,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Gradient of each example's loss ``0.5 * ||net(x[b])||^2`` w.r.t. every parameter."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[0] < 1:
        raise ValueError(f"need a non-empty batch, got input shape {x.shape}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    strategy = StrategyKind.parse(strategy) if isinstance(strategy, str) else strategy
    if strategy is StrategyKind.NAIVE:
        return naive_grads(net, x)
    if strategy is StrategyKind.MULTI:
        return multi_grads(net, x, workers)
    return crb_grads(net, x)


@dataclass
class EquivalenceReport:
    tol: float
    # (strategy_a, strategy_b) -> parameter key -> max abs deviation
    deviations: dict = field(default_factory=dict)

    @property
    def failures(self) -> list[tuple[str, str, str, float]]:
        return [
            (a, b, key, dev)
            for (a, b), per_param in self.deviations.items()
            for key, dev in per_param.items()
            if not dev <= self.tol
        ]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_deviation(self) -> float:
        return max((d for per in self.deviations.values() for d in per.values()), default=0.0)


def compare_grads(results: dict, tol: float) -> EquivalenceReport:
    """Pairwise max-abs deviation per parameter between strategy outputs."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    report = EquivalenceReport(tol)
    for a, b in itertools.combinations(results, 2):
        ga, gb = results[a], results[b]
        per = {}
        for key in ga:
            if ga[key].shape != gb[key].shape:
                per[key] = float("inf")
            else:
                per[key] = float(np.max(np.abs(ga[key] - gb[key]), initial=0.0))
        report.deviations[(str(a), str(b))] = per
    return report


def verify_equivalence(net: Network, x: np.ndarray, tol: float = 1e-10, workers: int = 2) -> EquivalenceReport:
    results = {kind.value: per_example_grads(net, x, kind, workers) for kind in StrategyKind}
    return compare_grads(results, tol)
