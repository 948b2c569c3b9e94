"""Per-example gradient clipping, noisy aggregation and a plain DP-SGD step."""

from __future__ import annotations

import numpy as np

from .layers import Network
from .strategies import StrategyKind, per_example_grads


def per_example_norm(grads: dict[str, np.ndarray]) -> np.ndarray:
    """Global L2 norm of each example's gradient, taken across all parameters."""
    sq = None
    for g in grads.values():
        s = np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1)
        sq = s if sq is None else sq + s
    return np.sqrt(sq)


def clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale example b by 1 / max(1, ||g_b|| / max_norm), one factor for all its parameters."""
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    divisor = np.maximum(1.0, per_example_norm(grads) / max_norm)
    out = {}
    for key, g in grads.items():
        out[key] = g / divisor.reshape((-1,) + (1,) * (g.ndim - 1))
    return out


def aggregate(clipped: dict[str, np.ndarray], max_norm: float, sigma: float = 0.0, seed: int = 0) -> dict[str, np.ndarray]:
    """(sum_b g_b + N(0, (sigma * max_norm)^2)) / B, noise drawn per parameter in key order."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    out = {}
    for key, g in clipped.items():
        total = g.sum(axis=0)
        if sigma > 0:
            total = total + sigma * max_norm * rng.standard_normal(total.shape)
        out[key] = total / g.shape[0]
    return out


def dp_sgd_step(
    net: Network,
    x: np.ndarray,
    *,
    lr: float,
    max_norm: float,
    sigma: float = 0.0,
    seed: int = 0,
    strategy: StrategyKind | str = StrategyKind.CRB,
    workers: int = 1,
) -> Network:
    """Return a new network with parameters moved by ``-lr`` times the noisy clipped mean."""
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    grads = per_example_grads(net, x, strategy, workers)
    update = aggregate(clip(grads, max_norm), max_norm, sigma, seed)
    params = net.parameters()
    return net.with_parameters({key: params[key] - lr * update[key] for key in params})
