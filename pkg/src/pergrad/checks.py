"""Correctness suite: seeded configuration sweep, finite differences and oracle runs.

The ``check`` CLI subcommand and the acceptance tests both drive
:func:`run_check`, so a pristine install can verify itself without pytest.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np

from . import layers
from .layers import Conv, Dense, Flatten, MaxPool, Network, ReLU
from .reference import conv_direct, conv_weight_grad_loop
from .strategies import StrategyKind, compare_grads, per_example_grads
from .tensor_core import ConvGeometry, conv_nd

STRIDES = (1, 2, 3)
DILATIONS = (1, 2)
PADDINGS = (0, 1, 2)
GROUPS = (1, 2, 4)
BATCHES = (1, 2, 5, 8)
CHANNELS = 4
DENSE_OUT = 3
# largest input extent per axis before we drop conv layers from a case
EXTENT_LIMIT = {1: 64, 2: 20}


@dataclass(frozen=True)
class SweepCase:
    spatial_dims: int
    stride: int
    dilation: int
    padding: int
    groups: int
    batch: int
    n_layers: int
    kernel: int
    pool: bool
    seed: int

    @property
    def geometry(self) -> ConvGeometry:
        n = self.spatial_dims
        return ConvGeometry(
            CHANNELS, CHANNELS, (self.kernel,) * n, (self.stride,) * n,
            (self.dilation,) * n, (self.padding,) * n, self.groups,
        )

    def input_extent(self, n_layers: int | None = None) -> int:
        """Smallest input extent leaving 2 positions after the last conv layer."""
        n_layers = self.n_layers if n_layers is None else n_layers
        t = 2
        for j in reversed(range(n_layers)):
            if self.pool and j == 1:
                t = 2 * t
            t = max(1, self.stride * (t - 1) + self.dilation * (self.kernel - 1) + 1 - 2 * self.padding)
        return t

    def build(self) -> tuple[Network, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        g = self.geometry
        net_layers = []
        for j in range(self.n_layers):
            net_layers += [
                Conv.init(rng, CHANNELS, CHANNELS, g.kernel, g.stride, g.dilation, g.padding, g.groups),
                ReLU(),
            ]
            if self.pool and j == 1:
                net_layers.append(MaxPool(2, 2))
        in_shape = (CHANNELS,) + (self.input_extent(),) * self.spatial_dims
        feat = Network(tuple(net_layers)).output_shape((1, *in_shape))
        net_layers += [Flatten(), Dense.init(rng, int(np.prod(feat[1:])), DENSE_OUT)]
        x = rng.standard_normal((self.batch, *in_shape))
        return Network(tuple(net_layers)), x


def sweep_cases(seed: int = 0) -> list[SweepCase]:
    """One case per (axes, stride, dilation, padding, groups) combination: 108 cases.

    Batch size, depth and kernel size cycle through their ranges so each value
    is hit many times; depth is reduced when the needed input would be too large.
    """
    cases = []
    combos = itertools.product((1, 2), STRIDES, DILATIONS, PADDINGS, GROUPS)
    for i, (n, s, d, p, gr) in enumerate(combos):
        batch = BATCHES[i % len(BATCHES)]
        n_layers = 1 + (i // len(BATCHES)) % 4
        kernel = 3 if (i // 2) % 2 == 0 else 2
        pool = n_layers >= 2 and i % 3 == 0
        case = SweepCase(n, s, d, p, gr, batch, n_layers, kernel, pool, seed * 100_003 + i)
        while case.n_layers > 1 and case.input_extent() > EXTENT_LIMIT[n]:
            case = SweepCase(n, s, d, p, gr, batch, case.n_layers - 1, kernel,
                             pool and case.n_layers - 1 >= 2, case.seed)
        cases.append(case)
    return cases


@dataclass(frozen=True)
class FDResult:
    key: str
    index: tuple
    example: int
    analytic: float
    numeric: float
    ok: bool

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return abs(self.analytic - self.numeric) / scale if scale else 0.0


def finite_difference_check(
    net: Network,
    x: np.ndarray,
    grads: dict[str, np.ndarray],
    per_layer: int = 10,
    step: float = 1e-6,
    rtol: float = 1e-5,
    atol: float = 1e-8,
    seed: int = 0,
) -> list[FDResult]:
    """Compare per-example gradient entries against central differences of L[b].

    For every parameterized layer, ``per_layer`` (example, entry) pairs are drawn
    uniformly, plus ``per_layer`` more among entries whose gradient is non-zero
    (ReLU and padding leave many exact zeros). An entry passes if the absolute
    error is at most ``atol`` or the relative error is at most ``rtol``.
    """
    rng = np.random.default_rng(seed)
    params = net.parameters()
    by_layer: dict[str, list[str]] = {}
    for key in params:
        by_layer.setdefault(key.split(".")[0], []).append(key)

    B = x.shape[0]
    results = []
    for keys in by_layer.values():
        offsets = np.cumsum([0] + [params[k].size for k in keys])
        flat_grads = np.concatenate([grads[k].reshape(B, -1) for k in keys], axis=1)
        picks = list(rng.integers(flat_grads.size, size=per_layer))
        nonzero = np.flatnonzero(flat_grads)
        if nonzero.size:
            picks += list(rng.choice(nonzero, size=per_layer))
        for pick in picks:
            b, p = divmod(int(pick), flat_grads.shape[1])
            which = int(np.searchsorted(offsets, p, side="right")) - 1
            key = keys[which]
            idx = np.unravel_index(p - int(offsets[which]), params[key].shape)

            def loss_at(delta):
                w = params[key].copy()
                w[idx] += delta
                out, _ = layers.forward(net.with_parameters({**params, key: w}), x)
                return layers.per_example_loss(out)[b]

            numeric = float((loss_at(step) - loss_at(-step)) / (2 * step))
            analytic = float(grads[key][(b, *idx)])
            err = abs(numeric - analytic)
            ok = err <= atol or err <= rtol * max(abs(numeric), abs(analytic))
            results.append(FDResult(key, tuple(int(i) for i in idx), b, analytic, numeric, ok))
    return results


def grads_digest(grads: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key, value in grads.items():
        h.update(key.encode())
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


def check_strategy_equivalence(cases, tol=1e-10, workers=2):
    worst, failed = 0.0, []
    digest = hashlib.sha256()
    for case in cases:
        net, x = case.build()
        results = {k.value: per_example_grads(net, x, k, workers) for k in StrategyKind}
        report = compare_grads(results, tol)
        worst = max(worst, report.max_deviation)
        if not report.ok:
            failed.append(case)
        digest.update(grads_digest(results["crb"]).encode())
    return (
        CheckResult(
            "strategy equivalence",
            not failed,
            f"{len(cases)} configs, max pairwise deviation {worst:.3e} (tol {tol:g}), {len(failed)} failing",
        ),
        digest.hexdigest(),
    )


def check_oracles(cases, tol_grad=1e-10, tol_conv=1e-12, small_extent=8):
    worst_grad = worst_conv = 0.0
    for case in cases:
        g = case.geometry
        rng = np.random.default_rng(case.seed + 1)
        x = rng.standard_normal((case.batch, CHANNELS) + (case.input_extent(1) + 3,) * case.spatial_dims)
        dy = rng.standard_normal((case.batch, CHANNELS, *g.output_spatial(x.shape[2:])))
        fast = layers.conv_per_example_grad(x, dy, g)
        worst_grad = max(worst_grad, float(np.max(np.abs(fast - conv_weight_grad_loop(x, dy, g)))))

        xs = rng.standard_normal((min(case.batch, 2), CHANNELS) + (small_extent,) * case.spatial_dims)
        h = rng.standard_normal(g.kernel_shape)
        y = conv_nd(xs, h, g.stride, g.dilation, g.padding, g.groups)
        worst_conv = max(worst_conv, float(np.max(np.abs(y - conv_direct(xs, h, g)))))
    return [
        CheckResult("grouped-conv per-example route vs loop", worst_grad <= tol_grad,
                    f"max deviation {worst_grad:.3e} (tol {tol_grad:g})"),
        CheckResult("conv_nd vs direct loop", worst_conv <= tol_conv,
                    f"max deviation {worst_conv:.3e} (tol {tol_conv:g})"),
    ]


def check_sum_identity(cases, tol=1e-9):
    worst = 0.0
    for case in cases:
        net, x = case.build()
        out, cache = layers.forward(net, x)
        per = layers.per_example_backward(net, cache, layers.loss_grad(out))
        agg = layers.aggregate_backward(net, cache, layers.loss_grad(out))
        for key in agg:
            worst = max(worst, float(np.max(np.abs(per[key].sum(axis=0) - agg[key]))))
    return CheckResult("sum identity", worst <= tol, f"max deviation {worst:.3e} (tol {tol:g})")


def check_finite_differences(cases, per_layer=10, seed=0):
    n_checked = n_failed = 0
    worst = 0.0
    for case in cases:
        net, x = case.build()
        grads = per_example_grads(net, x, StrategyKind.CRB)
        for r in finite_difference_check(net, x, grads, per_layer=per_layer, seed=seed + case.seed):
            n_checked += 1
            n_failed += not r.ok
            if max(abs(r.analytic), abs(r.numeric)) > 1e-6:
                worst = max(worst, r.rel_error)
    return CheckResult(
        "finite differences",
        n_failed == 0,
        f"{n_checked} entries, {n_failed} failing, worst rel. error {worst:.2e} (rtol 1e-05, atol 1e-08)",
    )


@dataclass
class CheckReport:
    results: list
    digest: str

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results] + [f"gradient digest {self.digest}"]


def run_check(seed: int = 0, tol: float = 1e-10, workers: int = 2, fd_every: int = 4) -> CheckReport:
    cases = sweep_cases(seed)
    equiv, digest = check_strategy_equivalence(cases, tol, workers)
    results = [equiv, *check_oracles(cases), check_sum_identity(cases)]
    results.append(check_finite_differences(cases[::fd_every], seed=seed))
    return CheckReport(results, digest)
