"""Layers, forward/backward passes and per-example weight gradients.

A :class:`Network` is an immutable sequence of layers. ``forward`` returns the
output together with a :class:`ForwardCache` holding each layer's input, which
is all the backward passes need. Two backward passes are offered:

* :func:`aggregate_backward` -- the usual batch-summed parameter gradients.
* :func:`per_example_backward` -- one gradient row per example, using the outer
  product for dense layers and a single grouped convolution for conv layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .tensor_core import (
    ConvGeometry,
    InvalidGeometryError,
    as_tensor,
    batched_outer,
    conv_nd,
    im2col,
    pad_spatial,
    sliding_windows,
    truncate_spatial,
)


class CompositionError(ValueError):
    """A layer received an input whose shape it cannot accept."""

    def __init__(self, index: int, layer, reason: str):
        self.index = index
        super().__init__(f"layer {index} ({type(layer).__name__}): {reason}")


def dense_per_example_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Per-example weight gradient of ``y = x @ H.T``: ``out[b] = outer(dy[b], x[b])``."""
    if x.shape[0] != dy.shape[0]:
        raise ValueError(f"batch mismatch: x has {x.shape[0]} rows, dy has {dy.shape[0]}")
    return batched_outer(dy, x)


def conv_per_example_grad(x: np.ndarray, dy: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Per-example kernel gradients (B, D, C/G, *K) from one grouped convolution.

    The batch is folded into the channel axis of the input and the output
    gradients become B*D single-channel kernels, so that ``groups = B * G``
    keeps every example (and every layer group) separate. The channel axis of
    the layer becomes an extra leading spatial axis of extent C/G. Stride and
    dilation trade places, padding carries over, and the trailing spatial
    extents are cut back to the kernel size.
    """
    B, C = x.shape[:2]
    D, G, n = geom.out_channels, geom.groups, geom.spatial_dims
    if n + 1 > 3:
        raise InvalidGeometryError(
            f"per-example gradient needs a {n + 1}-axis convolution; at most 3 are supported"
        )
    if dy.shape[:2] != (B, D):
        raise ValueError(f"dy has shape {dy.shape}, expected ({B}, {D}, ...)")
    Cg = C // G

    x_r = x.reshape(1, B * G, Cg, *x.shape[2:])
    dy_r = dy.reshape(B * D, 1, 1, *dy.shape[2:])
    dh = conv_nd(
        x_r,
        dy_r,
        groups=B * G,
        padding=(0, *geom.padding),
        stride=(1, *geom.dilation),
        dilation=(1, *geom.stride),
    )
    # (1, B*D, C/G, ?...) -> keep K entries on each layer spatial axis
    dh = truncate_spatial(dh, (Cg, *geom.kernel))
    return dh.reshape(B, D, Cg, *geom.kernel)


def per_example_loss(output: np.ndarray) -> np.ndarray:
    """L[b] = 0.5 * ||output[b]||^2."""
    return 0.5 * np.sum(output.reshape(output.shape[0], -1) ** 2, axis=1)


def loss_grad(output: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_b L[b]`` with respect to the output, which is the output itself."""
    return output


def _spatial_sum(dy: np.ndarray) -> np.ndarray:
    return dy.sum(axis=tuple(range(2, dy.ndim)))


@dataclass(frozen=True, eq=False)
class Conv:
    weight: np.ndarray
    bias: Optional[np.ndarray]
    geometry: ConvGeometry

    def __post_init__(self):
        if self.weight.shape != self.geometry.kernel_shape:
            raise InvalidGeometryError(
                f"kernel shape {self.weight.shape} does not match geometry {self.geometry.kernel_shape}"
            )
        if self.bias is not None and self.bias.shape != (self.geometry.out_channels,):
            raise InvalidGeometryError(f"bias shape {self.bias.shape} != ({self.geometry.out_channels},)")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel: Sequence[int],
        stride=(),
        dilation=(),
        padding=(),
        groups: int = 1,
        bias: bool = True,
    ) -> "Conv":
        geom = ConvGeometry(in_channels, out_channels, tuple(kernel), stride, dilation, padding, groups)
        fan_in = (in_channels // groups) * math.prod(geom.kernel)
        w = rng.standard_normal(geom.kernel_shape) / math.sqrt(fan_in)
        b = rng.standard_normal(out_channels) / math.sqrt(fan_in) if bias else None
        return cls(_frozen(w), _frozen(b), geom)

    def params(self) -> dict:
        return {"weight": self.weight} if self.bias is None else {"weight": self.weight, "bias": self.bias}

    def with_params(self, params: dict) -> "Conv":
        return replace(self, weight=_frozen(params["weight"]), bias=_frozen(params.get("bias")))

    def check_input(self, shape):
        g = self.geometry
        if len(shape) != 2 + g.spatial_dims:
            raise InvalidGeometryError(f"expected {2 + g.spatial_dims}-d input, got shape {tuple(shape)}")
        if shape[1] != g.in_channels:
            raise InvalidGeometryError(f"channel axis: expected {g.in_channels}, got {shape[1]}")
        return (shape[0], g.out_channels, *g.output_spatial(shape[2:]))

    def forward(self, x):
        g = self.geometry
        y = conv_nd(x, self.weight, g.stride, g.dilation, g.padding, g.groups)
        if self.bias is not None:
            y += self.bias.reshape((1, -1) + (1,) * g.spatial_dims)
        return y, None

    def backward_input(self, x, aux, dy):
        """Transposed convolution, expressed as a convolution of the dilated dy
        with the group-wise transposed, spatially flipped kernel."""
        g = self.geometry
        n, G = g.spatial_dims, g.groups
        B, C = x.shape[:2]
        D = g.out_channels
        out_spatial = dy.shape[2:]

        dilated = np.zeros((B, D, *((o - 1) * s + 1 for o, s in zip(out_spatial, g.stride))))
        dilated[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in g.stride)] = dy

        w = self.weight.reshape(G, D // G, C // G, *g.kernel)
        w = np.swapaxes(w, 1, 2)[(Ellipsis,) + (slice(None, None, -1),) * n]
        w = w.reshape(C, D // G, *g.kernel)

        full = conv_nd(
            dilated,
            w,
            dilation=g.dilation,
            padding=tuple(r * (k - 1) for r, k in zip(g.dilation, g.kernel)),
            groups=G,
        )
        # full covers padded positions [0, L); positions past L were never read
        padded_extent = [t + 2 * p for t, p in zip(x.shape[2:], g.padding)]
        tail = [(0, pe - L) for pe, L in zip(padded_extent, full.shape[2:])]
        full = np.pad(full, [(0, 0), (0, 0)] + tail)
        crop = tuple(slice(p, p + t) for p, t in zip(g.padding, x.shape[2:]))
        return np.ascontiguousarray(full[(slice(None), slice(None)) + crop])

    def aggregate_grads(self, x, dy) -> dict:
        g = self.geometry
        G, D = g.groups, g.out_channels
        B = x.shape[0]
        out_spatial = dy.shape[2:]
        cols = im2col(pad_spatial(x, g.padding), g, out_spatial)  # (G, Cg*K, B*O)
        d = dy.reshape(B, G, D // G, -1).transpose(1, 2, 0, 3).reshape(G, D // G, -1)
        dw = np.matmul(d, cols.transpose(0, 2, 1)).reshape(g.kernel_shape)
        grads = {"weight": dw}
        if self.bias is not None:
            grads["bias"] = _spatial_sum(dy).sum(axis=0)
        return grads

    def per_example_grads(self, x, dy) -> dict:
        grads = {"weight": conv_per_example_grad(x, dy, self.geometry)}
        if self.bias is not None:
            grads["bias"] = _spatial_sum(dy)
        return grads


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # (J, I)
    bias: Optional[np.ndarray]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError(f"dense weight must be 2-d, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @classmethod
    def init(cls, rng: np.random.Generator, in_features: int, out_features: int, bias: bool = True) -> "Dense":
        w = rng.standard_normal((out_features, in_features)) / math.sqrt(in_features)
        b = rng.standard_normal(out_features) / math.sqrt(in_features) if bias else None
        return cls(_frozen(w), _frozen(b))

    def params(self) -> dict:
        return {"weight": self.weight} if self.bias is None else {"weight": self.weight, "bias": self.bias}

    def with_params(self, params: dict) -> "Dense":
        return replace(self, weight=_frozen(params["weight"]), bias=_frozen(params.get("bias")))

    def check_input(self, shape):
        if len(shape) != 2 or shape[1] != self.weight.shape[1]:
            raise ValueError(f"expected input (B, {self.weight.shape[1]}), got {tuple(shape)}")
        return (shape[0], self.weight.shape[0])

    def forward(self, x):
        y = x @ self.weight.T
        if self.bias is not None:
            y += self.bias
        return y, None

    def backward_input(self, x, aux, dy):
        return dy @ self.weight

    def aggregate_grads(self, x, dy) -> dict:
        grads = {"weight": dy.T @ x}
        if self.bias is not None:
            grads["bias"] = dy.sum(axis=0)
        return grads

    def per_example_grads(self, x, dy) -> dict:
        grads = {"weight": dense_per_example_grad(x, dy)}
        if self.bias is not None:
            grads["bias"] = dy.copy()
        return grads


@dataclass(frozen=True)
class ReLU:
    def check_input(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward_input(self, x, aux, dy):
        return dy * (x > 0)


@dataclass(frozen=True)
class MaxPool:
    """Max pooling over all spatial axes. Ties go to the lowest flat index in the window."""

    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("max-pool window and stride must be >= 1")

    def _out_spatial(self, spatial):
        for t in spatial:
            if t < self.window:
                raise InvalidGeometryError(f"spatial extent {t} smaller than pooling window {self.window}")
        return tuple((t - self.window) // self.stride + 1 for t in spatial)

    def check_input(self, shape):
        if len(shape) < 3:
            raise ValueError(f"max-pool needs spatial axes, got shape {tuple(shape)}")
        return (*shape[:2], *self._out_spatial(shape[2:]))

    def forward(self, x):
        n = x.ndim - 2
        out_spatial = self._out_spatial(x.shape[2:])
        win = sliding_windows(x, (self.window,) * n, out_spatial, (self.stride,) * n, (1,) * n)
        win = win.reshape(*x.shape[:2], *out_spatial, -1)
        arg = np.argmax(win, axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, arg

    def backward_input(self, x, arg, dy):
        n = x.ndim - 2
        B, C = x.shape[:2]
        spatial = x.shape[2:]
        offsets = np.unravel_index(arg, (self.window,) * n)
        grids = np.meshgrid(*(np.arange(o) for o in arg.shape[2:]), indexing="ij")
        pos = tuple(grid * self.stride + off for grid, off in zip(grids, offsets))
        flat = np.ravel_multi_index(pos, spatial).reshape(B * C, -1)
        rows = np.broadcast_to(np.arange(B * C)[:, None], flat.shape)
        dx = np.zeros((B * C, math.prod(spatial)))
        np.add.at(dx, (rows, flat), dy.reshape(B * C, -1))
        return dx.reshape(x.shape)


@dataclass(frozen=True)
class Flatten:
    def check_input(self, shape):
        return (shape[0], math.prod(shape[1:]))

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward_input(self, x, aux, dy):
        return dy.reshape(x.shape)


def _frozen(a):
    if a is None:
        return None
    a = as_tensor(a).copy()
    a.flags.writeable = False
    return a


def has_params(layer) -> bool:
    return hasattr(layer, "params")


@dataclass(frozen=True)
class Network:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not any(has_params(layer) for layer in self.layers):
            raise ValueError("network needs at least one parameterized layer")

    def parameters(self) -> dict[str, np.ndarray]:
        """Parameters keyed ``"<layer index>.<name>"`` in layer order."""
        out = {}
        for i, layer in enumerate(self.layers):
            if has_params(layer):
                for name, value in layer.params().items():
                    out[f"{i}.{name}"] = value
        return out

    def with_parameters(self, params: dict) -> "Network":
        layers = list(self.layers)
        for i, layer in enumerate(layers):
            if has_params(layer):
                own = {name: params[f"{i}.{name}"] for name in layer.params()}
                layers[i] = layer.with_params(own)
        return Network(tuple(layers))

    def share(self) -> "Network":
        """A replica that points at the same (read-only) parameter arrays."""
        return Network(self.layers)

    def output_shape(self, input_shape: Sequence[int]) -> tuple:
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.check_input(shape)
            except ValueError as exc:
                raise CompositionError(i, layer, str(exc)) from exc
        return shape

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    aux: list = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = as_tensor(x)
    cache = ForwardCache()
    for i, layer in enumerate(net.layers):
        try:
            layer.check_input(x.shape)
        except ValueError as exc:
            raise CompositionError(i, layer, str(exc)) from exc
        cache.inputs.append(x)
        x, aux = layer.forward(x)
        cache.aux.append(aux)
    return x, cache


def backward_input(layer, x: np.ndarray, dy: np.ndarray, aux=None) -> np.ndarray:
    """Gradient with respect to a single layer's input."""
    expected = layer.check_input(x.shape)
    if tuple(dy.shape) != tuple(expected):
        raise ValueError(f"dy shape {dy.shape} does not match layer output shape {expected}")
    return layer.backward_input(x, aux, dy)


def _backward(net: Network, cache: ForwardCache, d_out: np.ndarray, per_example: bool, need_input=False):
    grads = {}
    dy = as_tensor(d_out)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        x = cache.inputs[i]
        if has_params(layer):
            layer_grads = layer.per_example_grads(x, dy) if per_example else layer.aggregate_grads(x, dy)
            for name, value in layer_grads.items():
                grads[f"{i}.{name}"] = value
        if i > 0 or need_input:
            dy = layer.backward_input(x, cache.aux[i], dy)
    ordered = {key: grads[key] for key in net.parameters()}
    return (ordered, dy) if need_input else ordered


def aggregate_backward(net: Network, cache: ForwardCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Batch-summed parameter gradients."""
    return _backward(net, cache, d_out, per_example=False)


def per_example_backward(net: Network, cache: ForwardCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients with a leading batch axis, from one batched backward pass."""
    return _backward(net, cache, d_out, per_example=True)


def input_grad(net: Network, cache: ForwardCache, d_out: np.ndarray) -> np.ndarray:
    return _backward(net, cache, d_out, per_example=False, need_input=True)[1]
