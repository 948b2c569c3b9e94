"""Dense float64 tensors and the grouped N-d convolution everything routes through.

Tensors are plain ``numpy.ndarray`` objects in float64, laid out row-major as
``(batch, channels, *spatial)``. Convolution is cross-correlation (offset ``+k``,
no kernel flip), with per-axis stride, dilation and symmetric zero padding, and
a ``groups`` argument that splits channels into independent blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

IntOrSeq = Union[int, Sequence[int]]

MAX_SPATIAL_AXES = 3


class InvalidGeometryError(ValueError):
    """Convolution arguments are inconsistent with each other or with the input."""


def as_tensor(values) -> np.ndarray:
    """Copy-free conversion to a C-contiguous float64 array where possible."""
    return np.ascontiguousarray(values, dtype=np.float64)


def _per_axis(value: IntOrSeq, n: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    out = tuple(int(v) for v in value)
    if len(out) != n:
        raise InvalidGeometryError(
            f"{name} has {len(out)} entries but the convolution has {n} spatial axes"
        )
    return out


def conv_output_extent(T: int, K: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    """Number of valid kernel placements along one spatial axis."""
    if stride < 1 or dilation < 1 or padding < 0 or K < 1:
        raise InvalidGeometryError(
            f"need K>=1, stride>=1, dilation>=1, padding>=0; got K={K}, "
            f"stride={stride}, dilation={dilation}, padding={padding}"
        )
    span = dilation * (K - 1) + 1
    if T + 2 * padding < span:
        raise InvalidGeometryError(
            f"kernel span {span} exceeds padded extent {T + 2 * padding}"
        )
    return (T + 2 * padding - span) // stride + 1


@dataclass(frozen=True)
class ConvGeometry:
    """Channel counts, kernel extents and arguments of one convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...] = ()
    dilation: tuple[int, ...] = ()
    padding: tuple[int, ...] = ()
    groups: int = 1

    def __post_init__(self):
        n = len(self.kernel)
        if not 1 <= n <= MAX_SPATIAL_AXES:
            raise InvalidGeometryError(f"kernel must have 1..3 spatial axes, got {n}")
        # empty tuple means "all ones / all zeros"
        for name, default in (("stride", 1), ("dilation", 1), ("padding", 0)):
            value = getattr(self, name)
            value = _per_axis(value if value != () else default, n, name)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.groups < 1:
            raise InvalidGeometryError(f"groups must be >= 1, got {self.groups}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise InvalidGeometryError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise InvalidGeometryError("kernel, stride and dilation entries must be >= 1")
        if min(self.padding) < 0:
            raise InvalidGeometryError("padding entries must be >= 0")

    @property
    def spatial_dims(self) -> int:
        return len(self.kernel)

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_spatial(self, spatial: Sequence[int]) -> tuple[int, ...]:
        if len(spatial) != self.spatial_dims:
            raise InvalidGeometryError(
                f"input has {len(spatial)} spatial axes, geometry expects {self.spatial_dims}"
            )
        return tuple(
            conv_output_extent(t, k, s, d, p)
            for t, k, s, d, p in zip(spatial, self.kernel, self.stride, self.dilation, self.padding)
        )


def pad_spatial(x: np.ndarray, padding: IntOrSeq) -> np.ndarray:
    """Zero-pad every spatial axis (axes 2..) by ``padding`` on both sides."""
    pads = _per_axis(padding, x.ndim - 2, "padding")
    if any(p < 0 for p in pads):
        raise InvalidGeometryError(f"padding must be non-negative, got {pads}")
    if not any(pads):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pads])


def truncate_spatial(x: np.ndarray, keep: IntOrSeq) -> np.ndarray:
    """Keep the first ``keep[a]`` indices of each spatial axis."""
    keep = _per_axis(keep, x.ndim - 2, "keep")
    for axis, (k, extent) in enumerate(zip(keep, x.shape[2:])):
        if not 0 <= k <= extent:
            raise IndexError(f"cannot keep {k} entries of spatial axis {axis} with extent {extent}")
    return x[(slice(None), slice(None)) + tuple(slice(0, k) for k in keep)]


def batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[n, j, i] = a[n, j] * b[n, i]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"batched_outer needs (B, J) and (B, I), got {a.shape} and {b.shape}")
    return a[:, :, None] * b[:, None, :]


def sliding_windows(
    x: np.ndarray,
    kernel: Sequence[int],
    out_spatial: Sequence[int],
    stride: Sequence[int],
    dilation: Sequence[int],
) -> np.ndarray:
    """Read-only view of shape (B, C, *out_spatial, *kernel) over an already padded x.

    ``view[b, c, *t, *k] == x[b, c, *(stride*t + dilation*k)]``.
    """
    x = np.ascontiguousarray(x)
    sb, sc, *ss = x.strides
    shape = (x.shape[0], x.shape[1], *out_spatial, *kernel)
    strides = (
        sb,
        sc,
        *(s * st for s, st in zip(ss, stride)),
        *(s * dl for s, dl in zip(ss, dilation)),
    )
    return as_strided(x, shape=shape, strides=strides, writeable=False)


def im2col(x_padded: np.ndarray, geom: ConvGeometry, out_spatial: Sequence[int]) -> np.ndarray:
    """Patch matrix of shape (G, C/G * prod(K), B * prod(out_spatial))."""
    B, C = x_padded.shape[:2]
    G, n = geom.groups, geom.spatial_dims
    win = sliding_windows(x_padded, geom.kernel, out_spatial, geom.stride, geom.dilation)
    win = win.reshape(B, G, C // G, *out_spatial, *geom.kernel)
    # (G, Cg, *K, B, *O)
    order = (1, 2, *range(3 + n, 3 + 2 * n), 0, *range(3, 3 + n))
    cols = np.transpose(win, order)
    return cols.reshape(G, (C // G) * int(np.prod(geom.kernel)), B * int(np.prod(out_spatial)))


def conv_nd(
    x: np.ndarray,
    h: np.ndarray,
    stride: IntOrSeq = 1,
    dilation: IntOrSeq = 1,
    padding: IntOrSeq = 0,
    groups: int = 1,
) -> np.ndarray:
    """Grouped cross-correlation with 1 to 3 spatial axes.

    ``x`` is (B, C, *T), ``h`` is (D, C/groups, *K). Output channel ``d`` of group
    ``g = d // (D/groups)`` only reads input channels ``g*C/groups ... (g+1)*C/groups - 1``::

        y[b, d, t] = sum_{c, k} x_pad[b, g*C/G + c, stride*t + dilation*k] * h[d, c, k]
    """
    x = as_tensor(x)
    h = as_tensor(h)
    n = x.ndim - 2
    if not 1 <= n <= MAX_SPATIAL_AXES:
        raise InvalidGeometryError(f"x must have 1..3 spatial axes, got shape {x.shape}")
    if h.ndim != x.ndim:
        raise InvalidGeometryError(f"kernel rank {h.ndim} does not match input rank {x.ndim}")
    B, C = x.shape[:2]
    D = h.shape[0]
    if groups < 1 or C % groups:
        raise InvalidGeometryError(f"groups={groups} must divide input channels C={C}")
    if h.shape[1] * groups != C:
        raise InvalidGeometryError(
            f"channel axis: kernel expects {h.shape[1] * groups} input channels, x has {C}"
        )
    geom = ConvGeometry(
        in_channels=C,
        out_channels=D,
        kernel=h.shape[2:],
        stride=_per_axis(stride, n, "stride"),
        dilation=_per_axis(dilation, n, "dilation"),
        padding=_per_axis(padding, n, "padding"),
        groups=groups,
    )
    out_spatial = geom.output_spatial(x.shape[2:])

    cols = im2col(pad_spatial(x, geom.padding), geom, out_spatial)
    w = h.reshape(groups, D // groups, -1)
    y = np.matmul(w, cols)  # (G, D/G, B*O)
    y = y.reshape(groups, D // groups, B, *out_spatial)
    y = np.moveaxis(y, 2, 0)
    return np.ascontiguousarray(y.reshape(B, D, *out_spatial))
