"""Direct-loop reference implementations used as independent oracles.

Nothing here touches ``im2col`` or the grouped-convolution reshapes; every value
is formed by walking the index sets of the defining sums. They are slow and only
meant for small shapes.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor_core import ConvGeometry


def _padded(x: np.ndarray, padding) -> np.ndarray:
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def conv_direct(x: np.ndarray, h: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Scalar loops over every (b, d, t, c, k)."""
    B, C = x.shape[:2]
    D = h.shape[0]
    G = geom.groups
    Cg, Dg = C // G, D // G
    out_spatial = geom.output_spatial(x.shape[2:])
    xp = _padded(x, geom.padding)
    y = np.zeros((B, D, *out_spatial))
    for b, d in itertools.product(range(B), range(D)):
        g = d // Dg
        for t in itertools.product(*(range(o) for o in out_spatial)):
            acc = 0.0
            for c in range(Cg):
                for k in itertools.product(*(range(K) for K in geom.kernel)):
                    pos = tuple(s * ti + r * ki for s, ti, r, ki in zip(geom.stride, t, geom.dilation, k))
                    acc += xp[(b, g * Cg + c) + pos] * h[(d, c) + k]
            y[(b, d) + t] = acc
    return y


def conv_weight_grad_loop(x: np.ndarray, dy: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Per-example kernel gradient by its defining sum.

    dh[b, d, c, k] = sum_t x_pad[b, g*C/G + c, stride*t + dilation*k] * dy[b, d, t]

    Loops over groups, kernel offsets and output positions; the (b, d, c)
    block at each step is a plain broadcast product.
    """
    B, C = x.shape[:2]
    D = dy.shape[1]
    G = geom.groups
    Cg, Dg = C // G, D // G
    out_spatial = dy.shape[2:]
    xp = _padded(x, geom.padding)
    dh = np.zeros((B, D, Cg, *geom.kernel))
    for g in range(G):
        xs = xp[:, g * Cg:(g + 1) * Cg]
        ds = dy[:, g * Dg:(g + 1) * Dg]
        for k in itertools.product(*(range(K) for K in geom.kernel)):
            acc = np.zeros((B, Dg, Cg))
            for t in itertools.product(*(range(o) for o in out_spatial)):
                pos = tuple(s * ti + r * ki for s, ti, r, ki in zip(geom.stride, t, geom.dilation, k))
                acc += ds[(slice(None), slice(None)) + t][:, :, None] * xs[(slice(None), slice(None)) + pos][:, None, :]
            dh[(slice(None), slice(g * Dg, (g + 1) * Dg), slice(None)) + k] = acc
    return dh


def dense_weight_grad_loop(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """dH[b, j, i] = dy[b, j] * x[b, i], element by element."""
    B, I = x.shape
    J = dy.shape[1]
    out = np.zeros((B, J, I))
    for b, j, i in itertools.product(range(B), range(J), range(I)):
        out[b, j, i] = dy[b, j] * x[b, i]
    return out
