"""Array-level layer primitives with explicit backward passes.

Every tensor is channels-first ``(B, C, *spatial)`` with 2 or 3 spatial axes.
Forward functions return outputs only; each has a ``*_vjp`` companion that
maps the upstream gradient to input/parameter gradients.  The stride-1 "same"
convolution is the hot kernel and dispatches through mcseg.backend; the
non-overlapping stride-2 down/up convolutions reduce to reshapes plus BLAS
tensordot and need no JIT.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mcseg import backend


def _spatial_axes(x: np.ndarray) -> Tuple[int, ...]:
    return tuple(range(2, x.ndim))


def _pad_same(x: np.ndarray, kernel: Tuple[int, ...]) -> np.ndarray:
    pads = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
    return np.pad(x, pads)


def _windows(xp: np.ndarray, kernel: Tuple[int, ...]) -> np.ndarray:
    return sliding_window_view(xp, kernel, axis=tuple(range(2, xp.ndim)))


def conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Odd-kernel stride-1 convolution with zero 'same' padding.

    x: (B, Ci, *S); w: (Co, Ci, *k); b: (Co,).
    """
    kernel = w.shape[2:]
    nd = len(kernel)
    xp = _pad_same(x, kernel)
    if backend.use_numba(nd):
        from mcseg import _kernels

        out = np.empty((x.shape[0], w.shape[0]) + x.shape[2:], dtype=x.dtype)
        _kernels.conv2d_same(
            np.ascontiguousarray(xp),
            np.ascontiguousarray(w),
            np.ascontiguousarray(b),
            out,
        )
        return out
    win = _windows(xp, kernel)
    axes_x = (1,) + tuple(range(x.ndim, x.ndim + nd))
    axes_w = (1,) + tuple(range(2, 2 + nd))
    out = np.tensordot(win, w, axes=(axes_x, axes_w))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += b.reshape((1, -1) + (1,) * nd)
    return out


def conv_same_vjp(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv_same w.r.t. input, weights and bias."""
    kernel = w.shape[2:]
    nd = len(kernel)
    spatial = tuple(range(2, 2 + nd))
    # input gradient: same-conv of g with the spatially flipped, transposed kernel
    w_t = np.ascontiguousarray(np.flip(w, axis=spatial).swapaxes(0, 1))
    zero_bias = np.zeros(w_t.shape[0], dtype=g.dtype)
    dx = conv_same(g, w_t, zero_bias)
    xp = _pad_same(x, kernel)
    if backend.use_numba(nd):
        from mcseg import _kernels

        dw = np.empty_like(w)
        _kernels.conv2d_same_wgrad(
            np.ascontiguousarray(xp), np.ascontiguousarray(g), dw
        )
    else:
        win = _windows(xp, kernel)
        sum_axes_win = (0,) + tuple(range(2, 2 + nd))
        sum_axes_g = (0,) + tuple(range(2, 2 + nd))
        dw_t = np.tensordot(win, g, axes=(sum_axes_win, sum_axes_g))  # (Ci, *k, Co)
        dw = np.ascontiguousarray(np.moveaxis(dw_t, -1, 0))
    db = g.sum(axis=(0,) + spatial)
    return dx, dw, db


def _interleave_order(nd: int) -> Tuple[int, ...]:
    # (B, *S, C, *two) -> (B, C, S1, 2, S2, 2, ...)
    return tuple([0, nd + 1] + [ax for i in range(nd) for ax in (1 + i, nd + 2 + i)])


def _blocked(x: np.ndarray) -> np.ndarray:
    """(B, C, 2*S1, ...) -> (B, C, S1, 2, S2, 2, ...) view for stride-2 ops."""
    shape = [x.shape[0], x.shape[1]]
    for s in x.shape[2:]:
        shape += [s // 2, 2]
    return x.reshape(shape)


def down2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Non-overlapping stride-2 downsampling convolution (kernel 2 per axis).

    x: (B, Ci, *2S); w: (Co, Ci, *2); b: (Co,).
    """
    nd = x.ndim - 2
    xr = _blocked(x)
    ax_x = (1,) + tuple(3 + 2 * i for i in range(nd))
    ax_w = tuple(range(1, 2 + nd))
    out = np.tensordot(xr, w, axes=(ax_x, ax_w))  # (B, *S, Co)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += b.reshape((1, -1) + (1,) * nd)
    return out


def down2_vjp(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nd = x.ndim - 2
    xr = _blocked(x)
    ax_batch_x = (0,) + tuple(2 + 2 * i for i in range(nd))
    ax_batch_g = (0,) + tuple(range(2, 2 + nd))
    dw_t = np.tensordot(xr, g, axes=(ax_batch_x, ax_batch_g))  # (Ci, *2, Co)
    dw = np.ascontiguousarray(np.moveaxis(dw_t, -1, 0))
    dx_t = np.tensordot(g, w, axes=((1,), (0,)))  # (B, *S, Ci, *2)
    dx = dx_t.transpose(_interleave_order(nd)).reshape(x.shape)
    db = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
    return np.ascontiguousarray(dx), dw, db


def up2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-2 transposed convolution (kernel 2 per axis, no overlap).

    x: (B, Ci, *S); w: (Ci, Co, *2); b: (Co,). Output doubles each axis.
    """
    nd = x.ndim - 2
    t = np.tensordot(x, w, axes=((1,), (0,)))  # (B, *S, Co, *2)
    out = t.transpose(_interleave_order(nd))
    out = np.ascontiguousarray(out.reshape((x.shape[0], w.shape[1]) + tuple(2 * s for s in x.shape[2:])))
    out += b.reshape((1, -1) + (1,) * nd)
    return out


def up2_vjp(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nd = x.ndim - 2
    gr = _blocked(g)
    ax_g = (1,) + tuple(3 + 2 * i for i in range(nd))
    ax_w = tuple(range(1, 2 + nd))
    dx_t = np.tensordot(gr, w, axes=(ax_g, ax_w))  # (B, *S, Ci)
    dx = np.ascontiguousarray(np.moveaxis(dx_t, -1, 1))
    ax_batch_x = (0,) + tuple(range(2, 2 + nd))
    ax_batch_g = (0,) + tuple(2 + 2 * i for i in range(nd))
    dw = np.tensordot(x, gr, axes=(ax_batch_x, ax_batch_g))  # (Ci, Co, *2)
    db = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
    return dx, np.ascontiguousarray(dw), db


def conv1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-voxel linear head. x: (B, Ci, *S); w: (Co, Ci); b: (Co,)."""
    nd = x.ndim - 2
    out = np.tensordot(x, w, axes=((1,), (1,)))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += b.reshape((1, -1) + (1,) * nd)
    return out


def conv1_vjp(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nd = x.ndim - 2
    dx = np.ascontiguousarray(np.moveaxis(np.tensordot(g, w, axes=((1,), (0,))), -1, 1))
    sum_axes = (0,) + tuple(range(2, 2 + nd))
    dw = np.tensordot(g, x, axes=(sum_axes, sum_axes))
    db = g.sum(axis=sum_axes)
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_vjp(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.where(x > 0, g, 0)


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> Optional[np.ndarray]:
    """Inverted-dropout multiplier, or None when the rate is zero."""
    if rate <= 0:
        return None
    dtype = np.dtype(dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(probs: np.ndarray, g: np.ndarray, axis: int = 1) -> np.ndarray:
    inner = (g * probs).sum(axis=axis, keepdims=True)
    return probs * (g - inner)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
