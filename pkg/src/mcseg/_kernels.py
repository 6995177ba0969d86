"""numba JIT kernels for the hot inner loops.

Import of this module must only be attempted via mcseg.backend, which guards
against numba being absent.  Every kernel writes each output element from
exactly one thread (no cross-thread reductions), so results are deterministic
for a fixed input regardless of thread count.
"""

import numpy as np
from numba import njit, prange

_CONV_OPTS = {"cache": True, "fastmath": True}
# the distance-transform scan relies on IEEE inf comparisons; no fastmath
_EDT_OPTS = {"cache": True}


@njit(parallel=True, **_CONV_OPTS)
def conv2d_same(xp, w, bias, out):
    """3x3 (or any odd kernel) stride-1 convolution on a pre-padded input.

    xp:   (B, Ci, H + kh - 1, W + kw - 1) padded input
    w:    (Co, Ci, kh, kw)
    bias: (Co,)
    out:  (B, Co, H, W), overwritten
    """
    B, Co, H, W = out.shape
    Ci = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    for no in prange(B * Co):
        n = no // Co
        o = no % Co
        for i in range(H):
            row = out[n, o, i]
            for j in range(W):
                row[j] = bias[o]
            for c in range(Ci):
                for ki in range(kh):
                    xrow = xp[n, c, i + ki]
                    for kj in range(kw):
                        wv = w[o, c, ki, kj]
                        for j in range(W):
                            row[j] += wv * xrow[j + kj]


@njit(parallel=True, **_CONV_OPTS)
def conv2d_same_wgrad(xp, gout, dw):
    """Weight gradient of conv2d_same.

    xp:   (B, Ci, H + kh - 1, W + kw - 1) padded input from the forward pass
    gout: (B, Co, H, W) upstream gradient
    dw:   (Co, Ci, kh, kw), overwritten
    """
    Co, Ci, kh, kw = dw.shape
    B, _, H, W = gout.shape
    for o in prange(Co):
        for c in range(Ci):
            for ki in range(kh):
                for kj in range(kw):
                    acc = 0.0
                    for n in range(B):
                        for i in range(H):
                            grow = gout[n, o, i]
                            xrow = xp[n, c, i + ki]
                            for j in range(W):
                                acc += grow[j] * xrow[j + kj]
                    dw[o, c, ki, kj] = acc


@njit(**_EDT_OPTS)
def _dt1d(f, pos, n, out):
    """Exact 1-D squared-distance transform (lower envelope of parabolas).

    f:   squared distances at anchor points (np.inf where no anchor)
    pos: physical coordinate of each sample along the line
    out: squared distance to the nearest anchor, overwritten
    """
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = ((f[q] + pos[q] ** 2) - (f[v[k]] + pos[v[k]] ** 2)) / (
            2.0 * pos[q] - 2.0 * pos[v[k]]
        )
        while s <= z[k]:
            k -= 1
            s = ((f[q] + pos[q] ** 2) - (f[v[k]] + pos[v[k]] ** 2)) / (
                2.0 * pos[q] - 2.0 * pos[v[k]]
            )
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    k = 0
    for q in range(n):
        while z[k + 1] < pos[q]:
            k += 1
        d = pos[q] - pos[v[k]]
        out[q] = d * d + f[v[k]]


@njit(parallel=True, **_EDT_OPTS)
def edt2d_sq(seed, s0, s1, work):
    """Squared Euclidean distance to the nearest seed voxel, 2-D.

    seed: (H, W) uint8, nonzero marks anchor voxels
    s0, s1: per-axis spacing
    work: (H, W) float64 output, overwritten
    """
    H, W = seed.shape
    for j in prange(W):
        f = np.empty(H, dtype=np.float64)
        pos = np.empty(H, dtype=np.float64)
        out = np.empty(H, dtype=np.float64)
        for i in range(H):
            f[i] = 0.0 if seed[i, j] else np.inf
            pos[i] = i * s0
        _dt1d(f, pos, H, out)
        for i in range(H):
            work[i, j] = out[i]
    for i in prange(H):
        f = np.empty(W, dtype=np.float64)
        pos = np.empty(W, dtype=np.float64)
        out = np.empty(W, dtype=np.float64)
        for j in range(W):
            f[j] = work[i, j]
            pos[j] = j * s1
        _dt1d(f, pos, W, out)
        for j in range(W):
            work[i, j] = out[j]


@njit(parallel=True, **_EDT_OPTS)
def edt3d_sq(seed, s0, s1, s2, work):
    """Squared Euclidean distance to the nearest seed voxel, 3-D."""
    D, H, W = seed.shape
    for hw in prange(H * W):
        i = hw // W
        j = hw % W
        f = np.empty(D, dtype=np.float64)
        pos = np.empty(D, dtype=np.float64)
        out = np.empty(D, dtype=np.float64)
        for d in range(D):
            f[d] = 0.0 if seed[d, i, j] else np.inf
            pos[d] = d * s0
        _dt1d(f, pos, D, out)
        for d in range(D):
            work[d, i, j] = out[d]
    for dw_ in prange(D * W):
        d = dw_ // W
        j = dw_ % W
        f = np.empty(H, dtype=np.float64)
        pos = np.empty(H, dtype=np.float64)
        out = np.empty(H, dtype=np.float64)
        for i in range(H):
            f[i] = work[d, i, j]
            pos[i] = i * s1
        _dt1d(f, pos, H, out)
        for i in range(H):
            work[d, i, j] = out[i]
    for dh in prange(D * H):
        d = dh // H
        i = dh % H
        f = np.empty(W, dtype=np.float64)
        pos = np.empty(W, dtype=np.float64)
        out = np.empty(W, dtype=np.float64)
        for j in range(W):
            f[j] = work[d, i, j]
            pos[j] = j * s2
        _dt1d(f, pos, W, out)
        for j in range(W):
            work[d, i, j] = out[j]
