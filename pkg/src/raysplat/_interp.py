"""Low-level corner/weight kernels behind sampling and splatting.

Every hash structure is viewed as one flat cell table of shape (cells, K).
A point touches a fixed number of cells (8 for voxels, 4 per plane for
triplanes); ``*_corners`` writes the touched cell ids and interpolation
weights, and ``gather``/``scatter`` apply them. Sampling and splatting share
these weights, which is what makes them an adjoint pair.

The loops run in index order, so ``scatter`` is deterministic.
"""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _axis(u, n):
    t = (u + 1.0) * 0.5 * (n - 1)
    i0 = int(np.floor(t))
    if i0 > n - 2:
        i0 = n - 2
    if i0 < 0:
        i0 = 0
    return i0, t - i0


@numba.njit(cache=True, inline="always")
def _inside(x, y, z):
    return -1.0 <= x <= 1.0 and -1.0 <= y <= 1.0 and -1.0 <= z <= 1.0


@numba.njit(cache=True)
def voxel_corners(points, H, W, D, idx, w):
    n = points.shape[0]
    for p in range(n):
        x = points[p, 0]
        y = points[p, 1]
        z = points[p, 2]
        if not _inside(x, y, z):
            for c in range(8):
                idx[p, c] = 0
                w[p, c] = 0.0
            continue
        i0, fx = _axis(x, H)
        j0, fy = _axis(y, W)
        k0, fz = _axis(z, D)
        c = 0
        for di in range(2):
            wx = fx if di else 1.0 - fx
            for dj in range(2):
                wy = fy if dj else 1.0 - fy
                for dk in range(2):
                    wz = fz if dk else 1.0 - fz
                    idx[p, c] = ((i0 + di) * W + (j0 + dj)) * D + (k0 + dk)
                    w[p, c] = wx * wy * wz
                    c += 1


@numba.njit(cache=True, inline="always")
def _plane(p, a0, fa, b0, fb, nb, offset, base, idx, w):
    c = base
    for da in range(2):
        wa = fa if da else 1.0 - fa
        for db in range(2):
            wb = fb if db else 1.0 - fb
            idx[p, c] = offset + (a0 + da) * nb + (b0 + db)
            w[p, c] = wa * wb
            c += 1


@numba.njit(cache=True)
def triplane_corners(points, H, W, D, idx, w):
    n = points.shape[0]
    off_yz = H * W
    off_zx = H * W + W * D
    for p in range(n):
        x = points[p, 0]
        y = points[p, 1]
        z = points[p, 2]
        if not _inside(x, y, z):
            for c in range(12):
                idx[p, c] = 0
                w[p, c] = 0.0
            continue
        i0, fx = _axis(x, H)
        j0, fy = _axis(y, W)
        k0, fz = _axis(z, D)
        _plane(p, i0, fx, j0, fy, W, 0, 0, idx, w)
        _plane(p, j0, fy, k0, fz, D, off_yz, 4, idx, w)
        _plane(p, k0, fz, i0, fx, H, off_zx, 8, idx, w)


@numba.njit(cache=True)
def gather(table, idx, w, out):
    """out[p] = sum_c w[p, c] * table[idx[p, c]] (overwrites ``out``)."""
    n, nc = idx.shape
    K = table.shape[1]
    for p in range(n):
        for k in range(K):
            out[p, k] = 0.0
        for c in range(nc):
            wc = w[p, c]
            if wc == 0.0:
                continue
            r = idx[p, c]
            for k in range(K):
                out[p, k] += wc * table[r, k]


@numba.njit(cache=True)
def scatter(table, idx, w, vals):
    """table[idx[p, c]] += w[p, c] * vals[p] in point order."""
    n, nc = idx.shape
    K = table.shape[1]
    for p in range(n):
        for c in range(nc):
            wc = w[p, c]
            if wc == 0.0:
                continue
            r = idx[p, c]
            for k in range(K):
                table[r, k] += wc * vals[p, k]


@numba.njit(cache=True)
def scatter_weights(table, idx, w, scale):
    """Single-channel scatter of ``w * scale[p]``; the weight pass of splatting."""
    n, nc = idx.shape
    for p in range(n):
        for c in range(nc):
            wc = w[p, c]
            if wc == 0.0:
                continue
            table[idx[p, c], 0] += wc * scale[p]
