"""Numba kernels for the O(N^2) pairwise Biot-Savart interaction sums.

Two evaluation paths, both deterministic for any worker count:

  - reference: per-particle sum over all j != i in index order, bicubic
    float64 correction table (matches the scalar kernel evaluation to
    interpolation accuracy ~1e-11);
  - fast: replica-batched halved pair loop, bilinear float32 correction
    table folded onto x1 >= 0 by oddness (~1e-5 point accuracy, used for
    large ensembles where the reference path would dominate runtime).

In the halved loop, pair (i, j) adds +K to i and -K to j with the same
evaluated value, so the force sum of antisymmetric kernels is conserved
exactly.
"""

import math

import numpy as np
from numba import njit, prange

TAU = 2.0 * np.pi
INV_TAU = 1.0 / TAU


@njit(cache=True, inline="always")
def _lagrange4(t):
    w0 = -t * (t - 1.0) * (t - 2.0) / 6.0
    w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w2 = -(t + 1.0) * t * (t - 2.0) / 2.0
    w3 = (t + 1.0) * t * (t - 1.0) / 6.0
    return w0, w1, w2, w3


@njit(cache=True, inline="always")
def _bs_eval_bicubic(dx, dy, table, inv_h, pad, delta):
    """Periodic Biot-Savart at one displacement in (-pi, pi]^2.

    Free-space term plus bicubic lookup of the smooth correction;
    magnitude-capped inside radius delta (delta = 0: no cap).
    """
    scale = 1.0
    if delta > 0.0:
        r2 = dx * dx + dy * dy
        if r2 < delta * delta:
            r = np.sqrt(r2)
            s = delta / r
            dx *= s
            dy *= s
            scale = 1.0 / s
    r2 = dx * dx + dy * dy
    c = 1.0 / (TAU * r2)
    f1 = -c * dy
    f2 = c * dx
    ux = (dx + np.pi) * inv_h - 0.5 + pad
    uy = (dy + np.pi) * inv_h - 0.5 + pad
    ix = int(np.floor(ux))
    iy = int(np.floor(uy))
    tx = ux - ix
    ty = uy - iy
    wx0, wx1, wx2, wx3 = _lagrange4(tx)
    wy0, wy1, wy2, wy3 = _lagrange4(ty)
    t1 = 0.0
    t2 = 0.0
    for a in range(4):
        if a == 0:
            wa = wx0
        elif a == 1:
            wa = wx1
        elif a == 2:
            wa = wx2
        else:
            wa = wx3
        row = ix + a - 1
        t1 += wa * (wy0 * table[row, iy - 1, 0] + wy1 * table[row, iy, 0]
                    + wy2 * table[row, iy + 1, 0]
                    + wy3 * table[row, iy + 2, 0])
        t2 += wa * (wy0 * table[row, iy - 1, 1] + wy1 * table[row, iy, 1]
                    + wy2 * table[row, iy + 1, 1]
                    + wy3 * table[row, iy + 2, 1])
    return scale * (f1 + t1), scale * (f2 + t2)


@njit(cache=True, parallel=True)
def bs_pair_drift_reference(pos, table, inv_h, pad, delta, out):
    """v_i = (1/N) sum_{j != i} K(X_i - X_j), j in index order per i.

    Returns flat index i*N + j of the first exact coincidence when
    delta = 0, else -1. pos (N, 2), table bicubic float64, out (N, 2).
    """
    N = pos.shape[0]
    inv_n = 1.0 / N
    bad = np.full(N, -1, dtype=np.int64)
    for i in prange(N):
        xi = pos[i, 0]
        yi = pos[i, 1]
        s1 = 0.0
        s2 = 0.0
        for j in range(N):
            if j == i:
                continue
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            dx -= TAU * np.rint(dx * INV_TAU)
            dy -= TAU * np.rint(dy * INV_TAU)
            if dx * dx + dy * dy == 0.0:
                if delta > 0.0:
                    continue  # capped kernel vanishes at 0
                if bad[i] < 0:
                    bad[i] = i * N + j
                continue
            f1, f2 = _bs_eval_bicubic(dx, dy, table, inv_h, pad, delta)
            s1 += f1
            s2 += f2
        out[i, 0] = s1 * inv_n
        out[i, 1] = s2 * inv_n
    for i in range(N):
        if bad[i] >= 0:
            return bad[i]
    return -1


@njit(cache=True, parallel=True, fastmath=True)
def bs_pair_drift_fast(pos, table, inv_h, pad, delta, out):
    """Replica-batched halved pair sum, bilinear float32 correction.

    pos, out: (R, N, 2). The correction table covers x1 in [0, pi] with
    one pad cell; queries with dx < 0 are folded by K(-x) = -K(x).
    Returns r*N*N + i*N + j of the first coincidence when delta = 0,
    else -1.
    """
    R = pos.shape[0]
    N = pos.shape[1]
    inv_n = 1.0 / N
    d2 = delta * delta
    bad = np.full(R, -1, dtype=np.int64)
    for r in prange(R):
        for i in range(N):
            out[r, i, 0] = 0.0
            out[r, i, 1] = 0.0
        for i in range(N):
            xi = pos[r, i, 0]
            yi = pos[r, i, 1]
            a1 = 0.0
            a2 = 0.0
            for j in range(i + 1, N):
                dx = xi - pos[r, j, 0]
                dy = yi - pos[r, j, 1]
                dx -= TAU * np.rint(dx * INV_TAU)
                dy -= TAU * np.rint(dy * INV_TAU)
                scale = 1.0
                r2 = dx * dx + dy * dy
                if r2 < d2:
                    if r2 == 0.0:
                        continue
                    rr = np.sqrt(r2)
                    s = delta / rr
                    dx *= s
                    dy *= s
                    scale = rr / delta
                    r2 = d2
                elif r2 == 0.0:
                    if bad[r] < 0:
                        bad[r] = i * N + j
                    continue
                sign = math.copysign(1.0, dx)
                qx = dx * sign
                qy = dy * sign
                c = sign / (TAU * r2)
                f1 = -c * dy
                f2 = c * dx
                ux = qx * inv_h - 0.5 + pad
                uy = (qy + np.pi) * inv_h - 0.5 + pad
                ix = int(ux)
                iy = int(uy)
                tx = ux - ix
                ty = uy - iy
                sx = 1.0 - tx
                sy = 1.0 - ty
                t1 = (sx * (sy * table[ix, iy, 0] + ty * table[ix, iy + 1, 0])
                      + tx * (sy * table[ix + 1, iy, 0]
                              + ty * table[ix + 1, iy + 1, 0]))
                t2 = (sx * (sy * table[ix, iy, 1] + ty * table[ix, iy + 1, 1])
                      + tx * (sy * table[ix + 1, iy, 1]
                              + ty * table[ix + 1, iy + 1, 1]))
                g1 = (f1 + t1) * scale * sign
                g2 = (f2 + t2) * scale * sign
                a1 += g1
                a2 += g2
                out[r, j, 0] -= g1
                out[r, j, 1] -= g2
            out[r, i, 0] += a1
            out[r, i, 1] += a2
        for i in range(N):
            out[r, i, 0] *= inv_n
            out[r, i, 1] *= inv_n
    for r in range(R):
        if bad[r] >= 0:
            return r * N * N + bad[r]
    return -1
