"""Hot inner loops of the point-splat rasterizer.

Two interchangeable backends compute the per-contribution accumulation
(forward) and its adjoint (backward): a numba-jitted scalar loop (default)
and a vectorized numpy fallback.  Both are deterministic; per-pixel sums run
in point order.  Backward recomputes the kernel values instead of storing
the (points x window) intermediates, which keeps training memory flat.

Set FACERIG_NO_NUMBA=1 to force the numpy backend.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - environment dependent
    if os.environ.get("FACERIG_NO_NUMBA"):
        raise ImportError("numba disabled by FACERIG_NO_NUMBA")
    from numba import njit

    BACKEND = "numba"
except ImportError:  # pragma: no cover
    njit = None
    BACKEND = "numpy"


def _fwd_py(S, T, Z, C, base, W, H, n_bins, radius, inv2s2, inv_r2,
            tau, z0, kappa):
    n = S.shape[0]
    off = int(np.ceil(radius))
    side = 2 * off + 1
    num = np.zeros((n_bins, 3))
    den = np.zeros(n_bins)
    logc = np.zeros(n_bins)
    ex = np.empty(side)
    ey = np.empty(side)
    for i in range(n):
        si = min(max(S[i], -1e6), 1e6)
        ti = min(max(T[i], -1e6), 1e6)
        gx = int(np.floor(si))
        gy = int(np.floor(ti))
        if gx + off < 0 or gx - off >= W or gy + off < 0 or gy - off >= H:
            continue
        e = np.exp(-(Z[i] - z0) / tau)
        for a in range(side):
            dx = gx + (a - off) + 0.5 - si
            ex[a] = np.exp(-dx * dx * inv2s2)
            dy = gy + (a - off) + 0.5 - ti
            ey[a] = np.exp(-dy * dy * inv2s2)
        b = base[i]
        for dv in range(-off, off + 1):
            py = gy + dv
            if py < 0 or py >= H:
                continue
            dyy = py + 0.5 - ti
            for du in range(-off, off + 1):
                px = gx + du
                if px < 0 or px >= W:
                    continue
                dxx = px + 0.5 - si
                u = dxx * dxx + dyy * dyy
                q = 1.0 - u * inv_r2
                if q <= 0.0:
                    continue
                k = ex[du + off] * ey[dv + off] * q * q
                w = k * e
                pix = b + py * W + px
                den[pix] += w
                num[pix, 0] += w * C[i, 0]
                num[pix, 1] += w * C[i, 1]
                num[pix, 2] += w * C[i, 2]
                logc[pix] += np.log1p(-kappa * k)
    return num, den, logc


def _bwd_py(S, T, Z, C, base, W, H, radius, inv2s2, inv_r2, tau, z0, kappa,
            d_num, d_den, d_log):
    n = S.shape[0]
    off = int(np.ceil(radius))
    side = 2 * off + 1
    d_sx = np.zeros(n)
    d_sy = np.zeros(n)
    d_z = np.zeros(n)
    d_c = np.zeros((n, 3))
    sum_de_e = 0.0
    ex = np.empty(side)
    ey = np.empty(side)
    for i in range(n):
        si = min(max(S[i], -1e6), 1e6)
        ti = min(max(T[i], -1e6), 1e6)
        gx = int(np.floor(si))
        gy = int(np.floor(ti))
        if gx + off < 0 or gx - off >= W or gy + off < 0 or gy - off >= H:
            continue
        e = np.exp(-(Z[i] - z0) / tau)
        for a in range(side):
            dx = gx + (a - off) + 0.5 - si
            ex[a] = np.exp(-dx * dx * inv2s2)
            dy = gy + (a - off) + 0.5 - ti
            ey[a] = np.exp(-dy * dy * inv2s2)
        b = base[i]
        de_i = 0.0
        gx_acc = 0.0
        gy_acc = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for dv in range(-off, off + 1):
            py = gy + dv
            if py < 0 or py >= H:
                continue
            dyy = py + 0.5 - ti
            for du in range(-off, off + 1):
                px = gx + du
                if px < 0 or px >= W:
                    continue
                dxx = px + 0.5 - si
                u = dxx * dxx + dyy * dyy
                q = 1.0 - u * inv_r2
                if q <= 0.0:
                    continue
                expg = ex[du + off] * ey[dv + off]
                k = expg * q * q
                w = k * e
                pix = b + py * W + px
                dn0 = d_num[pix, 0]
                dn1 = d_num[pix, 1]
                dn2 = d_num[pix, 2]
                dw = dn0 * C[i, 0] + dn1 * C[i, 1] + dn2 * C[i, 2] + d_den[pix]
                c0 += w * dn0
                c1 += w * dn1
                c2 += w * dn2
                dk = dw * e + d_log[pix] * (-kappa / (1.0 - kappa * k))
                de_i += dw * k
                dk_du = -expg * q * (q * inv2s2 + 2.0 * inv_r2)
                duu = dk * dk_du
                gx_acc += duu * (-2.0 * dxx)
                gy_acc += duu * (-2.0 * dyy)
        d_sx[i] = gx_acc
        d_sy[i] = gy_acc
        d_c[i, 0] = c0
        d_c[i, 1] = c1
        d_c[i, 2] = c2
        d_z[i] = -de_i * e / tau
        sum_de_e += de_i * e
    return d_sx, d_sy, d_z, d_c, sum_de_e


if BACKEND == "numba":
    splat_forward = njit(cache=True)(_fwd_py)
    splat_backward = njit(cache=True)(_bwd_py)
else:  # pragma: no cover
    splat_forward = _fwd_py
    splat_backward = _bwd_py
