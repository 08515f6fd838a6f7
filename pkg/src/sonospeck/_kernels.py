"""Fused inner loops for the convolution and GELU hot paths.

The direct k*k-offset formulation in pure numpy re-reads the whole
activation once per offset; the fused loops below make a single pass,
which matters on CPU. When numba is unavailable everything falls back
to equivalent vectorized numpy, so results are identical either way
(each output element is produced by one exact accumulation order in
both paths, keeping runs bit-reproducible).

Layouts: activations channels-last (n, h, w, c); conv kernels
(k, k, ci, co); depthwise kernels (k, k, c). All kernels specialize per
dtype, so the float64 gradient-check mode uses the same code.
"""

from __future__ import annotations

import math

import numpy as np

try:  # pragma: no cover - exercised implicitly by every op call
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return deco

    prange = range

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def conv_fwd(xp, kt, bias, out):
        n, h, w, co = out.shape
        k = kt.shape[0]
        ci = kt.shape[2]
        for bi in prange(n * h):
            b = bi // h
            i = bi % h
            for j in range(w):
                for c in range(co):
                    out[b, i, j, c] = bias[c]
                for ki in range(k):
                    for kj in range(k):
                        for cin in range(ci):
                            v = xp[b, i + ki, j + kj, cin]
                            for c in range(co):
                                out[b, i, j, c] += v * kt[ki, kj, cin, c]

    @njit(parallel=True, cache=True)
    def conv_bwd_input(gl, kt, gxp):
        n, h, w, co = gl.shape
        k = kt.shape[0]
        ci = kt.shape[2]
        hp = gxp.shape[1]
        wp = gxp.shape[2]
        for by in prange(n * hp):
            b = by // hp
            y = by % hp
            for x in range(wp):
                for ki in range(k):
                    iy = y - ki
                    if iy < 0 or iy >= h:
                        continue
                    for kj in range(k):
                        ix = x - kj
                        if ix < 0 or ix >= w:
                            continue
                        for cin in range(ci):
                            for c in range(co):
                                gxp[b, y, x, cin] += gl[b, iy, ix, c] * kt[ki, kj, cin, c]

    @njit(parallel=True, cache=True)
    def conv_bwd_kernel(gl, xp, kg):
        n, h, w, co = gl.shape
        k = kg.shape[0]
        ci = kg.shape[2]
        for t in prange(k * k):
            ki = t // k
            kj = t % k
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        for cin in range(ci):
                            v = xp[b, i + ki, j + kj, cin]
                            for c in range(co):
                                kg[ki, kj, cin, c] += v * gl[b, i, j, c]

    @njit(parallel=True, cache=True)
    def dw_fwd(xp, kv, bias, out):
        n, h, w, c = out.shape
        k = kv.shape[0]
        for bi in prange(n * h):
            b = bi // h
            i = bi % h
            for j in range(w):
                for ch in range(c):
                    out[b, i, j, ch] = bias[ch]
                for ki in range(k):
                    for kj in range(k):
                        for ch in range(c):
                            out[b, i, j, ch] += xp[b, i + ki, j + kj, ch] * kv[ki, kj, ch]

    @njit(parallel=True, cache=True)
    def dw_bwd_input(gl, kv, gxp):
        n, h, w, c = gl.shape
        k = kv.shape[0]
        hp = gxp.shape[1]
        wp = gxp.shape[2]
        for by in prange(n * hp):
            b = by // hp
            y = by % hp
            for x in range(wp):
                for ki in range(k):
                    iy = y - ki
                    if iy < 0 or iy >= h:
                        continue
                    for kj in range(k):
                        ix = x - kj
                        if ix < 0 or ix >= w:
                            continue
                        for ch in range(c):
                            gxp[b, y, x, ch] += gl[b, iy, ix, ch] * kv[ki, kj, ch]

    @njit(parallel=True, cache=True)
    def dw_bwd_kernel(gl, xp, kg):
        n, h, w, c = gl.shape
        k = kg.shape[0]
        for t in prange(k * k):
            ki = t // k
            kj = t % k
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        for ch in range(c):
                            kg[ki, kj, ch] += xp[b, i + ki, j + kj, ch] * gl[b, i, j, ch]

    @njit(parallel=True, cache=True)
    def ln_fwd(x, scale, shift, eps, out, xn, inv_std):
        n, c, h, w = x.shape
        for bi in prange(n * h):
            b = bi // h
            i = bi % h
            mean = np.zeros(w, dtype=x.dtype)
            for ch in range(c):
                for j in range(w):
                    mean[j] += x[b, ch, i, j]
            for j in range(w):
                mean[j] /= c
            var = np.zeros(w, dtype=x.dtype)
            for ch in range(c):
                for j in range(w):
                    d = x[b, ch, i, j] - mean[j]
                    var[j] += d * d
            for j in range(w):
                inv_std[b, 0, i, j] = 1.0 / math.sqrt(var[j] / c + eps)
            for ch in range(c):
                for j in range(w):
                    v = (x[b, ch, i, j] - mean[j]) * inv_std[b, 0, i, j]
                    xn[b, ch, i, j] = v
                    out[b, ch, i, j] = v * scale[ch] + shift[ch]

    @njit(parallel=True, cache=True)
    def ln_bwd_input(gxn, xn, inv_std, gx):
        n, c, h, w = gxn.shape
        for bi in prange(n * h):
            b = bi // h
            i = bi % h
            m1 = np.zeros(w, dtype=gxn.dtype)
            m2 = np.zeros(w, dtype=gxn.dtype)
            for ch in range(c):
                for j in range(w):
                    m1[j] += gxn[b, ch, i, j]
                    m2[j] += gxn[b, ch, i, j] * xn[b, ch, i, j]
            for j in range(w):
                m1[j] /= c
                m2[j] /= c
            for ch in range(c):
                for j in range(w):
                    gx[b, ch, i, j] = inv_std[b, 0, i, j] * (
                        gxn[b, ch, i, j] - m1[j] - xn[b, ch, i, j] * m2[j]
                    )

    @njit(parallel=True, cache=True)
    def gelu_cdf(x, out):
        for i in prange(x.size):
            out[i] = 0.5 * (1.0 + math.erf(x[i] * _INV_SQRT2))

    @njit(parallel=True, cache=True)
    def gelu_bwd(x, cdf, g, out):
        for i in prange(x.size):
            v = x[i]
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
            out[i] = g[i] * (cdf[i] + v * pdf)

else:  # pure-numpy fallbacks, same contracts

    def conv_fwd(xp, kt, bias, out):
        n, h, w, co = out.shape
        k = kt.shape[0]
        out[...] = bias
        for ki in range(k):
            for kj in range(k):
                out += xp[:, ki : ki + h, kj : kj + w, :] @ kt[ki, kj]

    def conv_bwd_input(gl, kt, gxp):
        n, h, w, co = gl.shape
        k = kt.shape[0]
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki : ki + h, kj : kj + w, :] += gl @ kt[ki, kj].T

    def conv_bwd_kernel(gl, xp, kg):
        n, h, w, co = gl.shape
        k = kg.shape[0]
        for ki in range(k):
            for kj in range(k):
                view = xp[:, ki : ki + h, kj : kj + w, :]
                kg[ki, kj] += np.tensordot(view, gl, axes=([0, 1, 2], [0, 1, 2]))

    def dw_fwd(xp, kv, bias, out):
        n, h, w, c = out.shape
        k = kv.shape[0]
        out[...] = bias
        for ki in range(k):
            for kj in range(k):
                out += xp[:, ki : ki + h, kj : kj + w, :] * kv[ki, kj]

    def dw_bwd_input(gl, kv, gxp):
        n, h, w, c = gl.shape
        k = kv.shape[0]
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki : ki + h, kj : kj + w, :] += gl * kv[ki, kj]

    def dw_bwd_kernel(gl, xp, kg):
        n, h, w, c = gl.shape
        k = kg.shape[0]
        for ki in range(k):
            for kj in range(k):
                view = xp[:, ki : ki + h, kj : kj + w, :]
                kg[ki, kj] += (view * gl).sum(axis=(0, 1, 2))

    def ln_fwd(x, scale, shift, eps, out, xn, inv_std):
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        inv_std[...] = 1.0 / np.sqrt(var + eps)
        xn[...] = centered * inv_std
        out[...] = xn * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)

    def ln_bwd_input(gxn, xn, inv_std, gx):
        gx[...] = inv_std * (
            gxn
            - gxn.mean(axis=1, keepdims=True)
            - xn * (gxn * xn).mean(axis=1, keepdims=True)
        )

    def gelu_cdf(x, out):
        from scipy.special import erf

        out[...] = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def gelu_bwd(x, cdf, g, out):
        np.multiply(g, cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI, out=out)
