"""Optional jit-compiled inner loops for the hottest memory-bound ops.

Everything here has a pure-numpy twin in ops.py that serves as the
reference; the test suite asserts elementwise agreement. When numba is
unavailable the engine silently runs the numpy paths.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


@njit(cache=True)
def dw_forward(xp, weight, sh, sw, out):
    """Depthwise correlation over a padded, C-contiguous input."""
    n, c, ho, wo = out.shape
    kh, kw = weight.shape[1], weight.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                orow = out[b, ch, i]
                for j in range(wo):
                    orow[j] = 0.0
                ib = i * sh
                for ki in range(kh):
                    xrow = xp[b, ch, ib + ki]
                    for kj in range(kw):
                        w = weight[ch, ki, kj]
                        if sw == 1:  # unit stride vectorizes
                            for j in range(wo):
                                orow[j] += w * xrow[j + kj]
                        else:
                            for j in range(wo):
                                orow[j] += w * xrow[j * sw + kj]


@njit(cache=True)
def dw_backward(xp, weight, grad, sh, sw, dxp, dweight):
    n, c, ho, wo = grad.shape
    kh, kw = weight.shape[1], weight.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                grow = grad[b, ch, i]
                ib = i * sh
                for ki in range(kh):
                    xrow = xp[b, ch, ib + ki]
                    drow = dxp[b, ch, ib + ki]
                    for kj in range(kw):
                        w = weight[ch, ki, kj]
                        acc = 0.0
                        if sw == 1:
                            for j in range(wo):
                                drow[j + kj] += w * grow[j]
                            for j in range(wo):
                                acc += xrow[j + kj] * grow[j]
                        else:
                            for j in range(wo):
                                jj = j * sw + kj
                                drow[jj] += w * grow[j]
                                acc += xrow[jj] * grow[j]
                        dweight[ch, ki, kj] += acc


@njit(cache=True)
def prelu_backward_kernel(x, slope, grad, dx, dslope):
    """dx per the negative-branch-at-zero convention; dslope accumulated."""
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            a = slope[ch]
            acc = 0.0
            for i in range(h):
                xrow = x[b, ch, i]
                grow = grad[b, ch, i]
                drow = dx[b, ch, i]
                for j in range(w):
                    v = xrow[j]
                    g = grow[j]
                    if v > 0:
                        drow[j] = g
                    else:
                        drow[j] = a * g
                        acc += v * g
            dslope[ch] += acc
