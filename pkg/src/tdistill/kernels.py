"""Compiled inner loops for the tensor engine.

Every kernel accumulates each output element serially, in a documented
term order, so results are bit-identical to a plain nested-loop reference
and independent of thread count (parallelism only ever splits independent
output elements, never a reduction).
"""

import numpy as np
from numba import config, njit, prange

# TBB probing emits a version warning on import; the portable layer is enough.
config.THREADING_LAYER = "workqueue"


@njit(cache=True, parallel=True)
def conv2d_forward(x, w, stride, pad):
    # out[b,co,p,q] = sum over (ci, i, j) of x[b,ci,p*s+i-pad,q*s+j-pad] * w[co,ci,i,j],
    # accumulated in exactly that term order; out-of-range taps are skipped.
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in prange(n):
        for co in range(cout):
            for ci in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[co, ci, i, j]
                        for p in range(oh):
                            ih = p * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for q in range(ow):
                                iw = q * stride + j - pad
                                if 0 <= iw < wd:
                                    out[b, co, p, q] += x[b, ci, ih, iw] * wv
    return out


@njit(cache=True, parallel=True)
def conv2d_backward_input(gout, w, stride, pad, h, wd):
    n, cout, oh, ow = gout.shape
    _, cin, kh, kw = w.shape
    gx = np.zeros((n, cin, h, wd), dtype=gout.dtype)
    for b in prange(n):
        for co in range(cout):
            for ci in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[co, ci, i, j]
                        for p in range(oh):
                            ih = p * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for q in range(ow):
                                iw = q * stride + j - pad
                                if 0 <= iw < wd:
                                    gx[b, ci, ih, iw] += gout[b, co, p, q] * wv
    return gx


@njit(cache=True, parallel=True)
def conv2d_backward_kernel(gout, x, stride, pad, kh, kw):
    n, cout, oh, ow = gout.shape
    _, cin, h, wd = x.shape
    gw = np.zeros((cout, cin, kh, kw), dtype=gout.dtype)
    for co in prange(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = gout.dtype.type(0)
                    for b in range(n):
                        for p in range(oh):
                            ih = p * stride + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            for q in range(ow):
                                iw = q * stride + j - pad
                                if 0 <= iw < wd:
                                    acc += gout[b, co, p, q] * x[b, ci, ih, iw]
                    gw[co, ci, i, j] = acc
    return gw


@njit(cache=True)
def serial_sum(flat):
    # left-to-right accumulation; the determinism contract for reductions
    acc = flat.dtype.type(0)
    for i in range(flat.shape[0]):
        acc += flat[i]
    return acc


@njit(cache=True, parallel=True)
def channel_sum(x):
    # out[b,p,q] = sum over c (ascending) of x[b,c,p,q]
    n, c, h, w = x.shape
    out = np.zeros((n, h, w), dtype=x.dtype)
    for b in prange(n):
        for ci in range(c):
            for p in range(h):
                for q in range(w):
                    out[b, p, q] += x[b, ci, p, q]
    return out


def warmup(dtype=np.float32):
    """Force-compile all kernels for one dtype (useful before timing)."""
    x = np.zeros((1, 1, 2, 2), dtype=dtype)
    w = np.zeros((1, 1, 1, 1), dtype=dtype)
    g = conv2d_forward(x, w, 1, 0)
    conv2d_backward_input(g, w, 1, 0, 2, 2)
    conv2d_backward_kernel(g, x, 1, 0, 1, 1)
    serial_sum(x.reshape(-1))
    channel_sum(x)
