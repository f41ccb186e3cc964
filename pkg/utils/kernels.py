"""Compiled loops for the tensor core.

Everything here is sequential on purpose: accumulation order is fixed, so
results are bit-identical across runs. Arrays are H x W x C, row-major.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def col2im(dcols, padded_h, padded_w, stride):
    """Scatter-add (H' x W' x kh x kw x C) patch gradients back onto the padded input"""
    out_h, out_w, kh, kw, channels = dcols.shape
    dx = np.zeros((padded_h, padded_w, channels), dtype=dcols.dtype)
    for i in range(out_h):
        for j in range(out_w):
            for a in range(kh):
                for b in range(kw):
                    for c in range(channels):
                        dx[i * stride + a, j * stride + b, c] += dcols[i, j, a, b, c]
    return dx


@njit(cache=True)
def max_pool_forward(x, window, stride, out_h, out_w):
    # ties go to the first element in row-major window order
    height, width, channels = x.shape
    out = np.empty((out_h, out_w, channels), dtype=x.dtype)
    argmax = np.empty((out_h, out_w, channels), dtype=np.int64)
    for i in range(out_h):
        for j in range(out_w):
            for c in range(channels):
                r0 = i * stride
                c0 = j * stride
                best = x[r0, c0, c]
                best_idx = r0 * width + c0
                for a in range(window):
                    for b in range(window):
                        v = x[r0 + a, c0 + b, c]
                        if v > best:
                            best = v
                            best_idx = (r0 + a) * width + (c0 + b)
                out[i, j, c] = best
                argmax[i, j, c] = best_idx
    return out, argmax


@njit(cache=True)
def max_pool_margin(x, window, stride, out_h, out_w):
    """Smallest gap between the winner and the runner-up over all windows"""
    height, width, channels = x.shape
    margin = np.inf
    if window * window < 2:
        return margin
    for i in range(out_h):
        for j in range(out_w):
            for c in range(channels):
                best = -np.inf
                second = -np.inf
                for a in range(window):
                    for b in range(window):
                        v = x[i * stride + a, j * stride + b, c]
                        if v > best:
                            second = best
                            best = v
                        elif v > second:
                            second = v
                gap = best - second
                if gap < margin:
                    margin = gap
    return margin


@njit(cache=True)
def max_pool_backward(g, argmax, height, width):
    out_h, out_w, channels = g.shape
    dx = np.zeros((height, width, channels), dtype=g.dtype)
    for i in range(out_h):
        for j in range(out_w):
            for c in range(channels):
                idx = argmax[i, j, c]
                dx[idx // width, idx % width, c] += g[i, j, c]
    return dx


@njit(cache=True)
def avg_pool_forward(x, window, stride, out_h, out_w):
    height, width, channels = x.shape
    out = np.empty((out_h, out_w, channels), dtype=x.dtype)
    inv = 1.0 / (window * window)
    for i in range(out_h):
        for j in range(out_w):
            for c in range(channels):
                acc = 0.0
                for a in range(window):
                    for b in range(window):
                        acc += x[i * stride + a, j * stride + b, c]
                out[i, j, c] = acc * inv
    return out


@njit(cache=True)
def avg_pool_backward(g, window, stride, height, width):
    out_h, out_w, channels = g.shape
    dx = np.zeros((height, width, channels), dtype=g.dtype)
    inv = 1.0 / (window * window)
    for i in range(out_h):
        for j in range(out_w):
            for c in range(channels):
                share = g[i, j, c] * inv
                for a in range(window):
                    for b in range(window):
                        dx[i * stride + a, j * stride + b, c] += share
    return dx
