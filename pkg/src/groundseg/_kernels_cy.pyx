# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: im2col/col2im patch unfolding and 4-connected labeling.

Contract-identical to the pure-numpy twin in ``_kernels_np.py``.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def conv_out_size(int size, int ksize, int stride, int pad):
    return (size + 2 * pad - ksize) // stride + 1


@cython.boundscheck(False)
@cython.wraparound(False)
def im2col(floating[:, :, :, ::1] x, int ksize, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - ksize) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - ksize) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c * ksize * ksize, oh * ow), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, row, base
    cdef Py_ssize_t ox_lo, ox_hi
    for b in range(n):
        for ch in range(c):
            for ki in range(ksize):
                for kj in range(ksize):
                    row = (ch * ksize + ki) * ksize + kj
                    # in-bounds ox range: 0 <= ox*stride + kj - pad < w
                    ox_lo = 0
                    while ox_lo * stride + kj - pad < 0:
                        ox_lo += 1
                    ox_hi = ow
                    while ox_hi > ox_lo and (ox_hi - 1) * stride + kj - pad >= w:
                        ox_hi -= 1
                    for oy in range(oh):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = oy * ow
                        if stride == 1:
                            for ox in range(ox_lo, ox_hi):
                                cols[b, row, base + ox] = x[b, ch, iy, ox + kj - pad]
                        else:
                            for ox in range(ox_lo, ox_hi):
                                cols[b, row, base + ox] = x[b, ch, iy, ox * stride + kj - pad]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def col2im(floating[:, :, ::1] cols, x_shape, int ksize, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - ksize) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - ksize) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, ki, kj, oy, ox, iy, row, base
    cdef Py_ssize_t ox_lo, ox_hi
    for b in range(n):
        for ch in range(c):
            for ki in range(ksize):
                for kj in range(ksize):
                    row = (ch * ksize + ki) * ksize + kj
                    ox_lo = 0
                    while ox_lo * stride + kj - pad < 0:
                        ox_lo += 1
                    ox_hi = ow
                    while ox_hi > ox_lo and (ox_hi - 1) * stride + kj - pad >= w:
                        ox_hi -= 1
                    for oy in range(oh):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        base = oy * ow
                        if stride == 1:
                            for ox in range(ox_lo, ox_hi):
                                x[b, ch, iy, ox + kj - pad] += cols[b, row, base + ox]
                        else:
                            for ox in range(ox_lo, ox_hi):
                                x[b, ch, iy, ox * stride + kj - pad] += cols[b, row, base + ox]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def label_components(mask):
    """Label 4-connected foreground components of a binary (H, W) mask."""
    m = np.ascontiguousarray(mask != 0, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] fg = m
    cdef Py_ssize_t h = fg.shape[0], w = fg.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] labels = labels_arr
    stack_arr = np.empty(h * w, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_arr
    cdef Py_ssize_t top, sy, sx, y, x, count = 0
    for sy in range(h):
        for sx in range(w):
            if fg[sy, sx] == 0 or labels[sy, sx] != 0:
                continue
            count += 1
            labels[sy, sx] = count
            top = 0
            stack[top] = sy * w + sx
            top += 1
            while top > 0:
                top -= 1
                y = stack[top] // w
                x = stack[top] % w
                if y > 0 and fg[y - 1, x] and labels[y - 1, x] == 0:
                    labels[y - 1, x] = count
                    stack[top] = (y - 1) * w + x
                    top += 1
                if y + 1 < h and fg[y + 1, x] and labels[y + 1, x] == 0:
                    labels[y + 1, x] = count
                    stack[top] = (y + 1) * w + x
                    top += 1
                if x > 0 and fg[y, x - 1] and labels[y, x - 1] == 0:
                    labels[y, x - 1] = count
                    stack[top] = y * w + x - 1
                    top += 1
                if x + 1 < w and fg[y, x + 1] and labels[y, x + 1] == 0:
                    labels[y, x + 1] = count
                    stack[top] = y * w + x + 1
                    top += 1
    return labels_arr, count
