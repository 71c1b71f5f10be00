"""Pure-numpy fallback for the hot array kernels.

Same contracts as the compiled twin in ``_kernels_cy.pyx``; used when the
extension is unavailable or when GROUNDSEG_KERNELS=numpy is set.
"""

import numpy as np


def conv_out_size(size: int, ksize: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - ksize) // stride + 1


def im2col(x: np.ndarray, ksize: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (N, C, H, W) into (N, C*k*k, OH*OW) patch columns."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, ksize, stride, pad)
    ow = conv_out_size(w, ksize, stride, pad)
    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, ksize, ksize, oh, ow), dtype=x.dtype)
    for i in range(ksize):
        for j in range(ksize):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * ksize * ksize, oh * ow)


def col2im(cols: np.ndarray, x_shape, ksize: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back to (N, C, H, W)."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, ksize, stride, pad)
    ow = conv_out_size(w, ksize, stride, pad)
    cols6 = cols.reshape(n, c, ksize, ksize, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(ksize):
        for j in range(ksize):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad > 0:
        return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])
    return xp


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected foreground components of a binary (H, W) mask.

    Returns (labels, count) with labels in {0..count}, 0 = background.
    """
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    stack = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            count += 1
            labels[sy, sx] = count
            stack.append((sy, sx))
            while stack:
                y, x = stack.pop()
                if y > 0 and mask[y - 1, x] and not labels[y - 1, x]:
                    labels[y - 1, x] = count
                    stack.append((y - 1, x))
                if y + 1 < h and mask[y + 1, x] and not labels[y + 1, x]:
                    labels[y + 1, x] = count
                    stack.append((y + 1, x))
                if x > 0 and mask[y, x - 1] and not labels[y, x - 1]:
                    labels[y, x - 1] = count
                    stack.append((y, x - 1))
                if x + 1 < w and mask[y, x + 1] and not labels[y, x + 1]:
                    labels[y, x + 1] = count
                    stack.append((y, x + 1))
    return labels, count
