"""NumPy fallback for the convolution patch-assembly kernels.

Zero padding is part of the kernel contract (no padded inputs are passed in).
Both backends share the same accumulation order (kernel offsets outermost in
col2im), so a given model run produces bit-identical float32 results no
matter which backend is active.
"""

import numpy as np

NAME = "numpy"


def im2col(x, kh, kw, stride, pad, out_h, out_w):
    """Gather k×k patches of an NCHW batch (with virtual zero padding) into a
    (N·out_h·out_w, C·kh·kw) matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, _, _ = x.shape
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(n * out_h * out_w, c * kh * kw)


def col2im(cols, n, c, h, w, kh, kw, stride, pad, out_h, out_w):
    """Scatter-add patch gradients back onto a zeroed (N, C, h, w) buffer,
    dropping taps that fall in the virtual padding.

    Inverse layout of ``im2col``: row (i, oh, ow), column (ci, ki, kj).
    """
    dx_pad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    patches = cols.reshape(n, out_h, out_w, c, kh, kw)
    for ki in range(kh):
        for kj in range(kw):
            dx_pad[:, :, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride] += (
                patches[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    if pad:
        return np.ascontiguousarray(dx_pad[:, :, pad : pad + h, pad : pad + w])
    return dx_pad
