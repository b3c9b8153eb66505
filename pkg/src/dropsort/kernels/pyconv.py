"""Pure-numpy convolution kernels (fallback backend).

Valid (no padding) 2-D convolution in the cross-correlation convention
used throughout the network. Patches are packed row-block by row-block
to bound peak memory on large frames, then handed to BLAS matmul.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# target ~= 32 MB of packed patches per matmul
_CHUNK_BYTES = 32 * 1024 * 1024


def _row_chunk(out_w: int, patch_len: int) -> int:
    return max(1, _CHUNK_BYTES // (8 * out_w * patch_len))


def conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid convolution: (C,H,W) x (F,C,K,K) -> (F,H-K+1,W-K+1)."""
    c, h, width = x.shape
    f, c2, k, k2 = w.shape
    if c2 != c or k != k2:
        raise ValueError(f"kernel shape {w.shape} does not match input {x.shape}")
    if k > h or k > width:
        raise ValueError(f"kernel {k} larger than input {(h, width)}")
    ho, wo = h - k + 1, width - k + 1
    windows = sliding_window_view(x, (k, k), axis=(1, 2))  # (C,Ho,Wo,K,K) view
    wm = w.reshape(f, c * k * k)
    out = np.empty((f, ho, wo))
    step = _row_chunk(wo, c * k * k)
    for r0 in range(0, ho, step):
        r1 = min(ho, r0 + step)
        blk = windows[:, r0:r1].transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * wo, c * k * k)
        out[:, r0:r1] = (blk @ wm.T).T.reshape(f, r1 - r0, wo)
    return out


def conv2d_dw(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Weight gradient of conv2d: (C,H,W) x (F,Ho,Wo) -> (F,C,K,K)."""
    c, h, width = x.shape
    f, ho, wo = dy.shape
    k = h - ho + 1
    if width - wo + 1 != k or k < 1:
        raise ValueError(f"dy shape {dy.shape} inconsistent with input {x.shape}")
    windows = sliding_window_view(x, (k, k), axis=(1, 2))
    dw = np.zeros((f, c, k, k))
    step = _row_chunk(wo, c * k * k)
    for r0 in range(0, ho, step):
        r1 = min(ho, r0 + step)
        dw += np.tensordot(dy[:, r0:r1], windows[:, r0:r1], axes=([1, 2], [1, 2]))
    return dw
