# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels: C-level patch packing feeding BLAS dgemm.

Same contract as pyconv (valid cross-correlation, float64); the packing
loops run without the GIL and the matrix product goes straight to the
linked BLAS, avoiding the intermediate temporaries of the numpy path.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

# keep packed-patch chunks around 32 MB
DEF CHUNK_BYTES = 33554432


cdef void _pack_patches(const double[:, :, ::1] x, double[:, ::1] buf,
                        Py_ssize_t r0, Py_ssize_t r1, Py_ssize_t wo,
                        Py_ssize_t k) noexcept nogil:
    # buf[(r-r0)*wo + j, c*k*k + u*k + v] = x[c, r+u, j+v]
    cdef Py_ssize_t n_ch = x.shape[0]
    cdef Py_ssize_t c, r, j, u, v, row, col
    for r in range(r0, r1):
        for j in range(wo):
            row = (r - r0) * wo + j
            col = 0
            for c in range(n_ch):
                for u in range(k):
                    for v in range(k):
                        buf[row, col] = x[c, r + u, j + v]
                        col += 1


cdef Py_ssize_t _row_chunk(Py_ssize_t wo, Py_ssize_t patch_len) noexcept nogil:
    cdef Py_ssize_t step = CHUNK_BYTES // (8 * wo * patch_len)
    return step if step > 1 else 1


def conv2d(object x_in, object w_in):
    """Valid convolution: (C,H,W) x (F,C,K,K) -> (F,H-K+1,W-K+1)."""
    x_arr = np.ascontiguousarray(x_in, dtype=np.float64)
    w_arr = np.ascontiguousarray(w_in, dtype=np.float64)
    if x_arr.ndim != 3 or w_arr.ndim != 4:
        raise ValueError("conv2d expects x (C,H,W) and w (F,C,K,K)")
    cdef Py_ssize_t c = x_arr.shape[0], h = x_arr.shape[1], width = x_arr.shape[2]
    cdef Py_ssize_t f = w_arr.shape[0], k = w_arr.shape[2]
    if w_arr.shape[1] != c or w_arr.shape[3] != k:
        raise ValueError(f"kernel shape {w_arr.shape} does not match input {x_arr.shape}")
    if k > h or k > width:
        raise ValueError(f"kernel {k} larger than input {(h, width)}")
    cdef Py_ssize_t ho = h - k + 1, wo = width - k + 1, ckk = c * k * k
    cdef Py_ssize_t step = _row_chunk(wo, ckk)

    wmT_arr = np.ascontiguousarray(w_arr.reshape(f, ckk).T)
    out_arr = np.empty((f, ho, wo))
    buf_arr = np.empty((step * wo, ckk))
    blk_arr = np.empty((step * wo, f))

    cdef const double[:, :, ::1] x = x_arr
    cdef const double[:, ::1] wmT = wmT_arr
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] buf = buf_arr
    cdef double[:, ::1] blk = blk_arr

    cdef double one = 1.0, zero = 0.0
    cdef char no = b'N'
    cdef int fi = <int> f, ckki = <int> ckk, ni
    cdef Py_ssize_t r0, r1, ff, r, j, n
    with nogil:
        r0 = 0
        while r0 < ho:
            r1 = r0 + step
            if r1 > ho:
                r1 = ho
            n = (r1 - r0) * wo
            ni = <int> n
            _pack_patches(x, buf, r0, r1, wo, k)
            # row-major blk(n,f) = buf(n,ckk) @ wmT(ckk,f)
            dgemm(&no, &no, &fi, &ni, &ckki, &one,
                  &wmT[0, 0], &fi, &buf[0, 0], &ckki, &zero, &blk[0, 0], &fi)
            for ff in range(f):
                for r in range(r0, r1):
                    for j in range(wo):
                        out[ff, r, j] = blk[(r - r0) * wo + j, ff]
            r0 = r1
    return out_arr


def conv2d_dw(object x_in, object dy_in):
    """Weight gradient of conv2d: (C,H,W) x (F,Ho,Wo) -> (F,C,K,K)."""
    x_arr = np.ascontiguousarray(x_in, dtype=np.float64)
    dy_arr = np.ascontiguousarray(dy_in, dtype=np.float64)
    if x_arr.ndim != 3 or dy_arr.ndim != 3:
        raise ValueError("conv2d_dw expects x (C,H,W) and dy (F,Ho,Wo)")
    cdef Py_ssize_t c = x_arr.shape[0], h = x_arr.shape[1], width = x_arr.shape[2]
    cdef Py_ssize_t f = dy_arr.shape[0], ho = dy_arr.shape[1], wo = dy_arr.shape[2]
    cdef Py_ssize_t k = h - ho + 1
    if width - wo + 1 != k or k < 1:
        raise ValueError(f"dy shape {dy_arr.shape} inconsistent with input {x_arr.shape}")
    cdef Py_ssize_t ckk = c * k * k
    cdef Py_ssize_t step = _row_chunk(wo, ckk)

    dw_arr = np.zeros((f, ckk))
    buf_arr = np.empty((step * wo, ckk))
    dyb_arr = np.empty((f, step * wo))

    cdef const double[:, :, ::1] x = x_arr
    cdef const double[:, :, ::1] dy = dy_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[:, ::1] buf = buf_arr
    cdef double[:, ::1] dyb = dyb_arr

    cdef double one = 1.0
    cdef char no = b'N'
    cdef int fi = <int> f, ckki = <int> ckk, ni, capi = <int> (step * wo)
    cdef Py_ssize_t r0, r1, ff, r, j, n, base
    with nogil:
        r0 = 0
        while r0 < ho:
            r1 = r0 + step
            if r1 > ho:
                r1 = ho
            n = (r1 - r0) * wo
            ni = <int> n
            _pack_patches(x, buf, r0, r1, wo, k)
            for ff in range(f):
                for r in range(r0, r1):
                    base = (r - r0) * wo
                    for j in range(wo):
                        dyb[ff, base + j] = dy[ff, r, j]
            # row-major dw(f,ckk) += dyb(f,n) @ buf(n,ckk); dyb row stride is capi
            dgemm(&no, &no, &ckki, &fi, &ni, &one,
                  &buf[0, 0], &ckki, &dyb[0, 0], &capi, &one, &dw[0, 0], &ckki)
            r0 = r1
    return dw_arr.reshape(f, c, k, k)
