# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3 convolution kernels.

All routines take the zero-padded input (one pixel on each border) and write
into caller-allocated outputs. Output positions are processed in tiles whose
C*3*3 input patches are gathered into a contiguous buffer. The innermost
loops run over independent output elements so the compiler can vectorise
them, while every element still accumulates its terms in a fixed order:
bias, then input channel, kernel row, kernel column for the forward pass,
and ascending output position for the gradients.
"""

from libc.stdlib cimport malloc, free
from libc.string cimport memset

cdef enum:
    TILE = 32


cdef inline void _axpy_rows(double* y, const double* a, Py_ssize_t astep,
                            const double* rows, Py_ssize_t rstep, Py_ssize_t m,
                            Py_ssize_t n) noexcept nogil:
    # y[j] += a[i] * rows[i, j] for i = 0..m-1 in order; four rows share one
    # load and store of y, which keeps the per-element order unchanged
    cdef Py_ssize_t i = 0, j
    cdef double a0, a1, a2, a3, t
    cdef const double* r0
    cdef const double* r1
    cdef const double* r2
    cdef const double* r3
    while i + 4 <= m:
        a0 = a[i * astep]; a1 = a[(i + 1) * astep]
        a2 = a[(i + 2) * astep]; a3 = a[(i + 3) * astep]
        r0 = rows + i * rstep; r1 = r0 + rstep; r2 = r1 + rstep; r3 = r2 + rstep
        for j in range(n):
            t = y[j] + a0 * r0[j]
            t = t + a1 * r1[j]
            t = t + a2 * r2[j]
            y[j] = t + a3 * r3[j]
        i += 4
    while i < m:
        a0 = a[i * astep]
        r0 = rows + i * rstep
        for j in range(n):
            y[j] = y[j] + a0 * r0[j]
        i += 1


cdef inline void _gather_tile(const double[:, :, :, ::1] xpad, Py_ssize_t n, Py_ssize_t p0,
                              Py_ssize_t tn, Py_ssize_t Wo, int stride, Py_ssize_t C,
                              double* patches) noexcept nogil:
    cdef Py_ssize_t p, c, u, v, iy, ix, k
    cdef double* row
    for p in range(tn):
        iy = ((p0 + p) // Wo) * stride
        ix = ((p0 + p) % Wo) * stride
        row = patches + p * C * 9
        k = 0
        for c in range(C):
            for u in range(3):
                for v in range(3):
                    row[k] = xpad[n, c, iy + u, ix + v]
                    k += 1


cdef inline void _scatter_tile(double[:, :, :, ::1] gxpad, Py_ssize_t n, Py_ssize_t p0,
                               Py_ssize_t tn, Py_ssize_t Wo, int stride, Py_ssize_t C,
                               const double* gpatches) noexcept nogil:
    cdef Py_ssize_t p, c, u, v, iy, ix, k
    for p in range(tn):
        iy = ((p0 + p) // Wo) * stride
        ix = ((p0 + p) % Wo) * stride
        row = gpatches + p * C * 9
        k = 0
        for c in range(C):
            for u in range(3):
                for v in range(3):
                    gxpad[n, c, iy + u, ix + v] += row[k]
                    k += 1


cdef inline void _input_grad_tile(const double* wbase, const double* gt, Py_ssize_t tn,
                                  Py_ssize_t D, Py_ssize_t K, double* gpatches) noexcept nogil:
    # gpatches[p, k] = sum_d g[p, d] * w[d, k], d ascending
    cdef Py_ssize_t p
    memset(gpatches, 0, tn * K * sizeof(double))
    for p in range(tn):
        _axpy_rows(gpatches + p * K, gt + p * D, 1, wbase, K, D, K)


cdef inline void _load_grad_tile(const double[:, :, :, ::1] g, Py_ssize_t n, Py_ssize_t p0,
                                 Py_ssize_t tn, Py_ssize_t Wo, Py_ssize_t D, double* gt) noexcept nogil:
    cdef Py_ssize_t p, d
    for p in range(tn):
        for d in range(D):
            gt[p * D + d] = g[n, d, (p0 + p) // Wo, (p0 + p) % Wo]


def conv_forward(const double[:, :, :, ::1] xpad,
                 const double[:, :, :, ::1] w,
                 const double[::1] b,
                 int stride,
                 double[:, :, :, ::1] out):
    cdef Py_ssize_t B = out.shape[0], D = out.shape[1]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t C = w.shape[1], K = 9 * w.shape[1], P = Ho * Wo
    cdef Py_ssize_t n, d, k, p, t, p0, tn
    cdef const double* wbase = &w[0, 0, 0, 0]
    cdef double* accp
    cdef double* wt = <double*> malloc(K * D * sizeof(double))
    cdef double* patches = <double*> malloc(TILE * K * sizeof(double))
    cdef double* acc = <double*> malloc(TILE * D * sizeof(double))
    if wt == NULL or patches == NULL or acc == NULL:
        free(wt); free(patches); free(acc)
        raise MemoryError()
    try:
        with nogil:
            for d in range(D):
                for k in range(K):
                    wt[k * D + d] = wbase[d * K + k]
            for n in range(B):
                for t in range((P + TILE - 1) // TILE):
                    p0 = t * TILE
                    tn = min(TILE, P - p0)
                    _gather_tile(xpad, n, p0, tn, Wo, stride, C, patches)
                    for p in range(tn):
                        accp = acc + p * D
                        for d in range(D):
                            accp[d] = b[d]
                        _axpy_rows(accp, patches + p * K, 1, wt, D, K, D)
                    for d in range(D):
                        for p in range(tn):
                            out[n, d, (p0 + p) // Wo, (p0 + p) % Wo] = acc[p * D + d]
    finally:
        free(wt); free(patches); free(acc)


def conv_backward(const double[:, :, :, ::1] xpad,
                  const double[:, :, :, ::1] w,
                  const double[:, :, :, ::1] g,
                  int stride,
                  double[:, :, :, ::1] gw,
                  double[::1] gb,
                  double[:, :, :, ::1] gxpad):
    """Accumulate weight, bias and padded-input gradients into zeroed outputs."""
    cdef Py_ssize_t B = g.shape[0], D = g.shape[1]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t C = w.shape[1], K = 9 * w.shape[1], P = Ho * Wo
    cdef Py_ssize_t n, d, k, p, t, p0, tn
    cdef const double* wbase = &w[0, 0, 0, 0]
    cdef double* gwbase = &gw[0, 0, 0, 0]
    cdef double* patches = <double*> malloc(TILE * K * sizeof(double))
    cdef double* gpatches = <double*> malloc(TILE * K * sizeof(double))
    cdef double* gt = <double*> malloc(TILE * D * sizeof(double))
    if patches == NULL or gpatches == NULL or gt == NULL:
        free(patches); free(gpatches); free(gt)
        raise MemoryError()
    try:
        with nogil:
            for n in range(B):
                for t in range((P + TILE - 1) // TILE):
                    p0 = t * TILE
                    tn = min(TILE, P - p0)
                    _gather_tile(xpad, n, p0, tn, Wo, stride, C, patches)
                    _load_grad_tile(g, n, p0, tn, Wo, D, gt)
                    for p in range(tn):
                        for d in range(D):
                            gb[d] += gt[p * D + d]
                    # keep one weight-gradient row hot across the tile
                    for d in range(D):
                        _axpy_rows(gwbase + d * K, gt + d, D, patches, K, tn, K)
                    _input_grad_tile(wbase, gt, tn, D, K, gpatches)
                    _scatter_tile(gxpad, n, p0, tn, Wo, stride, C, gpatches)
    finally:
        free(patches); free(gpatches); free(gt)


def conv_backward_input(const double[:, :, :, ::1] w,
                        const double[:, :, :, ::1] g,
                        int stride,
                        double[:, :, :, ::1] gxpad):
    """Accumulate only the padded-input gradient into a zeroed output."""
    cdef Py_ssize_t B = g.shape[0], D = g.shape[1]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t C = w.shape[1], K = 9 * w.shape[1], P = Ho * Wo
    cdef Py_ssize_t n, t, p0, tn
    cdef const double* wbase = &w[0, 0, 0, 0]
    cdef double* gpatches = <double*> malloc(TILE * K * sizeof(double))
    cdef double* gt = <double*> malloc(TILE * D * sizeof(double))
    if gpatches == NULL or gt == NULL:
        free(gpatches); free(gt)
        raise MemoryError()
    try:
        with nogil:
            for n in range(B):
                for t in range((P + TILE - 1) // TILE):
                    p0 = t * TILE
                    tn = min(TILE, P - p0)
                    _load_grad_tile(g, n, p0, tn, Wo, D, gt)
                    _input_grad_tile(wbase, gt, tn, D, K, gpatches)
                    _scatter_tile(gxpad, n, p0, tn, Wo, stride, C, gpatches)
    finally:
        free(gpatches); free(gt)
