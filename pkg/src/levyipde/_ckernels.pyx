# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for displaced-polynomial evaluation.

Same contracts as ``_kernels_py``; inputs may be broadcast views (zero strides),
so the memoryviews are generic-strided and read-only.
"""

import numpy as np

from libc.stdlib cimport malloc, free


cdef inline void _monomials(const double* pt, int kx, const double[:] center, const double[:] scale,
                            const long long[:, :] exps, int nb, int max_deg,
                            double* xi, double* pows, double* mono) noexcept nogil:
    cdef int dim, a, b
    cdef double val
    cdef int stride = max_deg + 1
    for dim in range(kx):
        xi[dim] = (pt[dim] - center[dim]) / scale[dim]
        pows[dim * stride] = 1.0
        for a in range(1, stride):
            pows[dim * stride + a] = pows[dim * stride + a - 1] * xi[dim]
    for b in range(nb):
        val = 1.0
        for dim in range(kx):
            val *= pows[dim * stride + exps[b, dim]]
        mono[b] = val


def poly_eval(const double[:, :] pts, const long long[:, :] exps, const double[:, :] coefs,
              const double[:] center, const double[:] scale):
    cdef Py_ssize_t n = pts.shape[0]
    cdef int kx = pts.shape[1]
    cdef int nb = exps.shape[0]
    cdef int m = coefs.shape[1]
    cdef int max_deg = int(np.max(exps)) if nb > 0 else 0
    out_arr = np.zeros((n, m))
    cdef double[:, :] out = out_arr
    cdef double* xi = <double*> malloc(kx * sizeof(double))
    cdef double* pt = <double*> malloc(kx * sizeof(double))
    cdef double* pows = <double*> malloc(kx * (max_deg + 1) * sizeof(double))
    cdef double* mono = <double*> malloc(max(nb, 1) * sizeof(double))
    cdef Py_ssize_t i
    cdef int dim, b, c
    cdef double acc
    try:
        with nogil:
            for i in range(n):
                for dim in range(kx):
                    pt[dim] = pts[i, dim]
                _monomials(pt, kx, center, scale, exps, nb, max_deg, xi, pows, mono)
                for c in range(m):
                    acc = 0.0
                    for b in range(nb):
                        acc = acc + mono[b] * coefs[b, c]
                    out[i, c] = acc
    finally:
        free(xi); free(pt); free(pows); free(mono)
    return out_arr


def increment_values(const double[:, :] x, const double[:, :, :] disp,
                     const long long[:, :] exps, const double[:, :] coefs,
                     const double[:] center, const double[:] scale):
    cdef Py_ssize_t n = disp.shape[0]
    cdef Py_ssize_t nq = disp.shape[1]
    cdef int kx = x.shape[1]
    cdef int nb = exps.shape[0]
    cdef int m = coefs.shape[1]
    cdef int max_deg = int(np.max(exps)) if nb > 0 else 0
    out_arr = np.zeros((n, nq, m))
    cdef double[:, :, :] out = out_arr
    cdef double* xi = <double*> malloc(kx * sizeof(double))
    cdef double* pt = <double*> malloc(kx * sizeof(double))
    cdef double* pows = <double*> malloc(kx * (max_deg + 1) * sizeof(double))
    cdef double* mono = <double*> malloc(max(nb, 1) * sizeof(double))
    cdef double* base = <double*> malloc(max(m, 1) * sizeof(double))
    cdef Py_ssize_t i, q
    cdef int dim, b, c
    cdef double acc
    try:
        with nogil:
            for i in range(n):
                for dim in range(kx):
                    pt[dim] = x[i, dim]
                _monomials(pt, kx, center, scale, exps, nb, max_deg, xi, pows, mono)
                for c in range(m):
                    acc = 0.0
                    for b in range(nb):
                        acc = acc + mono[b] * coefs[b, c]
                    base[c] = acc
                for q in range(nq):
                    for dim in range(kx):
                        pt[dim] = x[i, dim] + disp[i, q, dim]
                    _monomials(pt, kx, center, scale, exps, nb, max_deg, xi, pows, mono)
                    for c in range(m):
                        acc = 0.0
                        for b in range(nb):
                            acc = acc + mono[b] * coefs[b, c]
                        out[i, q, c] = acc - base[c]
    finally:
        free(xi); free(pt); free(pows); free(mono); free(base)
    return out_arr


def increment_integral(const double[:, :] x, const double[:, :, :] disp, const double[:, :] weights,
                       const long long[:, :] exps, const double[:, :] coefs,
                       const double[:] center, const double[:] scale):
    cdef Py_ssize_t n = disp.shape[0]
    cdef Py_ssize_t nq = disp.shape[1]
    cdef int kx = x.shape[1]
    cdef int nb = exps.shape[0]
    cdef int m = coefs.shape[1]
    cdef int max_deg = int(np.max(exps)) if nb > 0 else 0
    out_arr = np.zeros((n, m))
    cdef double[:, :] out = out_arr
    cdef double* xi = <double*> malloc(kx * sizeof(double))
    cdef double* pt = <double*> malloc(kx * sizeof(double))
    cdef double* pows = <double*> malloc(kx * (max_deg + 1) * sizeof(double))
    cdef double* mono = <double*> malloc(max(nb, 1) * sizeof(double))
    cdef double* base = <double*> malloc(max(m, 1) * sizeof(double))
    cdef double* acc_out = <double*> malloc(max(m, 1) * sizeof(double))
    cdef Py_ssize_t i, q
    cdef int dim, b, c
    cdef double acc, w
    try:
        with nogil:
            for i in range(n):
                for dim in range(kx):
                    pt[dim] = x[i, dim]
                _monomials(pt, kx, center, scale, exps, nb, max_deg, xi, pows, mono)
                for c in range(m):
                    acc = 0.0
                    for b in range(nb):
                        acc = acc + mono[b] * coefs[b, c]
                    base[c] = acc
                    acc_out[c] = 0.0
                for q in range(nq):
                    w = weights[i, q]
                    if w == 0.0:
                        continue
                    for dim in range(kx):
                        pt[dim] = x[i, dim] + disp[i, q, dim]
                    _monomials(pt, kx, center, scale, exps, nb, max_deg, xi, pows, mono)
                    for c in range(m):
                        acc = 0.0
                        for b in range(nb):
                            acc = acc + mono[b] * coefs[b, c]
                        acc_out[c] = acc_out[c] + w * (acc - base[c])
                for c in range(m):
                    out[i, c] = acc_out[c]
    finally:
        free(xi); free(pt); free(pows); free(mono); free(base); free(acc_out)
    return out_arr
