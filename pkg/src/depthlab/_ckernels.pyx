# cython: language_level=3
"""Compiled Gaussian pair-expectation kernel.

Evaluates E[phi(h)phi(h')] and E[phi'(h)phi'(h')] for a vector of 2x2
covariances. This is the inner loop of the layer-time ODE solver; the
tanh branch runs a tensor-product Gauss-Hermite rule per pair; the inner
loop writes tanh(u + v) = (1 - q) / (1 + q) with q = exp(-2u) exp(-2v), so
the exponentials are tabulated once per row and column.
Must agree with depthlab._pykernels.pair_means to rounding.
"""
from libc.math cimport sqrt, acos, exp, fabs, tanh, M_PI
from libc.stdlib cimport malloc, free

import numpy as np


cdef inline void _cholesky2(double hxx, double hxy, double hyy,
                            double *a, double *b, double *c, bint *swap) noexcept nogil:
    # h = a z1, h' = b z1 + c z2; pivot on the larger variance so hxx = 0 is safe
    cdef double r
    swap[0] = hxx < hyy
    if swap[0]:
        hxx, hyy = hyy, hxx
    if hxx <= 0.0:
        a[0] = 0.0
        b[0] = 0.0
        c[0] = 0.0
        return
    a[0] = sqrt(hxx)
    b[0] = hxy / a[0]
    r = hyy - b[0] * b[0]
    c[0] = sqrt(r) if r > 0.0 else 0.0


def pair_means(int kind, const double[::1] hxx, const double[::1] hyy, const double[::1] hxy,
               const double[::1] nodes, const double[::1] weights):
    cdef Py_ssize_t n = hxx.shape[0]
    cdef Py_ssize_t m = nodes.shape[0]
    phi_arr = np.empty(n, dtype=np.float64)
    dphi_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] phi = phi_arr
    cdef double[::1] dphi = dphi_arr
    cdef Py_ssize_t p, i, j
    cdef double s, rho, a, b, c, t1, d1, t2, wi, acc, dacc, rowacc, drowacc
    cdef bint swap
    cdef double q, xi, ei
    cdef bint allj
    # exponent cap: keeps each tabulated factor and every product finite
    cdef double cap = 300.0
    cdef double *ej = <double *> malloc(m * sizeof(double))
    cdef bint *okj = <bint *> malloc(m * sizeof(bint))
    if ej == NULL or okj == NULL:
        free(ej)
        free(okj)
        raise MemoryError()

    with nogil:
        for p in range(n):
            if kind == 0:
                phi[p] = hxy[p]
                dphi[p] = 1.0
            elif kind == 1:
                s = sqrt(hxx[p] * hyy[p])
                if s <= 0.0:
                    phi[p] = 0.0
                    dphi[p] = 0.0
                    continue
                rho = hxy[p] / s
                if rho > 1.0:
                    rho = 1.0
                elif rho < -1.0:
                    rho = -1.0
                phi[p] = s * (sqrt(1.0 - rho * rho) + rho * (M_PI - acos(rho))) / (2.0 * M_PI)
                dphi[p] = (M_PI - acos(rho)) / (2.0 * M_PI)
            else:
                _cholesky2(hxx[p], hxy[p], hyy[p], &a, &b, &c, &swap)
                allj = True
                for j in range(m):
                    xi = -2.0 * c * nodes[j]
                    okj[j] = fabs(xi) < cap
                    ej[j] = exp(xi) if okj[j] else 0.0
                    allj = allj and okj[j]
                acc = 0.0
                dacc = 0.0
                for i in range(m):
                    t1 = tanh(a * nodes[i])
                    d1 = 1.0 - t1 * t1
                    wi = weights[i]
                    rowacc = 0.0
                    drowacc = 0.0
                    xi = -2.0 * b * nodes[i]
                    if fabs(xi) < cap:
                        ei = exp(xi)
                        if allj:
                            for j in range(m):
                                q = ei * ej[j]
                                t2 = (1.0 - q) / (1.0 + q)
                                rowacc += weights[j] * t2
                                drowacc += weights[j] * (1.0 - t2 * t2)
                        else:
                            for j in range(m):
                                if okj[j]:
                                    q = ei * ej[j]
                                    t2 = (1.0 - q) / (1.0 + q)
                                else:
                                    t2 = tanh(b * nodes[i] + c * nodes[j])
                                rowacc += weights[j] * t2
                                drowacc += weights[j] * (1.0 - t2 * t2)
                    else:
                        for j in range(m):
                            t2 = tanh(b * nodes[i] + c * nodes[j])
                            rowacc += weights[j] * t2
                            drowacc += weights[j] * (1.0 - t2 * t2)
                    acc += wi * t1 * rowacc
                    dacc += wi * d1 * drowacc
                phi[p] = acc
                dphi[p] = dacc
    free(ej)
    free(okj)
    return phi_arr, dphi_arr
