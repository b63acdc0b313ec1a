# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled cyclic Jacobi sweeps over a stack of symmetric matrices.

Arithmetic mirrors ``_jacobi_py.jacobi_sweeps`` operation for operation so
both backends return bit-identical results when built with
``-ffp-contract=off``.
"""
from libc.math cimport sqrt, fabs


cdef inline double _offdiag(double[:, ::1] a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t p, q
    cdef double acc = 0.0
    for p in range(n - 1):
        for q in range(p + 1, n):
            acc = acc + a[p, q] * a[p, q]
    return sqrt(2.0 * acc)


cdef void _solve_one(double[:, ::1] a, double[:, ::1] v, double tol,
                     int max_sweeps, int* sweeps, double* off) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef double app, aqq, apq, tau, t, c, s, x, y
    cdef int sweep = 0
    cdef double resid = _offdiag(a, n)
    while resid > tol and sweep < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if fabs(tau) > 1e150:
                    t = 1.0 / (2.0 * tau)
                elif tau >= 0.0:
                    t = 1.0 / (tau + sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    x = a[k, p]
                    y = a[k, q]
                    a[k, p] = c * x - s * y
                    a[k, q] = s * x + c * y
                for k in range(n):
                    x = a[p, k]
                    y = a[q, k]
                    a[p, k] = c * x - s * y
                    a[q, k] = s * x + c * y
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    x = v[k, p]
                    y = v[k, q]
                    v[k, p] = c * x - s * y
                    v[k, q] = s * x + c * y
        sweep += 1
        resid = _offdiag(a, n)
    sweeps[0] = sweep
    off[0] = resid


def jacobi_sweeps(double[:, :, ::1] a, double[:, :, ::1] v, double[::1] tol,
                  int max_sweeps, int[::1] sweeps, double[::1] off):
    """Diagonalize every ``a[i]`` in place, accumulating rotations in ``v[i]``."""
    cdef Py_ssize_t i, m = a.shape[0]
    with nogil:
        for i in range(m):
            _solve_one(a[i], v[i], tol[i], max_sweeps, &sweeps[i], &off[i])
