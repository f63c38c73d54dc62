# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled fused kernels; mirrored operation-for-operation by ``milkt._pykernels``."""

from libc.math cimport sqrt

cdef extern from *:
    """
    #include <math.h>
    static void adam_loop(Py_ssize_t n, double *restrict p, const double *restrict g,
                          double *restrict m, double *restrict v,
                          double c1, double c2, double beta1, double beta2,
                          double decay, double step_size, double inv_sqrt_bc2, double eps)
    {
        for (Py_ssize_t i = 0; i < n; i++) {
            double gi = g[i];
            double mi = m[i] * beta1 + c1 * gi;
            double vi = v[i] * beta2 + c2 * (gi * gi);
            double pi = p[i];
            m[i] = mi;
            v[i] = vi;
            pi = pi - decay * pi;
            p[i] = pi - step_size * mi / (sqrt(vi) * inv_sqrt_bc2 + eps);
        }
    }
    """
    void adam_loop(Py_ssize_t n, double *p, const double *g, double *m, double *v,
                   double c1, double c2, double beta1, double beta2,
                   double decay, double step_size, double inv_sqrt_bc2, double eps) nogil


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double weight_decay, double beta1, double beta2, double eps,
                double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0]
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam_update: buffer lengths differ")
    if n == 0:
        return
    cdef double step_size = lr / bc1
    cdef double inv_sqrt_bc2 = 1.0 / sqrt(bc2)
    with nogil:
        adam_loop(n, &p[0], &g[0], &m[0], &v[0], 1.0 - beta1, 1.0 - beta2, beta1, beta2,
                  lr * weight_decay, step_size, inv_sqrt_bc2, eps)
