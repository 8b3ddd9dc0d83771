# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every routine here mirrors one in ``_kernels_py`` and performs the same
floating point operations in the same order, so both backends produce
bit-identical results.
"""

from libc.math cimport sqrt, fabs

import numpy as np
cimport numpy as cnp

cnp.import_array()


def adamw_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, double bc1, double bc2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double decay = 1.0 - lr * weight_decay
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef double step_size = lr / bc1
    cdef double inv_sqrt_bc2 = 1.0 / sqrt(bc2)
    cdef double gi, denom
    with nogil:
        for i in range(n):
            gi = g[i]
            m[i] = beta1 * m[i] + c1 * gi
            v[i] = beta2 * v[i] + c2 * (gi * gi)
            denom = sqrt(v[i]) * inv_sqrt_bc2 + eps
            p[i] = p[i] * decay - (step_size * m[i]) / denom


def neg_laplacian(const double[:, ::1] u, double[:, ::1] out):
    """out = 4u - (N + S + W + E) with zero Dirichlet padding."""
    cdef Py_ssize_t i, j, h = u.shape[0], w = u.shape[1]
    cdef double up, down, left, right
    with nogil:
        for i in range(h):
            for j in range(w):
                up = u[i - 1, j] if i > 0 else 0.0
                down = u[i + 1, j] if i < h - 1 else 0.0
                left = u[i, j - 1] if j > 0 else 0.0
                right = u[i, j + 1] if j < w - 1 else 0.0
                out[i, j] = (((4.0 * u[i, j] - up) - down) - left) - right


def voronoi_assign(const long[::1] rows, const long[::1] cols, long height, long width):
    cdef Py_ssize_t s, n = rows.shape[0]
    cdef long i, j, dr, dc, d, best_d
    cdef Py_ssize_t best
    out_arr = np.empty((height, width), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] out = out_arr
    with nogil:
        for i in range(height):
            for j in range(width):
                best = 0
                dr = i - rows[0]
                dc = j - cols[0]
                best_d = dr * dr + dc * dc
                for s in range(1, n):
                    dr = i - rows[s]
                    dc = j - cols[s]
                    d = dr * dr + dc * dc
                    if d < best_d:
                        best_d = d
                        best = s
                out[i, j] = best
    return out_arr


def weighted_l1_terms(const double[::1] pred, const double[::1] target,
                      const double[::1] weight, double[::1] terms, double[::1] grad,
                      double inv_count):
    cdef Py_ssize_t i, n = pred.shape[0]
    cdef double d, w
    with nogil:
        for i in range(n):
            d = target[i] - pred[i]
            w = weight[i]
            terms[i] = w * fabs(d)
            if d > 0.0:
                grad[i] = -(w * inv_count)
            elif d < 0.0:
                grad[i] = w * inv_count
            else:
                grad[i] = 0.0


def leaky_relu(const double[::1] z, double[::1] out, double slope):
    cdef Py_ssize_t i, n = z.shape[0]
    with nogil:
        for i in range(n):
            out[i] = z[i] if z[i] > 0.0 else slope * z[i]


def leaky_relu_grad(const double[::1] z, double[::1] grad, double slope):
    cdef Py_ssize_t i, n = z.shape[0]
    with nogil:
        for i in range(n):
            if not z[i] > 0.0:
                grad[i] = slope * grad[i]
