# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled BPR gradient accumulation and row-sparse Adagrad updates.

Mirrors ``advrec._kernels_py``; both accept float32 or float64 matrices.
"""
from libc.math cimport exp, log1p, sqrt

ctypedef fused real:
    float
    double


def bpr_accumulate(const real[:, ::1] P, const real[:, ::1] Q,
                   const Py_ssize_t[::1] users, const Py_ssize_t[::1] pos,
                   const Py_ssize_t[::1] neg, double l2,
                   real[:, ::1] gP, real[:, ::1] gQ):
    """Add the summed BPR gradient of the triples into gP/gQ; return the loss."""
    cdef Py_ssize_t n = users.shape[0], d = P.shape[1]
    cdef Py_ssize_t t, k, u, i, j
    cdef double x, e, s, g, loss = 0.0, pu, qi, qj
    for t in range(n):
        u = users[t]
        i = pos[t]
        j = neg[t]
        x = 0.0
        for k in range(d):
            x += <double>P[u, k] * (<double>Q[i, k] - <double>Q[j, k])
        # stable -log(sigmoid(x)) and sigmoid(-x)
        if x >= 0:
            e = exp(-x)
            loss += log1p(e)
            s = e / (1.0 + e)
        else:
            e = exp(x)
            loss += -x + log1p(e)
            s = 1.0 / (1.0 + e)
        g = -s
        for k in range(d):
            pu = P[u, k]
            qi = Q[i, k]
            qj = Q[j, k]
            gP[u, k] += <real>(g * (qi - qj) + 2.0 * l2 * pu)
            gQ[i, k] += <real>(g * pu + 2.0 * l2 * qi)
            gQ[j, k] += <real>(-g * pu + 2.0 * l2 * qj)
        if l2 != 0.0:
            for k in range(d):
                loss += l2 * (<double>P[u, k] * P[u, k] + <double>Q[i, k] * Q[i, k]
                              + <double>Q[j, k] * Q[j, k])
    return loss


def adagrad_rows(real[:, ::1] param, real[:, ::1] accum, const real[:, ::1] grad,
                 const Py_ssize_t[::1] rows, double lr, double eps):
    """Adagrad update of ``param[rows]`` using the compact gradient ``grad``."""
    cdef Py_ssize_t n = rows.shape[0], d = param.shape[1]
    cdef Py_ssize_t r, k, row
    cdef double g, a
    for r in range(n):
        row = rows[r]
        for k in range(d):
            g = grad[r, k]
            a = accum[row, k] + g * g
            accum[row, k] = <real>a
            param[row, k] = <real>(param[row, k] - lr * g / (sqrt(<double>accum[row, k]) + eps))
