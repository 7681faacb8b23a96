# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC forward-backward kernel.

Mirrors the numpy fallback operation for operation (same log-add formula
and accumulation order as np.logaddexp / np.add.at) so both backends give
bit-identical losses and gradients.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log1p

cnp.import_array()

DEF LN2 = 0.6931471805599453  # same double as numpy's NPY_LOGE2


cdef inline double lae(double x, double y) nogil:
    cdef double tmp
    if x == y:
        return x + LN2
    tmp = x - y
    if tmp > 0:
        return x + log1p(exp(-tmp))
    elif tmp <= 0:
        return y + log1p(exp(tmp))
    return tmp  # nan propagation


def forward_backward(cnp.ndarray[cnp.float64_t, ndim=2] logp,
                     cnp.ndarray[cnp.int64_t, ndim=1] labels):
    """(loss, state occupancies, extended labels) for a feasible target.

    The caller turns occupancies into the gradient with the same numpy
    expression the fallback uses; keeping that step out of C avoids any
    difference between numpy's vectorized exp and libm's.
    """
    cdef Py_ssize_t t_len = logp.shape[0]
    cdef Py_ssize_t u = labels.shape[0]
    cdef Py_ssize_t s_len = 2 * u + 1
    cdef Py_ssize_t t, s

    z_arr = np.zeros(s_len, dtype=np.int64)
    z_arr[1::2] = labels
    cdef cnp.ndarray[cnp.int64_t, ndim=1] z = z_arr
    allow_arr = np.zeros(s_len, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] allow = allow_arr
    for s in range(2, s_len):
        if z[s] != 0 and z[s] != z[s - 2]:
            allow[s] = 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((t_len, s_len), -INFINITY)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((t_len, s_len), -INFINITY)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] occ = np.empty((t_len, s_len), dtype=np.float64)
    cdef double a, b, c, ll

    alpha[0, 0] = logp[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, z[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            a = alpha[t - 1, s]
            b = alpha[t - 1, s - 1] if s >= 1 else -INFINITY
            c = alpha[t - 1, s - 2] if (s >= 2 and allow[s]) else -INFINITY
            alpha[t, s] = lae(lae(a, b), c) + logp[t, z[s]]

    if s_len > 1:
        ll = lae(alpha[t_len - 1, s_len - 1], alpha[t_len - 1, s_len - 2])
    else:
        ll = alpha[t_len - 1, s_len - 1]

    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            a = beta[t + 1, s] + logp[t + 1, z[s]]
            b = beta[t + 1, s + 1] + logp[t + 1, z[s + 1]] if s + 1 < s_len else -INFINITY
            c = (beta[t + 1, s + 2] + logp[t + 1, z[s + 2]]
                 if (s + 2 < s_len and allow[s + 2]) else -INFINITY)
            beta[t, s] = lae(lae(a, b), c)

    for t in range(t_len):
        for s in range(s_len):
            occ[t, s] = (alpha[t, s] + beta[t, s]) - ll

    return -ll, occ, z_arr
