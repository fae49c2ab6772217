# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Single-pass loops for the leaky activation kernels.

Each kernel takes a float64 array of any shape and returns a new array of the
same shape. Arithmetic order mirrors ``_pykernels``; results agree to the
last ulp.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def _prep(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    return arr, np.empty_like(arr)


def soft_leaky_relu(x, double a, double e):
    arr, out = _prep(x)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double v, lin = 1.0 - a, off = a * e, ee = e * e
    with nogil:
        for i in range(n):
            v = src[i]
            dst[i] = lin * v + a * sqrt(v * v + ee) - off
    return out


def soft_leaky_relu_grad(x, double a, double e):
    arr, out = _prep(x)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double v, lin = 1.0 - a, ee = e * e
    with nogil:
        for i in range(n):
            v = src[i]
            dst[i] = lin + a * v / sqrt(v * v + ee)
    return out


def soft_leaky_relu_grad2(x, double a, double e):
    arr, out = _prep(x)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double v, r, ee = e * e
    with nogil:
        for i in range(n):
            v = src[i]
            r = v * v + ee
            dst[i] = a * ee / (r * sqrt(r))
    return out


def leaky_relu(x, double slope):
    arr, out = _prep(x)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = src[i] if src[i] > 0 else slope * src[i]
    return out


def leaky_relu_grad(x, double slope):
    arr, out = _prep(x)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = 1.0 if src[i] > 0 else slope
    return out
