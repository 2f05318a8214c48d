# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused batch-normalization kernels.

Same contracts as ``_bn_py``; each kernel makes one or two passes over the
row-major ``(batch, features)`` input without numpy temporaries.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def column_mean(const double[:, ::1] y):
    cdef Py_ssize_t b = y.shape[0], f = y.shape[1], k, j
    mean_arr = np.zeros(f)
    cdef double[::1] mean = mean_arr
    for k in range(b):
        for j in range(f):
            mean[j] += y[k, j]
    for j in range(f):
        mean[j] /= b
    return mean_arr


def centered_variance(const double[:, ::1] y, const double[::1] mean):
    cdef Py_ssize_t b = y.shape[0], f = y.shape[1], k, j
    cdef double d
    var_arr = np.zeros(f)
    cdef double[::1] var = var_arr
    for k in range(b):
        for j in range(f):
            d = y[k, j] - mean[j]
            var[j] += d * d
    for j in range(f):
        var[j] /= b
    return var_arr


def bn_moments(const double[:, ::1] y):
    mean = column_mean(y)
    return mean, centered_variance(y, mean)


def bn_normalize(const double[:, ::1] y, const double[::1] mean,
                 const double[::1] var, const double[::1] gamma,
                 const double[::1] beta, double eps):
    cdef Py_ssize_t b = y.shape[0], f = y.shape[1], k, j
    out_arr = np.empty((b, f))
    norm_arr = np.empty((b, f))
    inv_arr = np.empty(f)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] norm = norm_arr
    cdef double[::1] inv_std = inv_arr
    cdef double z
    for j in range(f):
        inv_std[j] = 1.0 / sqrt(var[j] + eps)
    for k in range(b):
        for j in range(f):
            z = (y[k, j] - mean[j]) * inv_std[j]
            norm[k, j] = z
            out[k, j] = gamma[j] * z + beta[j]
    return out_arr, norm_arr


def bn_stat_grads(const double[:, ::1] d_out, const double[:, ::1] y,
                  const double[:, ::1] normalized, const double[::1] mean,
                  const double[::1] var, const double[::1] gamma, double eps):
    cdef Py_ssize_t b = y.shape[0], f = y.shape[1], k, j
    dm_arr = np.zeros(f)
    dv_arr = np.zeros(f)
    dg_arr = np.zeros(f)
    db_arr = np.zeros(f)
    cdef double[::1] d_mean = dm_arr
    cdef double[::1] d_var = dv_arr
    cdef double[::1] d_gamma = dg_arr
    cdef double[::1] d_beta = db_arr
    cdef double g, inv_std
    for k in range(b):
        for j in range(f):
            g = d_out[k, j]
            d_var[j] += g * (y[k, j] - mean[j])
            d_mean[j] += g
            d_gamma[j] += g * normalized[k, j]
            d_beta[j] += g
    for j in range(f):
        inv_std = 1.0 / sqrt(var[j] + eps)
        d_var[j] = -0.5 * gamma[j] * d_var[j] * inv_std * inv_std * inv_std
        d_mean[j] = -gamma[j] * d_mean[j] * inv_std
    return dm_arr, dv_arr, dg_arr, db_arr


def bn_input_grad(const double[:, ::1] d_out, const double[:, ::1] y,
                  const double[::1] mean, const double[::1] var,
                  const double[::1] gamma, double eps,
                  const double[::1] d_mean, const double[::1] d_var):
    cdef Py_ssize_t b = y.shape[0], f = y.shape[1], k, j
    din_arr = np.empty((b, f))
    scale_arr = np.empty(f)
    var_arr = np.empty(f)
    shift_arr = np.empty(f)
    cdef double[:, ::1] d_in = din_arr
    cdef double[::1] scale = scale_arr
    cdef double[::1] var_coef = var_arr
    cdef double[::1] shift = shift_arr
    for j in range(f):
        scale[j] = gamma[j] / sqrt(var[j] + eps)
        var_coef[j] = 2.0 * d_var[j] / b
        shift[j] = d_mean[j] / b
    for k in range(b):
        for j in range(f):
            d_in[k, j] = (d_out[k, j] * scale[j]
                          + var_coef[j] * (y[k, j] - mean[j]) + shift[j])
    return din_arr
