"""Pure numpy batch-normalization kernels.

Reference implementation of the fused kernels in ``_bn_ext.pyx``. All inputs
are float64 arrays of shape ``(batch, features)`` or ``(features,)``.
"""
import numpy as np


def column_mean(y):
    return y.mean(axis=0)


def centered_variance(y, mean):
    """Population variance of ``y`` around a given (possibly foreign) mean."""
    d = y - mean
    return (d * d).mean(axis=0)


def bn_moments(y):
    mean = y.mean(axis=0)
    return mean, centered_variance(y, mean)


def bn_normalize(y, mean, var, gamma, beta, eps):
    normalized = (y - mean) / np.sqrt(var + eps)
    return gamma * normalized + beta, normalized


def bn_stat_grads(d_out, y, normalized, mean, var, gamma, eps):
    """Gradients w.r.t. batch mean, batch variance, gamma and beta.

    The mean gradient omits the path through the variance: at the
    (global) batch mean that path contributes zero.
    """
    d_norm = d_out * gamma
    inv_std = 1.0 / np.sqrt(var + eps)
    d_var = -0.5 * (d_norm * (y - mean)).sum(axis=0) * inv_std**3
    d_mean = -d_norm.sum(axis=0) * inv_std
    d_gamma = (d_out * normalized).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    return d_mean, d_var, d_gamma, d_beta


def bn_input_grad(d_out, y, mean, var, gamma, eps, d_mean, d_var):
    batch = y.shape[0]
    inv_std = 1.0 / np.sqrt(var + eps)
    return (d_out * gamma * inv_std
            + d_var * 2.0 * (y - mean) / batch
            + d_mean / batch)
