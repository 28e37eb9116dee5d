"""Pure-numpy reference implementations of the hot kernels.

Every function here has a bit-compatible signature with the compiled
versions in ``_ckernels``; the backend is chosen once at import time by
``dialoseq.kernels``. Arrays may be float32 or float64 and are treated as
row-major with the reduced axis last.
"""

import numpy as np

BACKEND = "python"


def softmax_fwd(x):
    """Softmax over the last axis, max-subtracted for stability."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(y, dy):
    # dL/dx = (dy - sum(dy * y)) * y, rowwise
    s = np.sum(dy * y, axis=-1, keepdims=True)
    return (dy - s) * y


def layernorm_fwd(x, gain, bias, eps):
    """Normalize the last axis; returns (y, mean, rstd) with stats kept for backward."""
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * rstd * gain + bias
    return y, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, dy):
    d = x.shape[-1]
    xhat = (x - mean) * rstd
    dxhat = dy * gain
    # standard layer-norm backward, all reductions over the last axis
    dx = rstd * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    reduce_axes = tuple(range(x.ndim - 1))
    dgain = np.sum(dy * xhat, axis=reduce_axes)
    dbias = np.sum(dy, axis=reduce_axes)
    return dx, dgain, dbias


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, dy):
    return np.where(x > 0.0, dy, 0.0)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam step with bias correction; p, m, v are mutated."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
