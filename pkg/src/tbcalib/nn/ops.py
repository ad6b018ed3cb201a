"""From-scratch 3D network primitives on (channels, depth, height, width)
arrays, each with an exact analytic backward pass.

All convolutions are cross-correlations.  Spatial dims are ordered
(depth, height, width) = (z, y, x).
"""

from __future__ import annotations

import numpy as np
from scipy import special


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected scalar or 3-tuple, got {v}")
    return t


def conv3d_output_shape(spatial, k, stride, dilation, padding):
    """Exact per-axis output size; raises if stride does not divide evenly."""
    out = []
    pads = _triple(padding)
    for n, p in zip(spatial, pads):
        span = n + 2 * p - dilation * (k - 1) - 1
        if span < 0:
            raise ValueError(
                f"padded extent {n + 2 * p} smaller than dilated kernel {dilation * (k - 1) + 1}"
            )
        if span % stride != 0:
            raise ValueError(
                f"non-integral output size: ({n} + 2*{p} - {dilation}*({k}-1) - 1) / {stride}"
            )
        out.append(span // stride + 1)
    return tuple(out)


def conv3d_forward(x, w, b, stride=1, dilation=1, padding=0):
    """Dilated cross-correlation with bias.

    x: (Ci, D, H, W); w: (Co, Ci, k, k, k); b: (Co,).
    """
    ci, d, h, wd = x.shape
    co, ci_w, k, k2, k3 = w.shape
    if ci_w != ci:
        raise ValueError(f"in-channel mismatch: x has {ci}, kernel expects {ci_w}")
    if not (k == k2 == k3):
        raise ValueError("kernel must be cubic")
    pd, ph, pw = _triple(padding)
    do, ho, wo = conv3d_output_shape((d, h, wd), k, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    y = np.empty((co, do, ho, wo), dtype=x.dtype)
    y[:] = b[:, None, None, None]
    for kd in range(k):
        z0 = kd * dilation
        for kh in range(k):
            y0 = kh * dilation
            for kw in range(k):
                x0 = kw * dilation
                xs = xp[:,
                        z0:z0 + (do - 1) * stride + 1:stride,
                        y0:y0 + (ho - 1) * stride + 1:stride,
                        x0:x0 + (wo - 1) * stride + 1:stride]
                y += np.tensordot(w[:, :, kd, kh, kw], xs, axes=(1, 0))
    return y


def conv3d_backward(x, w, grad_out, stride=1, dilation=1, padding=0):
    """Gradients of conv3d_forward; returns (grad_x, grad_w, grad_b)."""
    ci, d, h, wd = x.shape
    co = w.shape[0]
    k = w.shape[2]
    pd, ph, pw = _triple(padding)
    do, ho, wo = conv3d_output_shape((d, h, wd), k, stride, dilation, padding)
    if grad_out.shape != (co, do, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(co, do, ho, wo)}")
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gb = grad_out.sum(axis=(1, 2, 3))
    for kd in range(k):
        z0 = kd * dilation
        for kh in range(k):
            y0 = kh * dilation
            for kw in range(k):
                x0 = kw * dilation
                sl = (slice(None),
                      slice(z0, z0 + (do - 1) * stride + 1, stride),
                      slice(y0, y0 + (ho - 1) * stride + 1, stride),
                      slice(x0, x0 + (wo - 1) * stride + 1, stride))
                xs = xp[sl]
                gw[:, :, kd, kh, kw] = np.tensordot(grad_out, xs, axes=([1, 2, 3], [1, 2, 3]))
                gxp[sl] += np.tensordot(w[:, :, kd, kh, kw].T, grad_out, axes=(1, 0))
    gx = gxp[:, pd:pd + d, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(gx), gw, gb


def conv_transpose3d_forward(x, w, b, stride=2):
    """Transposed convolution (adjoint of a strided conv).

    x: (Ci, D, H, W); w: (Ci, Co, k, k, k); output spatial (n-1)*stride + k.
    """
    ci, d, h, wd = x.shape
    ci_w, co, k = w.shape[0], w.shape[1], w.shape[2]
    if ci_w != ci:
        raise ValueError(f"in-channel mismatch: x has {ci}, kernel expects {ci_w}")
    do, ho, wo = ((n - 1) * stride + k for n in (d, h, wd))
    y = np.zeros((co, do, ho, wo), dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                y[:,
                  kd:kd + (d - 1) * stride + 1:stride,
                  kh:kh + (h - 1) * stride + 1:stride,
                  kw:kw + (wd - 1) * stride + 1:stride] += np.tensordot(
                    w[:, :, kd, kh, kw], x, axes=(0, 0))
    y += b[:, None, None, None]
    return y


def conv_transpose3d_backward(x, w, grad_out, stride=2):
    """Gradients of conv_transpose3d_forward; returns (grad_x, grad_w, grad_b)."""
    ci, d, h, wd = x.shape
    co, k = w.shape[1], w.shape[2]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = grad_out.sum(axis=(1, 2, 3))
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                gs = grad_out[:,
                              kd:kd + (d - 1) * stride + 1:stride,
                              kh:kh + (h - 1) * stride + 1:stride,
                              kw:kw + (wd - 1) * stride + 1:stride]
                gx += np.tensordot(w[:, :, kd, kh, kw], gs, axes=(1, 0))
                gw[:, :, kd, kh, kw] = np.tensordot(x, gs, axes=([1, 2, 3], [1, 2, 3]))
    return gx, gw, gb


def _pool_prepare(x, k, stride, padding, pad_value):
    c, d, h, w = x.shape
    p = int(padding)
    out = tuple((n + 2 * p - k) // stride + 1 for n in (d, h, w))
    if any(n <= 0 for n in out):
        raise ValueError(f"pooling window {k} too large for input {x.shape[1:]}")
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)), constant_values=pad_value)
    return xp, out, p


def _pool_slices(out, k, stride):
    do, ho, wo = out
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                yield (kd * k + kh) * k + kw, (
                    slice(None),
                    slice(kd, kd + (do - 1) * stride + 1, stride),
                    slice(kh, kh + (ho - 1) * stride + 1, stride),
                    slice(kw, kw + (wo - 1) * stride + 1, stride))


def maxpool3d_forward(x, k, stride, padding=0):
    """Max pooling; returns (y, argmax tap index) for the backward pass.

    Out-of-bounds positions are -inf so padding never wins; ties go to the
    first tap in scan order.
    """
    xp, out, _ = _pool_prepare(x, k, stride, padding, -np.inf)
    y = np.full((x.shape[0],) + out, -np.inf, dtype=x.dtype)
    arg = np.zeros((x.shape[0],) + out, dtype=np.int8)
    for tap, sl in _pool_slices(out, k, stride):
        xs = xp[sl]
        better = xs > y
        y = np.where(better, xs, y)
        arg = np.where(better, np.int8(tap), arg)
    return y, arg


def maxpool3d_backward(x_shape, arg, grad_out, k, stride, padding=0):
    c, d, h, w = x_shape
    p = int(padding)
    gxp = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    out = grad_out.shape[1:]
    for tap, sl in _pool_slices(out, k, stride):
        gxp[sl] += np.where(arg == tap, grad_out, 0)
    return np.ascontiguousarray(gxp[:, p:p + d, p:p + h, p:p + w])


def avgpool3d_forward(x, k, stride, padding=0):
    """Average pooling over the in-bounds taps only (padding excluded from
    the divisor, so a constant input stays constant at the border).

    Returns (y, counts) for the backward pass.
    """
    xp, out, p = _pool_prepare(x, k, stride, padding, 0.0)
    ones = np.pad(np.ones(x.shape, dtype=x.dtype),
                  ((0, 0), (p, p), (p, p), (p, p)))
    y = np.zeros((x.shape[0],) + out, dtype=x.dtype)
    counts = np.zeros((x.shape[0],) + out, dtype=x.dtype)
    for _, sl in _pool_slices(out, k, stride):
        y += xp[sl]
        counts += ones[sl]
    return y / counts, counts


def avgpool3d_backward(x_shape, counts, grad_out, k, stride, padding=0):
    c, d, h, w = x_shape
    p = int(padding)
    gxp = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    g = grad_out / counts
    ones = np.pad(np.ones((c, d, h, w), dtype=grad_out.dtype),
                  ((0, 0), (p, p), (p, p), (p, p)))
    out = grad_out.shape[1:]
    for _, sl in _pool_slices(out, k, stride):
        gxp[sl] += g * ones[sl]
    return np.ascontiguousarray(gxp[:, p:p + d, p:p + h, p:p + w])


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      training, momentum=0.9, eps=1e-5):
    """Per-channel normalization over spatial positions.

    Training mode uses batch statistics and updates the running buffers in
    place; inference mode uses the running statistics.  Returns (y, cache).
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"BN parameter shape mismatch for {c} channels")
    xr = x.reshape(c, -1)
    if training:
        mean = xr.mean(axis=1)
        var = xr.var(axis=1)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xr - mean[:, None]) * inv_std[:, None]
    y = (gamma[:, None] * xhat + beta[:, None]).reshape(x.shape).astype(x.dtype)
    cache = (xhat, inv_std, gamma, training)
    return y, cache


def batchnorm_backward(cache, grad_out):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma, training = cache
    c = grad_out.shape[0]
    gy = grad_out.reshape(c, -1)
    ggamma = (gy * xhat).sum(axis=1)
    gbeta = gy.sum(axis=1)
    if training:
        gxhat = gy * gamma[:, None]
        gx = (gxhat
              - gxhat.mean(axis=1, keepdims=True)
              - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)) * inv_std[:, None]
    else:
        gx = gy * (gamma * inv_std)[:, None]
    return gx.reshape(grad_out.shape).astype(grad_out.dtype), ggamma, gbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(mask, grad_out):
    return np.where(mask, grad_out, 0)


def sigmoid_forward(x):
    y = special.expit(x)
    return y, y


def sigmoid_backward(y, grad_out):
    return grad_out * y * (1.0 - y)
