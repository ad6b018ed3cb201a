"""Stateful layer wrappers around the functional primitives.

Each layer caches what its backward pass needs on forward, accumulates
parameter gradients into Param.grad on backward, and returns the gradient
with respect to its input.
"""

from __future__ import annotations

import numpy as np

from . import ops


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad[...] = 0


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base: subclasses define .params (dict name -> Param) and .buffers."""

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class Conv3d(Layer):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, dilation=1,
                 padding=0, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = in_ch * kernel ** 3
        fan_out = out_ch * kernel ** 3
        w = glorot_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel),
                           fan_in, fan_out, dtype)
        self.params = {"w": Param(w), "b": Param(np.zeros(out_ch, dtype=dtype))}
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.conv3d_forward(x, self.params["w"].data, self.params["b"].data,
                                  self.stride, self.dilation, self.padding)

    def backward(self, gy):
        gx, gw, gb = ops.conv3d_backward(self._x, self.params["w"].data, gy,
                                         self.stride, self.dilation, self.padding)
        self.params["w"].grad += gw
        self.params["b"].grad += gb
        return gx


class ConvTranspose3d(Layer):
    def __init__(self, in_ch, out_ch, rng, kernel=2, stride=2, dtype=np.float32):
        super().__init__()
        self.stride = stride
        fan_in = in_ch * kernel ** 3
        fan_out = out_ch * kernel ** 3
        w = glorot_uniform(rng, (in_ch, out_ch, kernel, kernel, kernel),
                           fan_in, fan_out, dtype)
        self.params = {"w": Param(w), "b": Param(np.zeros(out_ch, dtype=dtype))}
        self._x = None

    def forward(self, x):
        self._x = x
        return ops.conv_transpose3d_forward(x, self.params["w"].data,
                                            self.params["b"].data, self.stride)

    def backward(self, gy):
        gx, gw, gb = ops.conv_transpose3d_backward(self._x, self.params["w"].data,
                                                   gy, self.stride)
        self.params["w"].grad += gw
        self.params["b"].grad += gb
        return gx


class BatchNorm3d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.params = {
            "gamma": Param(np.ones(channels, dtype=dtype)),
            "beta": Param(np.zeros(channels, dtype=dtype)),
        }
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=np.float64),
            "running_var": np.ones(channels, dtype=np.float64),
        }
        self._cache = None

    def forward(self, x, training):
        y, self._cache = ops.batchnorm_forward(
            x, self.params["gamma"].data, self.params["beta"].data,
            self.buffers["running_mean"], self.buffers["running_var"],
            training, self.momentum, self.eps)
        return y

    def backward(self, gy):
        gx, ggamma, gbeta = ops.batchnorm_backward(self._cache, gy)
        self.params["gamma"].grad += ggamma
        self.params["beta"].grad += gbeta
        return gx


class ReLU(Layer):
    def forward(self, x):
        y, self._mask = ops.relu_forward(x)
        return y

    def backward(self, gy):
        return ops.relu_backward(self._mask, gy)


class Sigmoid(Layer):
    def forward(self, x):
        y, self._y = ops.sigmoid_forward(x)
        return y

    def backward(self, gy):
        return ops.sigmoid_backward(self._y, gy)


class MaxPool3d(Layer):
    def __init__(self, kernel, stride, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        self._shape = x.shape
        y, self._arg = ops.maxpool3d_forward(x, self.kernel, self.stride, self.padding)
        return y

    def backward(self, gy):
        return ops.maxpool3d_backward(self._shape, self._arg, gy,
                                      self.kernel, self.stride, self.padding)


class AvgPool3d(Layer):
    def __init__(self, kernel, stride, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x):
        self._shape = x.shape
        y, self._counts = ops.avgpool3d_forward(x, self.kernel, self.stride, self.padding)
        return y

    def backward(self, gy):
        return ops.avgpool3d_backward(self._shape, self._counts, gy,
                                      self.kernel, self.stride, self.padding)


class ConvBnRelu(Layer):
    """3D conv followed by batch-norm and ReLU, the standard building unit."""

    def __init__(self, in_ch, out_ch, kernel, rng, dilation=1, padding=0,
                 bn_eps=1e-5, bn_momentum=0.9, dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(in_ch, out_ch, kernel, rng, dilation=dilation,
                           padding=padding, dtype=dtype)
        self.bn = BatchNorm3d(out_ch, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.relu = ReLU()

    def forward(self, x, training):
        return self.relu.forward(self.bn.forward(self.conv.forward(x), training))

    def backward(self, gy):
        return self.conv.backward(self.bn.backward(self.relu.backward(gy)))

    def children(self):
        return {"conv": self.conv, "bn": self.bn}


def named_layers(obj, prefix=""):
    """Depth-first (name, Layer) pairs for anything exposing .children()
    or plain Layer attributes registered in ._layers."""
    out = []
    if isinstance(obj, Layer) and not hasattr(obj, "children"):
        return [(prefix, obj)]
    children = obj.children() if hasattr(obj, "children") else {}
    if isinstance(obj, Layer) and obj.params:
        out.append((prefix, obj))
    for name, child in children.items():
        out.extend(named_layers(child, f"{prefix}.{name}" if prefix else name))
    return out
