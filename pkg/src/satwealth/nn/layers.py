"""Layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""

from __future__ import annotations

import numpy as np

from . import functional as F


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v

    def cast(self, dtype):
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        self.zero_grad()


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, filter_size, stride=1, dilations=None, padding="same",
                 bias=True, rng=None, input_grad=True):
        super().__init__()
        self.stride = stride
        self.dilations = list(dilations) if dilations is not None else [1] * in_channels
        self.padding = padding
        self.input_grad = input_grad
        fan_in = filter_size * filter_size * in_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           size=(filter_size, filter_size, in_channels, out_channels))
        if bias:
            self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()

    def forward(self, x, train=False):
        self._x = x
        return F.dilated_conv2d(x, self.params["weight"], self.params.get("bias"), self.stride,
                                self.dilations, self.padding)

    def backward(self, grad):
        gx, gw, gb = F.conv2d_backward(grad, self._x, self.params["weight"], self.stride, self.dilations,
                                       self.padding, need_input_grad=self.input_grad)
        self.grads["weight"] += gw
        if "bias" in self.params:
            self.grads["bias"] += gb
        return gx


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(in_features, out_features))
        self.params["bias"] = np.zeros(out_features)
        self.zero_grad()

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] += self._x.T @ grad
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0).astype(grad.dtype, copy=False)


class MaxPool2d(Layer):
    def __init__(self, size=2, stride=None, pad=0):
        super().__init__()
        self.size, self.stride, self.pad = size, stride or size, pad

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self._arg = F.max_pool2d(x, self.size, self.stride, self.pad)
        return out

    def backward(self, grad):
        return F.max_pool2d_backward(grad, self._arg, self._shape, self.size, self.stride, self.pad)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics (momentum 0.1)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grad()

    def forward(self, x, train=False):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / max(count - 1, 1)
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        self._train = train
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean[None, :, None, None]) * self._inv[None, :, None, None]
        return gamma * self._xhat + beta

    def backward(self, grad):
        xhat, inv = self._xhat, self._inv[None, :, None, None]
        self.grads["gamma"] += (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += grad.sum(axis=(0, 2, 3))
        g = grad * self.params["gamma"][None, :, None, None]
        if not self._train:
            return g * inv
        mean_g = g.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (g - mean_g - xhat * mean_gx) * inv


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def zero_grad(self):
        for _, layer in self.children():
            layer.zero_grad()

    def named_params(self, prefix=""):
        for name, layer in self.children():
            yield from layer.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, layer in self.children():
            yield from layer.named_buffers(f"{prefix}{name}.")

    def cast(self, dtype):
        for _, layer in self.children():
            layer.cast(dtype)


class PreActBlock(Sequential):
    """Pre-activation residual block: BN-ReLU-conv-BN-ReLU-conv plus shortcut.

    A projection (1x1 conv on the pre-activated input) replaces the identity
    shortcut when the stride or width changes.
    """

    def __init__(self, in_channels, out_channels, stride=1, rng=None):
        super().__init__()
        self.bn1 = BatchNorm2d(in_channels)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)
        self.relu2 = ReLU()
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, bias=False, rng=rng)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride, bias=False, rng=rng)

    def children(self):
        names = ["bn1", "conv1", "bn2", "conv2"] + (["shortcut"] if self.shortcut is not None else [])
        return [(n, getattr(self, n)) for n in names]

    def forward(self, x, train=False):
        a = self.relu1.forward(self.bn1.forward(x, train))
        skip = x if self.shortcut is None else self.shortcut.forward(a, train)
        h = self.conv1.forward(a, train)
        h = self.conv2.forward(self.relu2.forward(self.bn2.forward(h, train)), train)
        return h + skip

    def backward(self, grad):
        g = self.conv2.backward(grad)
        g = self.conv1.backward(self.bn2.backward(self.relu2.backward(g)))
        if self.shortcut is None:
            skip = grad
        else:
            g = g + self.shortcut.backward(grad)
            skip = 0.0
        return self.bn1.backward(self.relu1.backward(g)) + skip
