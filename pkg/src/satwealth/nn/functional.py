"""Array kernels for the network engine.

Convolution weights use the ``[F, F, C_in, C_out]`` layout and activations
are ``[N, C, H, W]`` (a bare ``[C, H, W]`` input is treated as ``N = 1``).

The convolution supports a separate dilation rate per input channel. All
channels share one zero-padded grid, padded for the largest effective
window ``(F - 1) * max_dilation + 1``; smaller windows are centred inside the
largest one so every channel looks at the same ground footprint. Padding and
offsets move in whole dilation steps (``d * ((F - 1) // 2)``), which keeps
dilated windows on an upsampled grid aligned with native pixels for even F too.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import BadShape, ShapeMismatch, ValidationError, WindowTooLarge

VALID_DILATIONS = (1, 2, 4)


class ConvGeometry:
    """Padding, offsets and output size of one (possibly mixed-dilation) convolution."""

    def __init__(self, in_shape, filter_size: int, stride: int, dilations: Sequence[int], padding="same"):
        n, c, h, w = in_shape
        dilations = [int(d) for d in dilations]
        if len(dilations) != c:
            raise ShapeMismatch(f"{len(dilations)} dilation rates for {c} input channels")
        if any(d < 1 for d in dilations):
            raise ValidationError(f"dilation rates must be positive, got {dilations}")
        if stride < 1 or filter_size < 1:
            raise ValidationError("stride and filter size must be positive")
        self.filter_size = f = filter_size
        self.stride = stride
        self.dilations = dilations
        dmax = max(dilations)
        self.span = (f - 1) * dmax
        half = (f - 1) // 2
        if padding == "same":
            self.pad_lo = dmax * half
            self.pad_hi = self.span - self.pad_lo
        elif padding == "valid":
            self.pad_lo = self.pad_hi = 0
        else:
            raise ValidationError(f"padding must be 'same' or 'valid', got {padding!r}")
        hp, wp = h + self.pad_lo + self.pad_hi, w + self.pad_lo + self.pad_hi
        if hp < self.span + 1 or wp < self.span + 1:
            raise WindowTooLarge(f"input {h}x{w} smaller than the {self.span + 1}-pixel effective window")
        self.padded = (hp, wp)
        self.out_hw = ((hp - self.span - 1) // stride + 1, (wp - self.span - 1) // stride + 1)
        # channels grouped by dilation, each with its centring offset
        self.groups = []
        for d in sorted(set(dilations)):
            idx = np.array([i for i, di in enumerate(dilations) if di == d])
            self.groups.append((d, (dmax - d) * half, idx))

    def pad(self, x):
        if self.pad_lo == 0 and self.pad_hi == 0:
            return x
        lo, hi = self.pad_lo, self.pad_hi
        return np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))

    def patches(self, xp_group, d, offset):
        """Strided view ``[N, Cg, F, F, Ho, Wo]`` of the windows of one dilation group."""
        n, cg = xp_group.shape[:2]
        base = xp_group[:, :, offset:, offset:]
        s0, s1, s2, s3 = base.strides
        ho, wo = self.out_hw
        f, s = self.filter_size, self.stride
        return as_strided(base, shape=(n, cg, f, f, ho, wo),
                          strides=(s0, s1, s2 * d, s3 * d, s2 * s, s3 * s), writeable=False)


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [C, H, W] or [N, C, H, W] input, got shape {x.shape}")
    return x, False


def _check_weights(x, weights, bias):
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ShapeMismatch(f"weights must be [F, F, C, K], got {weights.shape}")
    if weights.shape[2] != x.shape[1]:
        raise ShapeMismatch(f"weights expect {weights.shape[2]} channels, input has {x.shape[1]}")
    if bias is not None and bias.shape != (weights.shape[3],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({weights.shape[3]},)")


def dilated_conv2d(x, weights, bias=None, stride: int = 1, dilations=None, padding="same"):
    """Convolution where input channel ``c`` is sampled with its own dilation rate.

    ``out[n, k, y, x] = b[k] + sum_c sum_ij xp[n, c, y*s + o_c + i*d_c, x*s + o_c + j*d_c] * w[i, j, c, k]``
    with ``xp`` the padded input and ``o_c`` the centring offset of channel ``c``.
    """
    x, single = _as_batch(x)
    weights = np.asarray(weights)
    _check_weights(x, weights, bias)
    if dilations is None:
        dilations = [1] * x.shape[1]
    geo = ConvGeometry(x.shape, weights.shape[0], stride, dilations, padding)
    xp = geo.pad(x)
    out = None
    n = x.shape[0]
    ho, wo = geo.out_hw
    for d, offset, idx in geo.groups:
        cols = geo.patches(np.ascontiguousarray(xp[:, idx]), d, offset)
        # one fixed memory layout, so equal inputs always take the same gemm path
        cols = np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(n * ho * wo, -1)
        wg = np.ascontiguousarray(weights[:, :, idx, :].transpose(2, 0, 1, 3)).reshape(cols.shape[1], -1)
        part = (cols @ wg).reshape(n, ho, wo, -1)
        out = part if out is None else out + part
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(grad_out, x, weights, stride: int = 1, dilations=None, padding="same",
                    need_input_grad: bool = True):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of :func:`dilated_conv2d`.

    With ``need_input_grad=False`` the input gradient is skipped and returned as ``None``.
    """
    x, single = _as_batch(x)
    grad_out = np.asarray(grad_out)
    if single:
        grad_out = grad_out[None]
    weights = np.asarray(weights)
    _check_weights(x, weights, None)
    if dilations is None:
        dilations = [1] * x.shape[1]
    geo = ConvGeometry(x.shape, weights.shape[0], stride, dilations, padding)
    expected = (x.shape[0], weights.shape[3]) + geo.out_hw
    if grad_out.shape != expected:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {expected}")

    f, s = geo.filter_size, geo.stride
    ho, wo = geo.out_hw
    xp = geo.pad(x)
    grad_w = np.zeros_like(weights, dtype=np.result_type(weights, x, grad_out))
    grad_xp = np.zeros(xp.shape, dtype=grad_w.dtype)
    g = grad_out.transpose(0, 2, 3, 1)  # [N, Ho, Wo, K]
    for d, offset, idx in geo.groups:
        cols = geo.patches(np.ascontiguousarray(xp[:, idx]), d, offset)
        gw = np.tensordot(cols, grad_out, axes=([0, 4, 5], [0, 2, 3]))  # [Cg, F, F, K]
        grad_w[:, :, idx, :] = gw.transpose(1, 2, 0, 3)
        if not need_input_grad:
            continue
        # [N, Ho, Wo, F, F, Cg]: contribution of every output pixel to every tap
        back = np.tensordot(g, weights[:, :, idx, :], axes=([3], [3]))
        gxg = np.zeros((x.shape[0], len(idx)) + xp.shape[2:], dtype=grad_w.dtype)
        for i in range(f):
            r0 = offset + i * d
            for j in range(f):
                c0 = offset + j * d
                gxg[:, :, r0: r0 + s * (ho - 1) + 1: s, c0: c0 + s * (wo - 1) + 1: s] += \
                    back[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        grad_xp[:, idx] += gxg
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_w, grad_b
    lo = geo.pad_lo
    h, w = x.shape[2:]
    grad_x = grad_xp[:, :, lo: lo + h, lo: lo + w]
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def adapt_first_layer(rgb_weights, target_channels: int = 9):
    """Widen ``[F, F, 3, K]`` first-layer weights to ``target_channels`` inputs.

    The RGB channels are copied unchanged; every extra channel gets the mean
    of the three RGB weights at the same position of the same filter.
    """
    w = np.asarray(rgb_weights)
    if w.ndim != 4 or w.shape[2] != 3 or w.shape[0] != w.shape[1]:
        raise BadShape(f"expected [F, F, 3, K] weights, got {w.shape}")
    if target_channels < 3:
        raise BadShape("target_channels must be at least 3")
    mean = (w[:, :, 0, :] + w[:, :, 1, :] + w[:, :, 2, :]) / 3
    extra = np.repeat(mean[:, :, None, :], target_channels - 3, axis=2)
    return np.concatenate([w, extra], axis=2)


def max_pool2d(x, size: int, stride: int, pad: int = 0):
    """Max pooling; returns ``(out, argmax)`` where argmax indexes the window."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    hp, wp = x.shape[2:]
    if hp < size or wp < size:
        raise WindowTooLarge(f"pooling window {size} larger than input {h}x{w}")
    ho, wo = (hp - size) // stride + 1, (wp - size) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = as_strided(x, shape=(n, c, ho, wo, size, size), strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
                     writeable=False).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool2d_backward(grad_out, arg, in_shape, size: int, stride: int, pad: int = 0):
    n, c, h, w = in_shape
    grad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    ho, wo = arg.shape[2:]
    di, dj = np.divmod(arg, size)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn_idx = np.arange(n)[:, None, None, None]
    cc_idx = np.arange(c)[None, :, None, None]
    np.add.at(grad, (nn_idx, cc_idx, rows, cols), grad_out)
    return grad[:, :, pad: pad + h, pad: pad + w]


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
