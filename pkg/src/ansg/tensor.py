"""Forward numerical kernels on dense ``C x H x W`` arrays.

Tensors are plain :class:`numpy.ndarray` objects. A 2D feature map is laid
out channels-first (``C x H x W``); a stack of maps prepends the slice axis.
All convolutions use the cross-correlation convention (the kernel is not
flipped), which is what every deep-learning framework calls "convolution".

Each kernel here is a pure function. The matching adjoint helpers
(``*_backward``) are used by :mod:`ansg.autograd`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

PADDING_MODES = ("valid", "same")


@dataclass
class Conv2DKernel:
    """Weights ``out x in x kh x kw`` and an optional per-output bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]


def as_tensor(x, dtype=None):
    a = np.asarray(x, dtype=dtype)
    if any(n < 1 for n in a.shape):
        raise DimensionError(f"all extents must be >= 1, got {a.shape}")
    return a


def _check_chw(x, name="input"):
    if x.ndim != 3:
        raise DimensionError(f"{name} must be C x H x W, got shape {x.shape}")


def same_padding(k):
    """Split ``k - 1`` padding cells; the extra one goes to the high side."""
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def contract(wmat, cols):
    """``(O, K) @ (K, N)``; the single contraction behind conv and LSTM gates.

    Operands are brought to C order first: BLAS may pick a different
    summation order for other layouts, which would break bitwise agreement
    between the vector and convolutional cells.
    """
    return np.dot(np.ascontiguousarray(wmat), np.ascontiguousarray(cols))


def _pad_spatial(x, kh, kw, padding):
    if padding == "valid":
        return x
    if padding == "same":
        t, b = same_padding(kh)
        l, r = same_padding(kw)
        return np.pad(x, ((0, 0), (t, b), (l, r)))
    raise ConfigError(f"unknown padding mode {padding!r}; expected one of {PADDING_MODES}")


def im2col(x, kh, kw):
    """Patch matrix ``(C*kh*kw, H'*W')`` of a (pre-padded) ``C x H x W`` map."""
    c, h, w = x.shape
    p = sliding_window_view(x, (kh, kw), axis=(1, 2))
    ho, wo = p.shape[1], p.shape[2]
    return np.ascontiguousarray(p.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo), (ho, wo)


def conv2d(x, weights, bias=None, padding="valid"):
    """2D cross-correlation of ``x`` (``C x H x W``) with ``weights`` (``O x C x kh x kw``).

    ``valid`` shrinks each axis by ``k - 1``; ``same`` zero-pads so the
    output keeps the input extent (for even ``k`` the extra padding cell is
    placed on the high-index side).
    """
    _check_chw(x)
    if weights.ndim != 4:
        raise DimensionError(f"kernel must be O x C x kh x kw, got shape {weights.shape}")
    o, c, kh, kw = weights.shape
    if c != x.shape[0]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[0]} channels, kernel expects {c}"
        )
    if padding == "valid" and (kh > x.shape[1] or kw > x.shape[2]):
        raise DimensionError(
            f"kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]} (axes height/width)"
        )
    xp = _pad_spatial(x, kh, kw, padding)
    cols, (ho, wo) = im2col(xp, kh, kw)
    out = contract(weights.reshape(o, c * kh * kw), cols)
    if bias is not None:
        out = out + bias.reshape(o, 1)
    return out.reshape(o, ho, wo)


def conv2d_backward(x, weights, gout, padding="valid", need_dx=True, need_dw=True):
    """Return ``(dx, dweights)`` for :func:`conv2d` given the output adjoint.

    Either entry is None when not requested.
    """
    o, c, kh, kw = weights.shape
    dw = dxp = None
    if need_dw:
        xp = _pad_spatial(x, kh, kw, padding)
        p = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        dw = np.tensordot(gout, p, axes=([1, 2], [1, 2]))
    if not need_dx:
        return None, dw
    gp = np.pad(gout, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    q = sliding_window_view(gp, (kh, kw), axis=(1, 2))
    dxp = np.tensordot(weights[:, :, ::-1, ::-1], q, axes=([0, 2, 3], [0, 3, 4]))
    if padding == "same":
        t, _ = same_padding(kh)
        l, _ = same_padding(kw)
        dxp = dxp[:, t:t + x.shape[1], l:l + x.shape[2]]
    return dxp, dw


def max_pool2(x):
    """2x2 max-pooling with stride 2.

    A trailing odd row/column is dropped. Returns ``(out, argmax)`` where
    ``argmax`` holds the winning position (0..3, row-major) inside each
    window; ties go to the lowest index.
    """
    _check_chw(x)
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"max_pool2 needs spatial extent >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo].reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def max_pool2_backward(gout, argmax, in_shape):
    c, ho, wo = gout.shape
    win = np.zeros((c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(win, argmax[..., None], gout[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=gout.dtype)
    dx[:, :2 * ho, :2 * wo] = win.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
    return dx


def _check_deconv_kernel(weights):
    if weights.ndim != 4 or weights.shape[2:] != (2, 2):
        raise ConfigError(f"deconv2 needs an O x C x 2 x 2 kernel, got shape {weights.shape}")


def deconv2(x, weights, bias=None):
    """Stride-2 transposed convolution with a 2x2 kernel; doubles H and W.

    Input cell ``(i, j)`` scatters ``x[c, i, j] * weights[o, c]`` into the
    disjoint output block ``[2i:2i+2, 2j:2j+2]``.
    """
    _check_chw(x)
    _check_deconv_kernel(weights)
    o, c = weights.shape[:2]
    if c != x.shape[0]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[0]} channels, kernel expects {c}"
        )
    _, h, w = x.shape
    out = np.tensordot(weights, x, axes=([1], [0]))  # O, 2, 2, H, W
    out = out.transpose(0, 3, 1, 4, 2).reshape(o, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.reshape(o, 1, 1)
    return out


def deconv2_backward(x, weights, gout):
    o, c = weights.shape[:2]
    _, h, w = x.shape
    g5 = gout.reshape(o, h, 2, w, 2)
    dx = np.tensordot(weights, g5, axes=([0, 2, 3], [0, 2, 4]))
    dw = np.tensordot(g5, x, axes=([1, 3], [1, 2])).transpose(0, 3, 1, 2)
    return dx, dw


def softmax_channels(x):
    """Softmax over the channel axis (axis 0), max-subtracted."""
    _check_chw(x)
    if x.shape[0] < 2:
        raise DimensionError(f"softmax needs >= 2 channels, got {x.shape[0]}")
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def concat_channels(a, b):
    """Stack ``b``'s channels after ``a``'s; a 0-channel operand is allowed."""
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(
            f"spatial mismatch in concat: {a.shape[1:]} vs {b.shape[1:]} (height, width)"
        )
    return np.concatenate([a, b], axis=0)


def crop_offsets(extent, target):
    """Low-side offset of a centered crop; odd surplus goes to the high side."""
    return (extent - target) // 2


def crop_center(x, h, w):
    _check_chw(x)
    H, W = x.shape[1:]
    if h > H or w > W:
        raise DimensionError(f"crop {h}x{w} exceeds input {H}x{W}")
    t, l = crop_offsets(H, h), crop_offsets(W, w)
    return x[:, t:t + h, l:l + w]


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
