"""Dense array ops with hand-written gradients for the segmentation network.

Arrays are plain ``numpy.ndarray`` objects in NCHW layout. Each differentiable
op comes as a ``*_forward`` returning ``(out, cache)`` and a ``*_backward``
taking the upstream gradient and the cache. Ops keep the dtype of their
inputs, so the same code runs float32 training and float64 gradient checks.

Convolution uses cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride extents must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral output extent: ({size}+2*{pad}-{kernel})/{stride}+1"
        )
    return span // stride + 1


def _tap(a, i, j, sh, sw, oh, ow):
    # strided window of ``a`` whose top-left sample sits at (i, j)
    return a[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]


def _correlate(xp, w, sh, sw, oh, ow):
    """Sum over kernel taps of w[:, :, i, j] applied to shifted views of xp.

    ``xp`` is (N, C, ., .), ``w`` is (K, C, kh, kw); returns (N, K, oh, ow).
    """
    k, _, kh, kw = w.shape
    acc = np.zeros((k, xp.shape[0], oh, ow), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(w[:, :, i, j], _tap(xp, i, j, sh, sw, oh, ow), axes=(1, 1))
    return acc.transpose(1, 0, 2, 3)


def _scatter(dy, w, sh, sw, full_shape):
    """Adjoint of ``_correlate`` w.r.t. its input: spread dy back through w.

    ``dy`` is (N, K, oh, ow), ``w`` is (K, C, kh, kw); returns an array of
    ``full_shape`` = (N, C, Hp, Wp).
    """
    _, _, kh, kw = w.shape
    oh, ow = dy.shape[2:]
    out = np.zeros(full_shape, dtype=np.result_type(dy, w))
    for i in range(kh):
        for j in range(kw):
            # (C, N, oh, ow) -> (N, C, oh, ow)
            part = np.tensordot(w[:, :, i, j], dy, axes=(0, 1)).transpose(1, 0, 2, 3)
            _tap(out, i, j, sh, sw, oh, ow)[...] += part
    return out


def _weight_grad(xp, dy, sh, sw, kh, kw):
    """Gradient of ``_correlate`` w.r.t. the kernel; returns (K, C, kh, kw)."""
    n, c = xp.shape[:2]
    k, (oh, ow) = dy.shape[1], dy.shape[2:]
    dw = np.empty((k, c, kh, kw), dtype=np.result_type(xp, dy))
    for i in range(kh):
        for j in range(kw):
            dw[:, :, i, j] = np.tensordot(
                dy, _tap(xp, i, j, sh, sw, oh, ow), axes=([0, 2, 3], [0, 2, 3])
            )
    return dw


def _check_spec(x, w, b, spec, weight_layout):
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    if weight_layout == "KC":
        want = (spec.out_channels, spec.in_channels, *spec.kernel)
    else:
        want = (spec.in_channels, spec.out_channels, *spec.kernel)
    if w.shape != want:
        raise ValueError(f"weight shape {w.shape} does not match spec {want}")
    if b.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {b.shape} does not match ({spec.out_channels},)")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")


def conv2d_forward(x, w, b, spec: ConvSpec):
    """2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        w: weights of shape (K, C, kh, kw).
        b: bias of shape (K,).
        spec: convolution geometry.

    Returns:
        ``(out, cache)`` with ``out`` of shape (N, K, H', W').
    """
    _check_spec(x, w, b, spec, "KC")
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    oh = conv_output_size(x.shape[2], kh, sh, ph)
    ow = conv_output_size(x.shape[3], kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    out = _correlate(xp, w, sh, sw, oh, ow)
    out += b.reshape(1, -1, 1, 1)
    return out, (xp, w, spec, x.shape)


def conv2d_input_grad(dy, w, spec: ConvSpec, input_shape):
    """Gradient of conv2d w.r.t. its input for upstream gradient ``dy``."""
    (ph, pw), (sh, sw) = spec.padding, spec.stride
    n, c, h, wd = input_shape
    full = _scatter(dy, w, sh, sw, (n, c, h + 2 * ph, wd + 2 * pw))
    return full[:, :, ph : ph + h, pw : pw + wd]


def conv2d_backward(dy, cache):
    """Returns ``(dx, dw, db)``."""
    xp, w, spec, in_shape = cache
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dx = conv2d_input_grad(dy, w, spec, in_shape)
    dw = _weight_grad(xp, dy, sh, sw, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def transposed_conv2d_forward(x, w, b, spec: ConvSpec):
    """Transposed convolution, the adjoint of ``conv2d`` with the same spec.

    Weights are laid out (C_in, C_out, kh, kw). Output extent is
    ``(H - 1) * stride - 2 * pad + kernel``.
    """
    _check_spec(x, w, b, spec, "CK")
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    n, _, h, wd = x.shape
    oh = (h - 1) * sh - 2 * ph + kh
    ow = (wd - 1) * sw - 2 * pw + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"transposed conv output extent ({oh}, {ow}) is empty")
    full = _scatter(x, w, sh, sw, (n, spec.out_channels, oh + 2 * ph, ow + 2 * pw))
    out = full[:, :, ph : ph + oh, pw : pw + ow]
    out += b.reshape(1, -1, 1, 1)
    return out, (x, w, spec)


def transposed_conv2d_backward(dy, cache):
    """Returns ``(dx, dw, db)``."""
    x, w, spec = cache
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    h, wd = x.shape[2:]
    dyp = np.pad(dy, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else dy
    dx = _correlate(dyp, w, sh, sw, h, wd)
    # dw[c, k, i, j] = sum x[n, c] * dyp[n, k, tap(i, j)], already (C, K) order
    dw = _weight_grad(dyp, x, sh, sw, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def maxpool2d_forward(x):
    """2x2 max-pool with stride 2.

    Ties route to the first maximal element in row-major window order.
    Returns ``(out, cache)`` where the cache holds the argmax indices (0..3).
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2d_backward(dy, cache):
    idx, (n, c, h, w) = cache
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    win = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h, w)


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy, mask):
    # gradient at exactly 0 is 0
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat {a.shape} with {b.shape}: spatial mismatch")
    return np.concatenate([a, b], axis=1)


def split_channels(dy, ca: int):
    """Backward of ``concat_channels``: route gradient to the two inputs."""
    return dy[:, :ca], dy[:, ca:]


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets, valid=None):
    """Mean categorical cross entropy over valid pixels.

    Args:
        logits: (N, K, H, W) scores.
        targets: (N, H, W) integer class ids in 0..K-1.
        valid: optional (N, H, W) boolean mask; padded pixels are False.

    Returns:
        ``(loss, dlogits)``; the gradient is zero on invalid pixels.
    """
    n, k, h, w = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n, h, w):
        raise ValueError(f"targets shape {targets.shape} != {(n, h, w)}")
    if valid is None:
        valid = np.ones((n, h, w), dtype=bool)
    count = int(np.count_nonzero(valid))
    if count == 0:
        raise ValueError("no valid pixels")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"targets must lie in 0..{k - 1}")

    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[:, None].astype(np.intp), axis=1)[:, 0]
    loss = -picked[valid].sum() / count

    grad = np.exp(logp)
    np.put_along_axis(
        grad,
        targets[:, None].astype(np.intp),
        np.take_along_axis(grad, targets[:, None].astype(np.intp), axis=1) - 1,
        axis=1,
    )
    grad *= (valid[:, None] / count).astype(grad.dtype)
    return float(loss), grad.astype(logits.dtype, copy=False)


def finite_diff_check(f: Callable, x, analytic, h: float = 1e-5, coords=None) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` maps an array shaped like ``x`` to a scalar; ``analytic`` is the
    claimed gradient at ``x``. Relative error per coordinate is
    ``|a - g| / max(1e-8, |a| + |g|)``. ``coords`` optionally restricts the
    check to these flat indices.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        numeric[k] = (fp - fm) / (2 * h)
    a = analytic[idx]
    err = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
