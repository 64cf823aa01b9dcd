"""Differentiable U-net primitives on NCHW tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import spectral
from .tensor import Tensor, as_tensor, make_op

__all__ = [
    "conv2d",
    "conv_transpose2x2",
    "conv2x2_stride2",
    "maxpool2",
    "avgpool2",
    "relu",
    "concat_channels",
    "gaussian_filter_valid",
    "image_to_spectrum",
    "spectrum_to_image",
    "he_normal",
]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Zero-padded 'same' convolution (cross-correlation) with an odd ``k x k`` kernel.

    ``w`` has shape ``(out_ch, in_ch, k, k)``.
    """
    x = as_tensor(x)
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {w.shape[2:]}")
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weights expect {ci}")
    p = k // 2
    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    wm = w.data.reshape(o, c * k * k)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0) if b is not None else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wm
            if k == 1:
                dx = np.ascontiguousarray(dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(n, h, wd, c, k, k)
                dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
                dx = dxp[:, :, p:p + h, p:p + wd]
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, grad_fn)


def conv_transpose2x2(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel; doubles H and W.

    ``w`` has shape ``(in_ch, out_ch, 2, 2)``.
    """
    x = as_tensor(x)
    n, c, h, wd = x.shape
    ci, o = w.shape[:2]
    if ci != c or w.shape[2:] != (2, 2):
        raise ValueError(f"conv_transpose2x2 weight shape {w.shape} incompatible with {c} channels")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.data.reshape(c, o * 4)
    out = (xm @ wm).reshape(n, h, wd, o, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    if b is not None:
        out += b.data[None, :, None, None]

    def grad_fn(g):
        g2 = g.reshape(n, o, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, o * 4)
        dw = (xm.T @ g2).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        dx = None
        if x.requires_grad:
            dx = np.ascontiguousarray((g2 @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, grad_fn)


def conv2x2_stride2(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 2x2 convolution (the adjoint of :func:`conv_transpose2x2`).

    ``w`` has shape ``(out_ch, in_ch, 2, 2)``; H and W must be even.
    """
    x = as_tensor(x)
    n, c, h, wd = x.shape
    o = w.shape[0]
    if h % 2 or wd % 2:
        raise ValueError("conv2x2_stride2 needs even spatial dims")
    cols = x.data.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c * 4)
    wm = w.data.reshape(o, c * 4)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, h // 2, wd // 2, o).transpose(0, 3, 1, 2))

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0) if b is not None else None
        dx = None
        if x.requires_grad:
            dx = (g2 @ wm).reshape(n, h // 2, wd // 2, c, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(x.shape)
        return (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, grad_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; the winning index per window routes the gradient."""
    x = as_tensor(x)
    n, c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{wd}")
    win = x.data.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, wd // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros((n, c, h // 2, wd // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        dx = gw.reshape(n, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (dx,)

    return make_op(out, (x,), grad_fn)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 mean pooling, stride 2; an odd trailing row/column is dropped."""
    x = as_tensor(x)
    n, c, h, wd = x.shape
    h2, w2 = h // 2, wd // 2
    out = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (dx,)

    return make_op(out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    return make_op(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]))


def _corr_valid(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    m = x.shape[axis] - taps.size + 1
    out = 0.0
    for t, tap in enumerate(taps):
        out = out + tap * np.take(x, np.arange(t, t + m), axis=axis)
    return out


def _corr_valid_adjoint(g: np.ndarray, taps: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = n_in
    out = np.zeros(shape, dtype=g.dtype)
    m = g.shape[axis]
    for t, tap in enumerate(taps):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(t, t + m)
        out[tuple(idx)] += tap * g
    return out


def gaussian_filter_valid(x: Tensor, taps: np.ndarray) -> Tensor:
    """Separable per-channel filtering with a 1D kernel, 'valid' region only."""
    x = as_tensor(x)
    taps = np.asarray(taps, dtype=x.dtype)
    h, wd = x.shape[-2:]
    out = _corr_valid(_corr_valid(x.data, taps, -2), taps, -1)

    def grad_fn(g):
        gh = _corr_valid_adjoint(g, taps, -1, wd)
        return (_corr_valid_adjoint(gh, taps, -2, h),)

    return make_op(out, (x,), grad_fn)


def image_to_spectrum(x: Tensor, shifted: bool = True, scale: float = 1.0) -> Tensor:
    """``(N, 1, H, W)`` image batch to packed ``(N, 2, H, W)`` orthonormal spectra.

    The map is real-linear; its adjoint is the real part of the inverse
    orthonormal transform, which is what flows back.
    """
    x = as_tensor(x)
    if x.shape[1] != 1:
        raise ValueError(f"image_to_spectrum expects one channel, got {x.shape[1]}")
    out = spectral.image_to_channels(x.data, shifted=shifted, scale=scale).astype(x.dtype, copy=False)

    def grad_fn(g):
        dx, _ = spectral.channels_to_image(g, shifted=shifted, scale=1.0, warn=False)
        return ((dx * scale).astype(x.dtype, copy=False),)

    return make_op(out, (x,), grad_fn)


def spectrum_to_image(z: Tensor, shifted: bool = True, scale: float = 1.0) -> tuple[Tensor, float]:
    """Packed spectra back to real images; also returns the max imaginary residual."""
    z = as_tensor(z)
    out, residual = spectral.channels_to_image(z.data, shifted=shifted, scale=scale, warn=False)
    out = out.astype(z.dtype, copy=False)

    def grad_fn(g):
        dz = spectral.image_to_channels(g, shifted=shifted, scale=1.0) / scale
        return (dz.astype(z.dtype, copy=False),)

    return make_op(out, (z,), grad_fn), residual


def he_normal(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
              dtype=np.float32) -> np.ndarray:
    """Zero-mean normal weights with standard deviation sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
