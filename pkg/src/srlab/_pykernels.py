"""Pure numpy implementations of the convolution and pooling kernels.

These mirror the signatures of the compiled ``_ckernels`` module exactly, so
either backend can be swapped in by :mod:`srlab.kernels`.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, Ho, Wo, kh, kw)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d_forward(x, w, b, pad):
    kh, kw = w.shape[2], w.shape[3]
    cols = _windows(x, kh, kw, pad)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out = out.transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x, w, gout, pad, need_dx=True, need_dw=True):
    """Return ``(dx, dw, db)``; entries not requested are ``None``."""
    F, C, kh, kw = w.shape
    H, W = x.shape[2], x.shape[3]
    dx = dw = None
    db = gout.sum(axis=(0, 2, 3))
    if need_dw:
        cols = _windows(x, kh, kw, pad)
        dw = np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3]))
        dw = np.ascontiguousarray(dw, dtype=x.dtype)
    if need_dx:
        # full correlation of the output gradient with the flipped kernel,
        # then crop away the padding ring
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        full = conv2d_forward(
            np.ascontiguousarray(gout), wf, np.zeros(C, dtype=x.dtype), kh - 1
        )
        dx = np.ascontiguousarray(full[:, :, pad:pad + H, pad:pad + W])
    return dx, dw, db


def maxpool2_forward(x):
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    v = x[:, :, :2 * Ho, :2 * Wo].reshape(N, C, Ho, 2, Wo, 2)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
    idx = v.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(gout, idx, H, W):
    N, C, Ho, Wo = gout.shape
    g = np.zeros((N, C, Ho, Wo, 4), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gout[..., None], axis=-1)
    g = g.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((N, C, H, W), dtype=gout.dtype)
    dx[:, :, :2 * Ho, :2 * Wo] = g.reshape(N, C, 2 * Ho, 2 * Wo)
    return dx
