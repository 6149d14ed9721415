"""Convolution, spatial softmax, and batch normalization ops.

conv2d has two interchangeable kernel implementations:

* ``numpy`` — the reference path.  Used by every tolerance-bearing test
  and for circular padding.
* ``torch`` — optional speed path that calls torch's CPU convolution
  kernels for the raw array math (forward, grad-input, grad-weight).
  Torch autograd is never used; this tape owns the backward formulas.

Both paths produce the same values within float rounding, and a test
pins them against each other.  Select with :func:`set_conv_backend`.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError
from .engine import Tensor, register_backward

_conv_backend = "numpy"
_torch = None


def set_conv_backend(name: str, num_threads: int | None = None) -> str:
    """Choose the conv kernel implementation: numpy | torch | auto.

    Returns the backend actually selected.  ``auto`` picks torch when it
    is importable, else numpy.  ``num_threads`` pins torch's thread
    count, which also pins bitwise reproducibility of training runs.
    """
    global _conv_backend, _torch
    if name == "auto":
        try:
            import torch  # noqa: F401

            name = "torch"
        except ImportError:
            name = "numpy"
    if name == "torch":
        import torch

        if num_threads is not None:
            torch.set_num_threads(num_threads)
        _torch = torch
    elif name != "numpy":
        raise ValueError(f"unknown conv backend {name!r}")
    _conv_backend = name
    return name


def get_conv_backend() -> str:
    return _conv_backend


def _pad_np(x: np.ndarray, p: int, circular: bool) -> np.ndarray:
    mode = "wrap" if circular else "constant"
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)


def _fold_pad(gp: np.ndarray, p: int, h: int, w: int, circular: bool) -> np.ndarray:
    """Collapse gradient w.r.t. a padded array back onto the core image."""
    tmp = gp[:, :, p : p + h, :].copy()
    if circular:
        tmp[:, :, h - p : h, :] += gp[:, :, 0:p, :]
        tmp[:, :, 0:p, :] += gp[:, :, p + h :, :]
    out = tmp[:, :, :, p : p + w].copy()
    if circular:
        out[:, :, :, w - p : w] += tmp[:, :, :, 0:p]
        out[:, :, :, 0:p] += tmp[:, :, :, p + w :]
    return out


def _conv_fwd_np(x, w, d, circular):
    b, c, h, wid = x.shape
    o = w.shape[0]
    xp = _pad_np(x, d, circular)
    out = np.zeros((b, o, h, wid), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            v = xp[:, :, ky * d : ky * d + h, kx * d : kx * d + wid]
            out += np.einsum("bchw,oc->bohw", v, w[:, :, ky, kx], optimize=True)
    return out


def _conv_bwd_np(x, w, g, d, circular):
    b, c, h, wid = x.shape
    xp = _pad_np(x, d, circular)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for ky in range(3):
        for kx in range(3):
            sl = np.s_[:, :, ky * d : ky * d + h, kx * d : kx * d + wid]
            gxp[sl] += np.einsum("bohw,oc->bchw", g, w[:, :, ky, kx], optimize=True)
            gw[:, :, ky, kx] = np.einsum("bohw,bchw->oc", g, xp[sl], optimize=True)
    gx = _fold_pad(gxp, d, h, wid, circular)
    return gx, gw


def _conv_fwd_torch(x, w, d):
    t = _torch
    with t.no_grad():
        xt = t.nn.functional.pad(t.from_numpy(x), (d, d, d, d))
        out = t.nn.functional.conv2d(xt, t.from_numpy(w), dilation=d)
    return out.numpy()


def _conv_bwd_torch(x, w, g, d):
    t = _torch
    h, wid = x.shape[2], x.shape[3]
    with t.no_grad():
        gt = t.from_numpy(np.ascontiguousarray(g))
        wt = t.from_numpy(w)
        gxp = t.nn.functional.conv_transpose2d(gt, wt, dilation=d)
        gx = gxp[:, :, d : d + h, d : d + wid].contiguous().numpy()
        xt = t.nn.functional.pad(t.from_numpy(x), (d, d, d, d))
        gw = t.nn.functional.conv2d(xt.transpose(0, 1), gt.transpose(0, 1), stride=d)
        gw = gw.transpose(0, 1).contiguous().numpy()
    return gx, gw


def conv2d(x: Tensor, w: Tensor, dilation: int = 1, padding: str = "zero") -> Tensor:
    """Stride-one 3x3 convolution preserving spatial size.

    ``x`` is [B, C, H, W], ``w`` is [O, C, 3, 3].  ``padding`` is
    ``"zero"`` or ``"circular"``; circular padding gives exact integer
    shift equivariance and always runs on the numpy path.
    """
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    if w.shape[2:] != (3, 3):
        raise ShapeMismatchError("conv2d kernel must be 3x3", w.shape)
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d input channels", x.shape, w.shape)
    if padding not in ("zero", "circular"):
        raise ValueError(f"unknown padding mode {padding!r}")
    d = int(dilation)
    if d < 1 or d > min(x.shape[2], x.shape[3]):
        raise ValueError(f"dilation {d} invalid for spatial size {x.shape[2:]}")
    circular = padding == "circular"
    use_torch = _conv_backend == "torch" and not circular
    if use_torch:
        out = _conv_fwd_torch(x.values, w.values, d)
    else:
        out = _conv_fwd_np(x.values, w.values, d, circular)
    return x.graph._record("conv2d", (x, w), out, ctx=(d, circular, use_torch))


@register_backward("conv2d")
def _conv2d_bwd(node, x, w, g):
    d, circular, use_torch = node.ctx
    if use_torch:
        gx, gw = _conv_bwd_torch(x.values, w.values, g, d)
    else:
        gx, gw = _conv_bwd_np(x.values, w.values, g, d, circular)
    return [gx, gw]


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the H, W axes of a [B, N, H, W] tensor.

    Per-map max subtraction keeps the exponentials in range; each output
    map is positive and sums to 1.
    """
    v = x.values
    m = v.max(axis=(2, 3), keepdims=True)
    e = np.exp(v - m)
    y = e / e.sum(axis=(2, 3), keepdims=True)
    return x.graph._record("spatial_softmax", (x,), y, ctx=y)


@register_backward("spatial_softmax")
def _spatial_softmax_bwd(node, x, g):
    y = node.ctx
    dot = (g * y).sum(axis=(2, 3), keepdims=True)
    return [y * (g - dot)]


class BatchNormState:
    """Running statistics for one batch-norm layer (inference mode)."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "var": self.var}


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over (B, H, W) with affine params.

    Training mode normalizes by batch statistics and folds them into the
    running averages (momentum 0.9); inference mode uses the stored
    running statistics and touches nothing.
    """
    v = x.values
    axes = (0, 2, 3)
    eps = state.eps
    if training:
        mu = v.mean(axis=axes)
        var = v.var(axis=axes)
        m = state.momentum
        state.mean = (m * state.mean + (1.0 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1.0 - m) * var).astype(state.var.dtype)
    else:
        mu = state.mean.astype(v.dtype)
        var = state.var.astype(v.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.values[None, :, None, None] * xhat + beta.values[None, :, None, None]
    return x.graph._record("batch_norm", (x, gamma, beta), out.astype(v.dtype), ctx=(xhat, inv_std, training))


@register_backward("batch_norm")
def _batch_norm_bwd(node, x, gamma, beta, g):
    xhat, inv_std, training = node.ctx
    axes = (0, 2, 3)
    dbeta = g.sum(axis=axes)
    dgamma = (g * xhat).sum(axis=axes)
    gs = gamma.values[None, :, None, None] * inv_std[None, :, None, None]
    if training:
        m = g.shape[0] * g.shape[2] * g.shape[3]
        gsum = g.sum(axis=axes, keepdims=True)
        gxhat = (g * xhat).sum(axis=axes, keepdims=True)
        dx = gs * (g - gsum / m - xhat * gxhat / m)
    else:
        dx = gs * g
    return [dx.astype(x.dtype), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)]
