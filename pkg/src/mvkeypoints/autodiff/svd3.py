"""Differentiable SVD for 3x3 matrices.

Forward: one-sided Jacobi on the columns, which converges
unconditionally at this size.  Backward: the matrix-calculus gradient
for a full square SVD, with the (s_i^2 - s_j^2) denominators clamped to
a floor so near-degenerate spectra produce large-but-finite gradients
instead of NaNs.  Clamp events bump the ``svd_denominator_clamp``
diagnostics counter.
"""

from __future__ import annotations

import numpy as np

from .. import diag
from . import engine
from .engine import Tensor, register_backward

_JACOBI_REL_TOL = 1e-15   # relative off-diagonal target for A^T A
_MAX_SWEEPS = 60
_DENOM_FLOOR = 1e-8


def _svd3_values(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain-array 3x3 SVD: returns (U, S, V) with M = U @ diag(S) @ V.T,
    S sorted descending and non-negative."""
    a = np.array(m, dtype=np.float64)
    v = np.eye(3)
    for _ in range(_MAX_SWEEPS):
        off = 0.0
        for i, j in ((0, 1), (0, 2), (1, 2)):
            ai = a[:, i]
            aj = a[:, j]
            app = ai @ ai
            aqq = aj @ aj
            apq = ai @ aj
            scale = np.sqrt(app * aqq)
            if scale > 0:
                off = max(off, abs(apq) / scale)
            if abs(apq) <= _JACOBI_REL_TOL * scale or scale == 0.0:
                continue
            # classic Jacobi rotation zeroing the (i, j) entry of A^T A
            zeta = (aqq - app) / (2.0 * apq)
            t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            if zeta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            a[:, [i, j]] = a[:, [i, j]] @ np.array([[c, s], [-s, c]])
            v[:, [i, j]] = v[:, [i, j]] @ np.array([[c, s], [-s, c]])
        if off < _JACOBI_REL_TOL:
            break
    sing = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-sing)
    sing = sing[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros((3, 3))
    norm_floor = max(sing[0], 1.0) * 1e-15
    for k in range(3):
        if sing[k] > norm_floor:
            u[:, k] = a[:, k] / sing[k]
        elif k == 0:
            # zero matrix: any orthogonal pair works; identity by convention
            return np.eye(3), np.zeros(3), v
        elif k == 1:
            # rank 1: pick any unit vector orthogonal to u0
            pivot = np.zeros(3)
            pivot[np.argmin(np.abs(u[:, 0]))] = 1.0
            w = np.cross(u[:, 0], pivot)
            u[:, 1] = w / np.linalg.norm(w)
            sing[1] = 0.0
        else:
            u[:, 2] = np.cross(u[:, 0], u[:, 1])
            sing[2] = 0.0
    return u, np.maximum(sing, 0.0), v


def svd3(m: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable SVD of a single 3x3 tensor.

    Returns (U, S, V) tensors with ``M = U @ diag(S) @ V.T``.  Internal
    arithmetic is float64 regardless of the graph dtype; outputs follow
    the input dtype.
    """
    if m.shape != (3, 3):
        raise ValueError(f"svd3 expects a (3, 3) tensor, got {m.shape}")
    u, s, v = _svd3_values(m.values.astype(np.float64))
    dt = m.dtype
    return m.graph._record("svd3", (m,), (u.astype(dt), s.astype(dt), v.astype(dt)), ctx=(u, s, v))


@register_backward("svd3")
def _svd3_bwd(node, m, out_grads):
    u, s, v = node.ctx
    du = out_grads[0].astype(np.float64) if out_grads[0] is not None else np.zeros((3, 3))
    ds = out_grads[1].astype(np.float64) if out_grads[1] is not None else np.zeros(3)
    dv = out_grads[2].astype(np.float64) if out_grads[2] is not None else np.zeros((3, 3))

    s2 = s * s
    denom = s2[None, :] - s2[:, None]          # denom[i, j] = s_j^2 - s_i^2
    sign = np.where(denom >= 0, 1.0, -1.0)
    clipped = sign * np.maximum(np.abs(denom), _DENOM_FLOOR)
    n_clamped = int(np.sum((np.abs(denom) < _DENOM_FLOOR) & ~np.eye(3, dtype=bool)))
    if n_clamped:
        diag.bump("svd_denominator_clamp", n_clamped)
    f = 1.0 / clipped
    np.fill_diagonal(f, 0.0)

    smat = np.diag(s)
    utdu = u.T @ du
    vtdv = v.T @ dv
    j_u = f * (utdu - utdu.T)
    j_v = f * (vtdv - vtdv.T)
    inner = j_u @ smat + smat @ j_v + np.diag(ds)
    grad = u @ inner @ v.T
    return [grad.astype(m.dtype)]


def reconstruct(u: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u @ np.diag(s) @ v.T
