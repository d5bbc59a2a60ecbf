"""Finite-difference operators on the last three (spatial) axes.

Vector fields carry their component axis just before the spatial axes, so a
volume of shape (..., nx, ny, nz) has gradient shape (..., 3, nx, ny, nz).
Singleton axes produce zero derivative components.
"""

from __future__ import annotations

import numpy as np


def _fwd_axis(u: np.ndarray, axis: int) -> np.ndarray:
    d = np.zeros_like(u)
    n = u.shape[axis]
    if n > 1:
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        hi[axis], lo[axis] = slice(1, n), slice(0, n - 1)
        d[tuple(lo)] = u[tuple(hi)] - u[tuple(lo)]
    return d


def _fwd_axis_adjoint(p: np.ndarray, axis: int) -> np.ndarray:
    # transpose of the forward difference with a zero last row
    n = p.shape[axis]
    out = np.zeros_like(p)
    if n > 1:
        inner = [slice(None)] * p.ndim
        inner[axis] = slice(0, n - 1)
        q = p[tuple(inner)]
        a = [slice(None)] * p.ndim
        b = [slice(None)] * p.ndim
        a[axis], b[axis] = slice(1, n), slice(0, n - 1)
        out[tuple(a)] += q
        out[tuple(b)] -= q
    return out


def grad_forward(u) -> np.ndarray:
    """Forward differences with Neumann boundary (last-slice difference 0)."""
    u = np.asarray(u, dtype=np.float64)
    return np.stack([_fwd_axis(u, u.ndim - 3 + a) for a in range(3)], axis=-4)


def div_backward(p) -> np.ndarray:
    """Backward-difference divergence, exactly -(grad_forward)^T."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-4] + p.shape[-3:])
    for a in range(3):
        out -= _fwd_axis_adjoint(p[..., a, :, :, :], p.ndim - 4 + a)
    return out


def central_axis(u: np.ndarray, axis: int) -> np.ndarray:
    """(u[i+1] - u[i-1]) / 2 with zero padding outside the grid."""
    n = u.shape[axis]
    d = np.zeros_like(u)
    if n == 1:
        return d
    up = np.take(u, np.arange(1, n), axis=axis)
    dn = np.take(u, np.arange(0, n - 1), axis=axis)
    left = [slice(None)] * u.ndim
    right = [slice(None)] * u.ndim
    left[axis], right[axis] = slice(0, n - 1), slice(1, n)
    d[tuple(left)] += 0.5 * up
    d[tuple(right)] -= 0.5 * dn
    return d


def grad_central(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.stack([central_axis(u, u.ndim - 3 + a) for a in range(3)], axis=-4)


def grad_central_adjoint(p) -> np.ndarray:
    """Transpose of grad_central; the zero-padded stencil is skew, so D^T = -D."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-4] + p.shape[-3:])
    for a in range(3):
        out -= central_axis(p[..., a, :, :, :], p.ndim - 4 + a)
    return out


def div_central(v) -> np.ndarray:
    """Central-difference divergence sum_a D_a v_a."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-4] + v.shape[-3:])
    for a in range(3):
        out += central_axis(v[..., a, :, :, :], v.ndim - 4 + a)
    return out


def dt_forward(seq) -> np.ndarray:
    """Frame k of the result is c[k+1] - c[k]; N frames give N-1 differences."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] < 2:
        raise ValueError("dt_forward needs at least 2 frames")
    return seq[1:] - seq[:-1]


def dt_forward_adjoint(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    out = np.zeros((d.shape[0] + 1,) + d.shape[1:])
    out[1:] += d
    out[:-1] -= d
    return out
