"""Proximal operators used by the primal-dual solvers.

Each ``ProxFn`` wraps ``evaluate(x, step)`` = argmin_u step*h(u) + 1/2 |u - x|^2
for some convex h, plus a descriptor.  Dual proxes (of conjugates g*) follow
the same convention with the dual step sigma.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ProxFn:
    evaluate: Callable[[np.ndarray, float], np.ndarray]
    name: str
    params: dict = field(default_factory=dict)

    def __call__(self, x, step):
        return self.evaluate(x, step)


def prox_l1(x, t):
    """Soft threshold sign(x) max(|x| - t, 0)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def project_linf_ball(y, radius, grouping: str = "scalar", n_components: int = 3, n_voxels: int | None = None, axis: int = -1):
    """Project onto {|y_i| <= r} (scalar) or {|y_voxel|_2 <= r} (per-voxel vectors).

    Per-voxel grouping on a flat vector needs ``n_voxels``: the layout is
    component-major blocks (..., n_components, n_voxels) as produced by the
    gradient.  A flat vector without ``n_voxels`` is one voxel's vector; other
    arrays group along ``axis``.
    """
    y = np.asarray(y, dtype=np.float64)
    if grouping == "scalar":
        return np.clip(y, -radius, radius)
    if grouping != "per_voxel_vector":
        raise ValueError(f"unknown grouping {grouping!r}")
    if n_voxels is not None:
        v = y.reshape(-1, n_components, n_voxels)
        norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
        return (v / np.maximum(1.0, norms / radius)).reshape(y.shape)
    if y.ndim == 1:
        return y / max(1.0, float(np.linalg.norm(y)) / radius)
    norms = np.sqrt(np.sum(y * y, axis=axis, keepdims=True))
    return y / np.maximum(1.0, norms / radius)


def prox_l2_squared_dual(y, sigma, beta):
    """Prox of sigma * |y|^2 / (2 beta), the conjugate of (beta/2)|.|^2."""
    return np.asarray(y, dtype=np.float64) / (1.0 + sigma / beta)


def prox_translated_linf_indicator(y, sigma, gamma, b):
    """Prox of sigma*(indicator{|y|_inf <= gamma} - <b, y>): clamp(y + sigma b)."""
    return np.clip(np.asarray(y, dtype=np.float64) + sigma * np.asarray(b), -gamma, gamma)


def prox_affine_l1(v, t, a, b):
    """Per-voxel prox of t*|a + <b, v>| for vector fields v, b of shape (3, n).

    Closed-form thresholding along b: the residual is pushed toward zero by at
    most t |b|^2, or exactly to zero when it is smaller.
    """
    v = np.asarray(v, dtype=np.float64)
    rho = a + np.einsum("i...,i...->...", b, v)
    bb = np.einsum("i...,i...->...", b, b)
    tb = t * bb
    step = np.where(rho < -tb, t, np.where(rho > tb, -t, -rho / np.where(bb > 0, bb, 1.0)))
    step = np.where(bb > 0, step, 0.0)
    return v + step * b


# ---- ProxFn constructors -------------------------------------------------


def zero_fn() -> ProxFn:
    return ProxFn(lambda x, t: np.asarray(x, dtype=np.float64).copy(), "zero")


def zero_indicator() -> ProxFn:
    """Indicator of {0}; its prox maps everything to 0."""
    return ProxFn(lambda x, t: np.zeros_like(np.asarray(x, dtype=np.float64)), "indicator_zero")


def l1(weight: float, nonnegative: bool = False) -> ProxFn:
    if nonnegative:
        return ProxFn(lambda x, t: np.maximum(np.asarray(x) - weight * t, 0.0), "l1_nonneg", {"weight": weight})
    return ProxFn(lambda x, t: prox_l1(x, weight * t), "l1", {"weight": weight})


def l2_squared(weight: float, center=None) -> ProxFn:
    """Prox of weight * |x - center|^2."""
    c = 0.0 if center is None else np.asarray(center, dtype=np.float64)
    return ProxFn(lambda x, t: (np.asarray(x) + 2.0 * weight * t * c) / (1.0 + 2.0 * weight * t), "l2_squared", {"weight": weight})


def linf_ball_dual(radius: float, grouping: str = "scalar", n_components: int = 3, n_voxels: int | None = None) -> ProxFn:
    """Dual prox of radius*|.|_1 (scalar) or radius*sum |.|_2 (per-voxel)."""
    return ProxFn(
        lambda y, s: project_linf_ball(y, radius, grouping, n_components, n_voxels),
        "linf_ball",
        {"radius": radius, "grouping": grouping},
    )


def l1_data_dual(u) -> ProxFn:
    """Conjugate of |z - u|_1: indicator{|y|_inf <= 1} + <y, u>."""
    u = np.asarray(u, dtype=np.float64)
    return ProxFn(lambda y, s: prox_translated_linf_indicator(y, s, 1.0, -u), "l1_data_dual")


def l2_data_dual(u) -> ProxFn:
    """Conjugate of 1/2 |z - u|^2: 1/2 |y|^2 + <y, u>."""
    u = np.asarray(u, dtype=np.float64)
    return ProxFn(lambda y, s: (np.asarray(y) - s * u) / (1.0 + s), "l2_data_dual")


def l2_squared_dual(beta: float) -> ProxFn:
    return ProxFn(lambda y, s: prox_l2_squared_dual(y, s, beta), "l2_squared_dual", {"beta": beta})


def translated_linf_dual(gamma: float, b) -> ProxFn:
    b = np.asarray(b, dtype=np.float64)
    return ProxFn(lambda y, s: prox_translated_linf_indicator(y, s, gamma, b), "translated_linf", {"gamma": gamma})


def conjugate_via_moreau(prox: ProxFn) -> ProxFn:
    """prox_{s h*}(y) = y - s prox_{h/s}(y/s) (Moreau decomposition)."""
    return ProxFn(lambda y, s: np.asarray(y) - s * prox.evaluate(np.asarray(y) / s, 1.0 / s), f"{prox.name}*")
