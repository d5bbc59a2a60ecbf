"""Equilibrium (Langevin) particle magnetization and its field Jacobian."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MU0 = 4e-7 * math.pi
K_BOLTZMANN = 1.380649e-23

# |beta*z| below which L, L' and L/r switch to 3-term Taylor series; the
# direct coth form loses ~eps/x^2 relative accuracy to cancellation
SERIES_THRESHOLD = 1e-2
# the anisotropic ratio L'/r^2 - L/r^3 cancels to O(eps/x^4); 4-term series
ANISO_SERIES_THRESHOLD = 5e-2


@dataclass(frozen=True)
class ParticleModel:
    """Langevin particle parameters.

    Fields are expressed in T/mu0 throughout the package, so ``beta`` has units
    1/(T/mu0) and ``beta * |H|`` is the dimensionless Langevin argument.
    """

    beta: float
    m0: float
    mu0: float = MU0

    def __post_init__(self):
        if not self.beta > 0 or not self.m0 > 0:
            raise ValueError("ParticleModel needs beta > 0 and m0 > 0")

    @classmethod
    def from_physical(
        cls,
        core_diameter: float = 2e-8,
        saturation: float = 0.6,
        temperature: float = 293.0,
        beta: float | None = None,
    ) -> "ParticleModel":
        """Particle model from core diameter [m] and saturation magnetization [T/mu0].

        m0 = M_sat * pi/6 * d^3 with M_sat converted to A/m.  With the field
        given numerically in T/mu0 the Langevin argument mu0*m0*H/(kB*T) becomes
        m0*h/(kB*T), hence beta = m0/(kB*T) per T/mu0.
        """
        m0 = saturation / MU0 * math.pi / 6.0 * core_diameter**3
        if beta is None:
            beta = m0 / (K_BOLTZMANN * temperature)
        return cls(beta=float(beta), m0=float(m0))


def langevin(z, beta: float):
    """Dilated Langevin function coth(beta z) - 1/(beta z), 0 at z = 0."""
    x = beta * np.asarray(z, dtype=np.float64)
    small = np.abs(x) < SERIES_THRESHOLD
    xs = np.where(small, 1.0, x)
    direct = 1.0 / np.tanh(xs) - 1.0 / xs
    series = x / 3.0 - x**3 / 45.0 + 2.0 * x**5 / 945.0
    out = np.where(small, series, direct)
    return out[()] if out.ndim == 0 else out


def langevin_derivative(z, beta: float):
    """d/dz of the dilated Langevin function; beta/3 at z = 0."""
    x = beta * np.asarray(z, dtype=np.float64)
    small = np.abs(x) < SERIES_THRESHOLD
    xs = np.where(small, 1.0, x)
    # csch^2 underflows cleanly to 0 for large |x|
    with np.errstate(over="ignore"):
        csch2 = 1.0 / np.sinh(xs) ** 2
    direct = 1.0 / xs**2 - csch2
    series = 1.0 / 3.0 - x**2 / 15.0 + 2.0 * x**4 / 189.0
    out = beta * np.where(small, series, direct)
    return out[()] if out.ndim == 0 else out


def _langevin_ratios(r, beta):
    """Return (L(r)/r, L'(r)/r^2 - L(r)/r^3) with the r -> 0 limits handled."""
    r = np.asarray(r, dtype=np.float64)
    x = beta * r
    x2 = x * x
    small = np.abs(x) < SERIES_THRESHOLD
    tiny = np.abs(x) < ANISO_SERIES_THRESHOLD
    r_iso = np.where(small, 1.0, r)
    iso_series = beta * (1.0 / 3.0 - x2 / 45.0 + 2.0 * x2**2 / 945.0)
    iso = np.where(small, iso_series, langevin(r_iso, beta) / r_iso)
    r_an = np.where(tiny, 1.0, r)
    L = langevin(r_an, beta)
    dL = langevin_derivative(r_an, beta)
    aniso_series = beta**3 * (
        -2.0 / 45.0 + 8.0 * x2 / 945.0 - 6.0 * x2**2 / 4725.0 + 16.0 * x2**3 / 93555.0
    )
    aniso = np.where(tiny, aniso_series, dL / r_an**2 - L / r_an**3)
    return iso, aniso


def ftilde(xi, particle: ParticleModel) -> np.ndarray:
    """Field Jacobian of L(|H|) H/|H|, a symmetric positive definite 3x3 matrix."""
    xi = np.asarray(xi, dtype=np.float64)
    r = float(np.linalg.norm(xi))
    if r == 0.0:
        raise ValueError("ftilde is defined for nonzero xi only")
    iso, aniso = _langevin_ratios(r, particle.beta)
    return float(aniso) * np.outer(xi, xi) + float(iso) * np.eye(3)


def ftilde_apply(H: np.ndarray, Hdot: np.ndarray, beta: float) -> np.ndarray:
    """Vectorized F~(H) @ Hdot for stacks of vectors with shape (..., 3).

    H = 0 uses the limit F~ -> (beta/3) I.
    """
    r = np.sqrt(np.einsum("...i,...i->...", H, H))
    iso, aniso = _langevin_ratios(r, beta)
    proj = np.einsum("...i,...i->...", H, Hdot)
    return aniso[..., None] * proj[..., None] * H + iso[..., None] * Hdot


def mean_moment(H, particle: ParticleModel) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    r = np.linalg.norm(H, axis=-1, keepdims=True)
    iso, _ = _langevin_ratios(r, particle.beta)
    # m0 L(r)/r * H, continuous through H = 0
    return particle.m0 * iso * H
