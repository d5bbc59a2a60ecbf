"""PDHG and stochastic PDHG for min_x f(x) + sum_j g_j(B_j x)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linop import NORM_SAFETY, LinOp
from .prox import ProxFn

VARIANTS = ("primal_extrapolation", "dual_extrapolation")


class NumericalFailure(FloatingPointError):
    def __init__(self, iteration: int, what: str = "iterate"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PdhgParams:
    """Step sizes default to rho / (1.05 ||B||) for sigma and tau.

    For SPDHG ``sigma`` may be a per-block sequence; ``variant`` selects where
    the extrapolation happens (dual: the selected block's dual change is
    scaled by 1/p_j before entering the primal step; primal: plain primal
    over-relaxation).  Only the dual form is guaranteed to converge with
    several blocks and nonsmooth dual terms, so it is the default.
    """

    sigma: float | Sequence[float] | None = None
    tau: float | None = None
    theta: float = 1.0
    max_iters: int = 500
    seed: int = 0
    batch_count: int = 1
    rho: float = 0.95
    objective_every: int = 10
    variant: str = "dual_extrapolation"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.max_iters < 1 or self.batch_count < 1:
            raise ValueError("max_iters and batch_count must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SPDHG variant {self.variant!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")


@dataclass
class Diagnostics:
    iterations: int = 0
    trace: list = field(default_factory=list)  # (iteration, objective, |dx|)
    sigma: object = None
    tau: float = 0.0

    @property
    def objectives(self) -> np.ndarray:
        return np.array([t[1] for t in self.trace])

    def table(self) -> str:
        lines = ["iteration objective step_norm"]
        lines += [f"{k} {obj:.12e} {dx:.6e}" for k, obj, dx in self.trace]
        return "\n".join(lines) + "\n"


def _check_finite(x, k, what="iterate"):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(k, what)


def pdhg(
    B: LinOp,
    prox_f: ProxFn,
    prox_gstar: ProxFn,
    params: PdhgParams = PdhgParams(),
    x0=None,
    y0=None,
    objective: Callable[[np.ndarray], float] | None = None,
):
    """Primal-dual hybrid gradient; returns (x_K, y_K, diagnostics)."""
    x = np.zeros(B.in_dim) if x0 is None else np.array(x0, dtype=np.float64)
    y = np.zeros(B.out_dim) if y0 is None else np.array(y0, dtype=np.float64)
    sigma, tau = params.sigma, params.tau
    normB = B.norm()
    if sigma is None or tau is None:
        L = NORM_SAFETY * normB
        step = params.rho / L if L > 0 else 1.0
        sigma = step if sigma is None else sigma
        tau = step if tau is None else tau
    if sigma * tau * (NORM_SAFETY * normB) ** 2 > 1.0 + 1e-12:
        raise ValueError("step sizes violate sigma * tau * ||B||^2 <= 1")
    diag = Diagnostics(sigma=sigma, tau=tau)
    x_tilde = x.copy()
    for k in range(params.max_iters):
        y = prox_gstar(y + sigma * B.apply(x_tilde), sigma)
        x_new = prox_f(x - tau * B.apply_adjoint(y), tau)
        _check_finite(x_new, k)
        _check_finite(y, k, "dual iterate")
        x_tilde = x_new + params.theta * (x_new - x)
        dx = float(np.linalg.norm(x_new - x))
        x = x_new
        if objective is not None and ((k + 1) % params.objective_every == 0 or k + 1 == params.max_iters):
            diag.trace.append((k + 1, float(objective(x)), dx))
    diag.iterations = params.max_iters
    return x, y, diag


@dataclass
class DualBlock:
    op: LinOp
    prox: ProxFn
    name: str = ""


def spdhg_steps(blocks, probs, params: PdhgParams):
    """Per-block sigma_j = rho / ||B_j|| and tau = rho * min_j p_j / ||B_j||."""
    norms = np.array([NORM_SAFETY * b.op.norm() for b in blocks])
    norms = np.where(norms > 0, norms, 1.0)
    if params.sigma is None:
        sigma = params.rho / norms
    else:
        sigma = np.broadcast_to(np.asarray(params.sigma, dtype=np.float64), norms.shape).copy()
    tau = params.tau if params.tau is not None else params.rho * float(np.min(probs / norms))
    if np.any(tau * sigma * norms**2 > probs * (1.0 + 1e-12)):
        raise ValueError("step sizes violate tau * sigma_j * ||B_j||^2 <= p_j")
    return sigma, tau


def spdhg(
    groups: Sequence[Sequence[DualBlock]],
    prox_f: ProxFn,
    params: PdhgParams = PdhgParams(),
    x0=None,
    objective: Callable[[np.ndarray], float] | None = None,
):
    """Stochastic PDHG with a uniform two-stage block draw.

    Each iteration draws a group uniformly, then one block uniformly within the
    group (the data group holds the M row batches).  Only that block's dual
    variable is updated and the running sum z = sum_j B_j^T y_j is patched
    incrementally.  Returns (x_K, duals, diagnostics).
    """
    blocks = [b for g in groups for b in g]
    n_in = blocks[0].op.in_dim
    probs = np.concatenate([np.full(len(g), 1.0 / (len(groups) * len(g))) for g in groups])
    offsets = np.cumsum([0] + [len(g) for g in groups])
    sigma, tau = spdhg_steps(blocks, probs, params)
    rng = np.random.Generator(np.random.Philox(params.seed))
    x = np.zeros(n_in) if x0 is None else np.array(x0, dtype=np.float64)
    y = [np.zeros(b.op.out_dim) for b in blocks]
    z = np.zeros(n_in)
    diag = Diagnostics(sigma=sigma, tau=tau)
    primal = params.variant == "primal_extrapolation"
    x_tilde = x.copy()
    z_bar = z.copy()
    for k in range(params.max_iters):
        if primal:
            j = _draw(rng, groups, offsets)
            b = blocks[j]
            y_new = b.prox(y[j] + sigma[j] * b.op.apply(x_tilde), sigma[j])
            z += b.op.apply_adjoint(y_new - y[j])
            y[j] = y_new
            x_new = prox_f(x - tau * z, tau)
            _check_finite(x_new, k)
            x_tilde = x_new + params.theta * (x_new - x)
        else:
            x_new = prox_f(x - tau * z_bar, tau)
            _check_finite(x_new, k)
            j = _draw(rng, groups, offsets)
            b = blocks[j]
            y_new = b.prox(y[j] + sigma[j] * b.op.apply(x_new), sigma[j])
            dz = b.op.apply_adjoint(y_new - y[j])
            y[j] = y_new
            z += dz
            z_bar = z + dz / probs[j]
        dx = float(np.linalg.norm(x_new - x))
        x = x_new
        if objective is not None and ((k + 1) % params.objective_every == 0 or k + 1 == params.max_iters):
            diag.trace.append((k + 1, float(objective(x)), dx))
    diag.iterations = params.max_iters
    return x, y, diag


def _draw(rng, groups, offsets) -> int:
    g = int(rng.integers(len(groups)))
    return int(offsets[g] + rng.integers(len(groups[g])))
