"""Motion estimation between consecutive frames: optical flow and mass conservation.

Flow v_k maps frame k to frame k+1 as a forward displacement in voxels: the
material at x in frame k sits at x + v_k(x) in frame k+1, so reverse warping
of frame k+1 by v_k reproduces frame k.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import sparse

from .core import FlowField, ImageSequence, resample_trilinear
from .optim import prox as P
from .optim.difference import central_axis, div_backward, dt_forward, grad_central, grad_forward
from .optim.linop import LinOp, check_adjoint, identity, vstack
from .optim.solvers import PdhgParams, pdhg

MODELS = ("optical_flow", "mass_conservation")
REGULARIZERS = ("tv_l1", "grad_l2", "l2_tikhonov")


@dataclass(frozen=True)
class MotionProblem:
    model: str = "optical_flow"
    flow_regularizer: str = "tv_l1"
    beta: float = 0.1
    gamma: float = 1.0
    pyramid_levels: int | None = None  # None: floor(log2(min_dim / 8)) + 1
    scale_factor: float = 0.5
    warps: int = 2

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown motion model {self.model!r}")
        if self.flow_regularizer not in REGULARIZERS:
            raise ValueError(f"unknown flow regularizer {self.flow_regularizer!r}")
        if not (self.beta > 0 and self.gamma > 0):
            raise ValueError("beta and gamma must be > 0")
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValueError("scale_factor must lie in (0, 1)")
        if self.warps < 1:
            raise ValueError("warps must be >= 1")


# ---- warping ----------------------------------------------------------------


def warp_matrix(flow: np.ndarray) -> sparse.csr_matrix:
    """Sparse trilinear sampling matrix of the reverse warp by ``flow`` (3, nx, ny, nz).

    Row x holds the interpolation weights of position x + flow(x), clamped to
    the grid box (boundary voxels extend outward).
    """
    flow = np.asarray(flow, dtype=np.float64)
    dims = flow.shape[1:]
    n = int(np.prod(dims))
    idx = np.indices(dims).reshape(3, -1).astype(np.float64)
    pos = idx + flow.reshape(3, -1)
    lo, w = [], []
    for a in range(3):
        p = np.clip(pos[a], 0.0, dims[a] - 1)
        i0 = np.minimum(np.floor(p), max(dims[a] - 2, 0)).astype(np.int64)
        lo.append(i0)
        w.append(p - i0)
    rows = np.arange(n)
    data, cols, rr = [], [], []
    for corner in range(8):
        bits = [(corner >> a) & 1 for a in range(3)]
        weight = np.ones(n)
        ii = []
        for a in range(3):
            weight = weight * (w[a] if bits[a] else 1.0 - w[a])
            ii.append(np.minimum(lo[a] + bits[a], dims[a] - 1))
        keep = weight != 0.0
        cols.append(np.ravel_multi_index(tuple(i[keep] for i in ii), dims))
        data.append(weight[keep])
        rr.append(rows[keep])
    return sparse.csr_matrix((np.concatenate(data), (np.concatenate(rr), np.concatenate(cols))), shape=(n, n))


def warp_reverse(image, flow) -> np.ndarray:
    """out(x) = image(x + flow(x)) by trilinear sampling with boundary clamping."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != np.shape(flow)[1:]:
        raise ValueError(f"image {image.shape} and flow {np.shape(flow)} do not match")
    return (warp_matrix(flow) @ image.ravel()).reshape(image.shape)


def warp_adjoint(image, flow) -> np.ndarray:
    """Exact transpose of warp_reverse (scatter of the interpolation weights)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != np.shape(flow)[1:]:
        raise ValueError(f"image {image.shape} and flow {np.shape(flow)} do not match")
    return (warp_matrix(flow).T @ image.ravel()).reshape(image.shape)


def sample_flow(flow: np.ndarray, point) -> np.ndarray:
    """Trilinear value of a (3, nx, ny, nz) field at a voxel-coordinate point."""
    dims = flow.shape[1:]
    p = np.asarray(point, dtype=np.float64)
    out = np.zeros(3)
    base, frac = [], []
    for a in range(3):
        q = min(max(p[a], 0.0), dims[a] - 1)
        i0 = int(min(math.floor(q), max(dims[a] - 2, 0)))
        base.append(i0)
        frac.append(q - i0)
    for corner in range(8):
        bits = [(corner >> a) & 1 for a in range(3)]
        wgt = 1.0
        ii = []
        for a in range(3):
            wgt *= frac[a] if bits[a] else 1.0 - frac[a]
            ii.append(min(base[a] + bits[a], dims[a] - 1))
        if wgt:
            out += wgt * flow[(slice(None),) + tuple(ii)]
    return out


# ---- pyramid ----------------------------------------------------------------


def default_levels(dims) -> int:
    active = [d for d in dims if d > 1]
    m = min(active) if active else 1
    return max(int(math.floor(math.log2(m / 8.0))) + 1, 1) if m >= 8 else 1


def _level_factors(dims, scale_factor: float, level: int):
    f = Fraction(scale_factor).limit_denominator(1000) ** level
    return tuple(f if d > 1 else Fraction(1) for d in dims)


def pyramid_dims(dims, levels: int, scale_factor: float):
    out = []
    for lev in range(levels):
        fac = _level_factors(dims, scale_factor, lev)
        d = []
        for n, f in zip(dims, fac):
            m = f * n
            if m.denominator != 1:
                raise ValueError(f"grid {dims} cannot be downsampled {levels} levels by {scale_factor}")
            d.append(int(m))
        if any(n > 1 and m < 4 for n, m in zip(dims, d)):
            raise ValueError(f"too many pyramid levels for grid {dims}: coarsest would be {tuple(d)}")
        out.append(tuple(d))
    return out


def build_pyramid(c: ImageSequence, levels: int, scale_factor: float = 0.5) -> list[ImageSequence]:
    """Level 0 is the input; level l is block-averaged by scale_factor**l on imaged axes."""
    dims_list = pyramid_dims(c.grid.dims, levels, scale_factor)
    out = [c]
    for dims in dims_list[1:]:
        fac = tuple(Fraction(m, n) for m, n in zip(dims, c.grid.dims))
        data = np.stack([resample_trilinear(f, fac, "down_average") for f in c.data])
        out.append(ImageSequence(c.grid.scaled(dims), data))
    return out


def prolong_flow(v: np.ndarray, dims) -> np.ndarray:
    """Upsample a (3, ...) flow to ``dims`` and rescale displacements per axis."""
    fac = tuple(Fraction(m, n) for m, n in zip(dims, v.shape[1:]))
    return np.stack([resample_trilinear(v[a], fac, "up_trilinear") * float(fac[a]) for a in range(3)])


def restrict_flow(v: np.ndarray, dims) -> np.ndarray:
    fac = tuple(Fraction(m, n) for m, n in zip(dims, v.shape[1:]))
    return np.stack([resample_trilinear(v[a], fac, "down_average") * float(fac[a]) for a in range(3)])


# ---- regularizer and residual operators -------------------------------------


def _reg_operator(dims, kind: str) -> LinOp:
    n = int(np.prod(dims))
    if kind == "l2_tikhonov":
        return identity(3 * n, "I_v")

    def fwd(x):
        return grad_forward(x.reshape((3,) + dims)).ravel()

    def adj(y):
        return -div_backward(y.reshape((3, 3) + dims)).ravel()

    return LinOp(fwd, adj, 3 * n, 9 * n, "grad_v")


def _reg_dual(problem: MotionProblem) -> P.ProxFn:
    if problem.flow_regularizer == "tv_l1":
        return P.linf_ball_dual(problem.beta)
    if problem.flow_regularizer == "grad_l2":
        return P.l2_squared_dual(problem.beta)
    # beta |v|^2 = (2 beta)/2 |v|^2
    return P.l2_squared_dual(2.0 * problem.beta)


def flow_regularizer_value(v: np.ndarray, problem: MotionProblem) -> float:
    """beta * S(v) for one (3, ...) flow step."""
    if problem.flow_regularizer == "l2_tikhonov":
        return problem.beta * float(np.sum(v * v))
    g = grad_forward(v)
    if problem.flow_regularizer == "tv_l1":
        return problem.beta * float(np.abs(g).sum())
    return 0.5 * problem.beta * float(np.sum(g * g))


def conservative_divergence(c: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sum_a D_a(c v_a) with the zero-padded central stencil."""
    return sum(central_axis(c * v[a], a) for a in range(3))


def transport_operator(c: np.ndarray) -> LinOp:
    """v -> div(c v) as a linear map of the flow (3, ...) for a fixed image c."""
    dims = c.shape
    n = c.size

    def fwd(x):
        return conservative_divergence(c, x.reshape((3,) + dims)).ravel()

    def adj(y):
        y = y.reshape(dims)
        return np.stack([-c * central_axis(y, a) for a in range(3)]).ravel()

    return LinOp(fwd, adj, 3 * n, n, "div_c")


def of_residual(c1, c2, v) -> np.ndarray:
    """Gray-value constancy residual c2(x + v) - c1 (the warped form)."""
    return warp_reverse(c2, v) - c1


def mc_residual(c1, c2, v) -> np.ndarray:
    return c2 - c1 + conservative_divergence(c1, v)


def linearized_of_residual(c1, c2, v) -> np.ndarray:
    return c2 - c1 + np.einsum("a...,a...->...", grad_central(c1), v)


def motion_objective(c: ImageSequence, v: FlowField, problem: MotionProblem) -> float:
    """sum_k beta S(v_k) + gamma |T_k|_1 with the model's residual."""
    total = 0.0
    for k in range(v.n_steps):
        c1, c2, vk = c.data[k], c.data[k + 1], v.data[k]
        r = of_residual(c1, c2, vk) if problem.model == "optical_flow" else mc_residual(c1, c2, vk)
        total += flow_regularizer_value(vk, problem) + problem.gamma * float(np.abs(r).sum())
    return total


# ---- per-step solvers ------------------------------------------------------


@dataclass
class MotionDiagnostics:
    levels: list = field(default_factory=list)  # per step: [(dims, obj_start, obj_end), ...]


def _of_step(c1, c2, v, problem: MotionProblem, params: PdhgParams):
    dims = c1.shape
    B = _reg_operator(dims, problem.flow_regularizer)
    gstar = _reg_dual(problem)
    y = None
    for _ in range(problem.warps):
        c2w = warp_reverse(c2, v)
        b = grad_central(c2w).reshape(3, -1)
        a = (c2w - c1).ravel() - np.einsum("an,an->n", b, v.reshape(3, -1))
        f = P.ProxFn(lambda x, t: P.prox_affine_l1(x.reshape(3, -1), t * problem.gamma, a, b).ravel(), "of_data")
        x, y, _ = pdhg(B, f, gstar, params, x0=v.ravel(), y0=y)
        v = x.reshape((3,) + dims)
    return v


def _mc_step(c1, c2, v, problem: MotionProblem, params: PdhgParams):
    dims = c1.shape
    R = _reg_operator(dims, problem.flow_regularizer)
    K = transport_operator(c1)
    nR, nK = R.norm(), K.norm()
    # rescale the transport rows so both blocks share one step size; the
    # conjugate is adjusted so the problem is unchanged
    s = nK / nR if nK > 0 and nR > 0 else 1.0
    Ks = LinOp(lambda x: K.apply(x) / s, lambda y: K.apply_adjoint(y) / s, K.in_dim, K.out_dim, "div_c/s")
    B = vstack([R, Ks], "mc_motion")
    dt = (c2 - c1).ravel()
    reg = _reg_dual(problem)
    nr = R.out_dim

    def gstar(y, sig):
        return np.concatenate([reg(y[:nr], sig), P.prox_translated_linf_indicator(y[nr:], sig, s * problem.gamma, dt / s)])

    x, _, _ = pdhg(B, P.zero_fn(), P.ProxFn(gstar, "mc_dual"), params, x0=v.ravel())
    return x.reshape((3,) + dims)


def _step_objective(c1, c2, v, problem):
    r = of_residual(c1, c2, v) if problem.model == "optical_flow" else mc_residual(c1, c2, v)
    return flow_regularizer_value(v, problem) + problem.gamma * float(np.abs(r).sum())


def _estimate_step(pyr_pairs, problem: MotionProblem, params: PdhgParams, v_init):
    """Coarse-to-fine solve for one time step; pyr_pairs is finest-first."""
    solver = _of_step if problem.model == "optical_flow" else _mc_step
    coarse_dims = pyr_pairs[-1][0].shape
    v = np.zeros((3,) + coarse_dims) if v_init is None else restrict_flow(v_init, coarse_dims)
    levels = []
    for lev in range(len(pyr_pairs) - 1, -1, -1):
        c1, c2 = pyr_pairs[lev]
        if v.shape[1:] != c1.shape:
            v = prolong_flow(v, c1.shape)
        start = _step_objective(c1, c2, v, problem)
        v_new = solver(c1, c2, v, problem, params)
        end = _step_objective(c1, c2, v_new, problem)
        levels.append((c1.shape, start, end))
        v = v_new
    return v, levels


def estimate_motion(
    c: ImageSequence,
    problem: MotionProblem,
    params: PdhgParams = PdhgParams(max_iters=200),
    v_init: FlowField | None = None,
    n_workers: int | None = None,
    return_diagnostics: bool = False,
):
    if c.n_frames < 2:
        raise ValueError("motion estimation needs at least 2 frames")
    if not np.all(np.isfinite(c.data)):
        raise ValueError("non-finite values in the image sequence")
    levels = problem.pyramid_levels or default_levels(c.grid.dims)
    pyr = build_pyramid(c, levels, problem.scale_factor)
    steps = c.n_frames - 1
    if v_init is not None:
        v_init.check_matches(c)

    def run(k):
        pairs = [(p.data[k], p.data[k + 1]) for p in pyr]
        init = None if v_init is None else v_init.data[k]
        return _estimate_step(pairs, problem, params, init)

    workers = n_workers or min(steps, os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, range(steps)))
    else:
        results = [run(k) for k in range(steps)]
    flow = np.stack([r[0] for r in results])
    for a in range(3):
        if c.grid.dims[a] == 1:
            flow[:, a] = 0.0
    out = FlowField(c.grid, flow)
    if return_diagnostics:
        return out, MotionDiagnostics([r[1] for r in results])
    return out


def estimate_motion_of(c: ImageSequence, problem: MotionProblem, params: PdhgParams = PdhgParams(max_iters=200), **kw):
    """TV-L1 optical flow per step with coarse-to-fine warping (flow increments per scale)."""
    if problem.model != "optical_flow":
        raise ValueError("estimate_motion_of needs an optical_flow problem")
    return estimate_motion(c, problem, params, **kw)


def estimate_motion_mc(c: ImageSequence, problem: MotionProblem, params: PdhgParams = PdhgParams(max_iters=200), **kw):
    """Mass-conservation flow per step; each level re-solves the full field from the prolongated start."""
    if problem.model != "mass_conservation":
        raise ValueError("estimate_motion_mc needs a mass_conservation problem")
    return estimate_motion(c, problem, params, **kw)


def check_motion_operators(dims, c=None, seed: int = 0):
    """Adjoint self-test of the regularizer and transport operators on ``dims``."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(dims) if c is None else c
    for kind in REGULARIZERS:
        check_adjoint(_reg_operator(tuple(dims), kind))
    check_adjoint(transport_operator(c))


def dt_residual_norm(c: ImageSequence) -> float:
    return float(np.abs(dt_forward(c.data)).sum())
