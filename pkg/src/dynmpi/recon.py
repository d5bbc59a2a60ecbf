"""Image reconstruction: Kaczmarz baseline, joint OF/MC SPDHG and the alternating driver."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import FlowField, Grid3, ImageSequence
from .motion import (
    MotionProblem,
    conservative_divergence,
    estimate_motion,
    flow_regularizer_value,
    warp_matrix,
)
from .optim import prox as P
from .optim.difference import central_axis, div_backward, grad_forward
from .optim.linop import LinOp, check_adjoint
from .optim.solvers import DualBlock, PdhgParams, spdhg

DATA_TERMS = ("l1", "l2")


@dataclass(frozen=True)
class ReconProblem:
    data_term: str = "l1"
    alpha1: float = 0.6
    alpha2: float = 0.1
    gamma: float = 100.0
    motion_model: str = "optical_flow"
    batches: int = 3
    iters: int = 2000
    alternations: int = 3
    nonnegative: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.data_term not in DATA_TERMS:
            raise ValueError(f"unknown data term {self.data_term!r}")
        if self.alpha1 < 0 or self.alpha2 < 0 or self.gamma < 0:
            raise ValueError("alpha1, alpha2 and gamma must be >= 0")
        if self.motion_model not in ("optical_flow", "mass_conservation"):
            raise ValueError(f"unknown motion model {self.motion_model!r}")
        if self.batches < 1 or self.iters < 1 or self.alternations < 1:
            raise ValueError("batches, iters and alternations must be >= 1")


# ---- Kaczmarz -------------------------------------------------------------


def kaczmarz_reconstruct(rows, u, lam: float, sweeps: int = 10, positivity: bool = True) -> np.ndarray:
    """Tikhonov-regularized row-action iteration, natural row order.

    Solves min |S c - u|^2 + lam |c|^2 via the auxiliary residual z.  ``u`` may
    carry a leading frame axis; frames are processed together.
    """
    S = np.asarray(rows, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    U = u[None] if single else u
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    norms2 = np.einsum("ij,ij->i", S, S)
    if np.any(norms2 == 0.0):
        raise ValueError(f"zero-norm row {int(np.flatnonzero(norms2 == 0)[0])}; drop it in preprocessing")
    sl = np.sqrt(lam)
    c = np.zeros((U.shape[0], S.shape[1]))
    z = np.zeros_like(U)
    for _ in range(sweeps):
        for i in range(S.shape[0]):
            r = S[i]
            h = (U[:, i] - c @ r - sl * z[:, i]) / (norms2[i] + lam)
            c += h[:, None] * r
            z[:, i] += sl * h
        if positivity:
            np.maximum(c, 0.0, out=c)
    return c[0] if single else c


def kaczmarz_sequence(S, u, grid: Grid3, lam: float, sweeps: int = 10, positivity: bool = True) -> ImageSequence:
    rows = S.rows if hasattr(S, "rows") else S
    data = u.data if hasattr(u, "data") else u
    c = kaczmarz_reconstruct(rows, data, lam, sweeps, positivity)
    return ImageSequence(grid, c.reshape((-1,) + grid.dims))


# ---- sequence operators ------------------------------------------------------


def data_operator(A: np.ndarray, n_frames: int) -> LinOp:
    """Frame-wise system matrix on the flattened sequence (F * n) -> (F * rows)."""
    n = A.shape[1]

    def fwd(x):
        return (x.reshape(n_frames, n) @ A.T).ravel()

    def adj(y):
        return (y.reshape(n_frames, -1) @ A).ravel()

    return LinOp(fwd, adj, n_frames * n, n_frames * A.shape[0], "A")


def gradient_operator(dims, n_frames: int) -> LinOp:
    n = int(np.prod(dims))

    def fwd(x):
        return grad_forward(x.reshape((n_frames,) + dims)).ravel()

    def adj(y):
        return -div_backward(y.reshape((n_frames, 3) + dims)).ravel()

    return LinOp(fwd, adj, n_frames * n, 3 * n_frames * n, "grad")


def of_coupling_operator(v: FlowField) -> LinOp:
    """(Wc)_t = -c_t + W_{v_t} c_{t+1} for t = 0 .. F-2."""
    dims = v.grid.dims
    n = v.grid.n_voxels
    F = v.n_steps + 1
    Ws = [warp_matrix(v.data[t]) for t in range(v.n_steps)]
    WTs = [W.T.tocsr() for W in Ws]

    def fwd(x):
        c = x.reshape(F, n)
        return np.concatenate([Ws[t] @ c[t + 1] - c[t] for t in range(F - 1)])

    def adj(y):
        y = y.reshape(F - 1, n)
        out = np.zeros((F, n))
        for t in range(F - 1):
            out[t] -= y[t]
            out[t + 1] += WTs[t] @ y[t]
        return out.ravel()

    return LinOp(fwd, adj, F * n, (F - 1) * n, "W")


def mc_coupling_operator(v: FlowField) -> LinOp:
    """c_{t+1} - c_t + div(v_t c_t), the discrete continuity residual.

    The adjoint is the exact transpose of this discretization (central
    differences are skew, so it reads -(dt + v . D) in the continuum).
    """
    dims = v.grid.dims
    n = v.grid.n_voxels
    F = v.n_steps + 1
    vd = v.data

    def fwd(x):
        c = x.reshape((F,) + dims)
        return np.concatenate([(c[t + 1] - c[t] + conservative_divergence(c[t], vd[t])).ravel() for t in range(F - 1)])

    def adj(y):
        y = y.reshape((F - 1,) + dims)
        out = np.zeros((F,) + dims)
        for t in range(F - 1):
            out[t + 1] += y[t]
            out[t] -= y[t]
            for a in range(3):
                out[t] -= vd[t, a] * central_axis(y[t], a)
        return out.ravel()

    return LinOp(fwd, adj, F * n, (F - 1) * n, "MC")


def coupling_operator(v: FlowField, model: str) -> LinOp:
    return of_coupling_operator(v) if model == "optical_flow" else mc_coupling_operator(v)


def batch_rows(n_rows: int, batches: int, channels=None) -> list[np.ndarray]:
    """Row batches: one per receive channel when the counts agree, else contiguous chunks."""
    if channels is not None:
        ch = np.asarray(channels)
        uniq = np.unique(ch)
        if len(uniq) == batches:
            return [np.flatnonzero(ch == c) for c in uniq]
    return [b for b in np.array_split(np.arange(n_rows), batches) if b.size]


# ---- joint reconstruction --------------------------------------------------


@dataclass
class ReconResult:
    sequence: ImageSequence
    objective: float
    trace: list = field(default_factory=list)


def _as_rows(S):
    rows = S.rows if hasattr(S, "rows") else np.asarray(S, dtype=np.float64)
    channels = S.row_meta["channel"] if hasattr(S, "row_meta") else None
    return rows, channels


def recon_objective(rows, u, c: np.ndarray, problem: ReconProblem, v: FlowField | None, coupling: LinOp | None = None) -> float:
    """sum_t D(A c_t, u_t) + alpha1 |c|_1 + alpha2 TV(c) + gamma |T(c, v)|_1."""
    F = u.shape[0]
    r = c.reshape(F, -1) @ rows.T - u
    D = np.abs(r).sum() if problem.data_term == "l1" else 0.5 * np.sum(r * r)
    g = grad_forward(c)
    tv = np.sqrt(np.sum(g * g, axis=1)).sum()
    val = D + problem.alpha1 * np.abs(c).sum() + problem.alpha2 * tv
    if problem.gamma > 0 and v is not None and F > 1:
        C = coupling or coupling_operator(v, problem.motion_model)
        val += problem.gamma * np.abs(C.apply(c.ravel())).sum()
    return float(val)


def reconstruct_joint(
    S,
    u,
    grid: Grid3,
    v: FlowField | None,
    problem: ReconProblem,
    x0: np.ndarray | None = None,
    params: PdhgParams | None = None,
    check: bool = True,
) -> ReconResult:
    """Whole-sequence SPDHG with dual blocks {data batches, gradient, coupling}."""
    rows, channels = _as_rows(S)
    U = np.asarray(u.data if hasattr(u, "data") else u, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != rows.shape[0]:
        raise ValueError(f"data shape {U.shape} does not match {rows.shape[0]} matrix rows")
    if rows.shape[1] != grid.n_voxels:
        raise ValueError("system matrix columns do not match the reconstruction grid")
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(rows))):
        raise ValueError("non-finite data or system matrix")
    F = U.shape[0]
    n = grid.n_voxels
    if v is not None and v.n_steps != F - 1:
        raise ValueError(f"flow has {v.n_steps} steps; expected {F - 1}")
    dual = P.l1_data_dual if problem.data_term == "l1" else P.l2_data_dual

    data_group = []
    for idx in batch_rows(rows.shape[0], problem.batches, channels):
        op = data_operator(rows[idx], F)
        data_group.append(DualBlock(op, dual(U[:, idx].ravel()), f"data{len(data_group)}"))
    groups = [data_group]
    if problem.alpha2 > 0:
        G = gradient_operator(grid.dims, F)
        groups.append([DualBlock(G, P.linf_ball_dual(problem.alpha2, "per_voxel_vector", 3, n), "grad")])
    coupled = problem.gamma > 0 and v is not None and F > 1
    if coupled:
        C = coupling_operator(v, problem.motion_model)
        if check:
            check_adjoint(C)
        groups.append([DualBlock(C, P.linf_ball_dual(problem.gamma), "coupling")])
    if check:
        for g in groups:
            for b in g:
                check_adjoint(b.op)
    params = params or PdhgParams(max_iters=problem.iters, seed=problem.seed)
    f = P.l1(problem.alpha1, problem.nonnegative)
    vv = v if coupled else None
    Cv = C if coupled else None

    def objective(x):
        return recon_objective(rows, U, x.reshape((F,) + grid.dims), problem, vv, Cv)

    x, _, diag = spdhg(groups, f, params, x0=None if x0 is None else np.ravel(x0), objective=objective)
    c = x.reshape((F,) + grid.dims)
    return ReconResult(ImageSequence(grid, c), objective(x), diag.trace)


def reconstruct_joint_of(S, u, grid, v, problem: ReconProblem, **kw) -> ReconResult:
    return reconstruct_joint(S, u, grid, v, replace(problem, motion_model="optical_flow"), **kw)


def reconstruct_joint_mc(S, u, grid, v, problem: ReconProblem, **kw) -> ReconResult:
    return reconstruct_joint(S, u, grid, v, replace(problem, motion_model="mass_conservation"), **kw)


def reconstruct_framewise(S, u, grid, problem: ReconProblem, **kw) -> ReconResult:
    """Fused-lasso SPDHG with the coupling switched off (frames decouple)."""
    return reconstruct_joint(S, u, grid, None, replace(problem, gamma=0.0), **kw)


# ---- alternating minimization ---------------------------------------------


def joint_objective(rows, u, c: ImageSequence, v: FlowField, problem: ReconProblem, motion: MotionProblem) -> float:
    """Full objective: data + fused lasso + beta S(v) + gamma T(c, v)."""
    U = np.asarray(u.data if hasattr(u, "data") else u)
    val = recon_objective(rows, U, c.data, problem, v)
    return val + sum(flow_regularizer_value(v.data[k], motion) for k in range(v.n_steps))


@dataclass
class JointResult:
    sequence: ImageSequence
    flow: FlowField
    objectives: list
    accepted: list  # per alternation: (recon stage accepted, motion stage accepted)


def alternate_joint(
    u,
    S,
    grid: Grid3,
    problem: ReconProblem,
    motion_problem: MotionProblem,
    init: str = "zeros",
    motion_params: PdhgParams = PdhgParams(max_iters=200),
    n_workers: int | None = None,
) -> JointResult:
    """Alternate c- and v-updates; a stage result is kept only if it does not raise the objective.

    Both stages minimize the same objective over their own block, but the
    inner solvers are stopped early (and the optical-flow stage minimizes a
    linearized surrogate), so the safeguard makes the trace non-increasing.
    """
    if init not in ("zeros", "framewise_warmstart"):
        raise ValueError(f"unknown init {init!r}")
    rows, _ = _as_rows(S)
    U = np.asarray(u.data if hasattr(u, "data") else u, dtype=np.float64)
    F = U.shape[0]
    mp = motion_problem
    if problem.gamma > 0:
        mp = replace(mp, gamma=problem.gamma, model=problem.motion_model)
    else:
        mp = replace(mp, model=problem.motion_model)
    v = FlowField.zeros(grid, F - 1)
    if init == "framewise_warmstart":
        # a motion estimate from the frame-wise images seeds the first coupled
        # reconstruction; with v = 0 a large gamma would freeze the sequence
        c = reconstruct_framewise(S, U, grid, problem).sequence
        obj = joint_objective(rows, U, c, v, problem, mp)
        v_new = estimate_motion(c, mp, motion_params, n_workers=n_workers)
        o = joint_objective(rows, U, c, v_new, problem, mp)
        if o <= obj:
            v = v_new
    else:
        c = ImageSequence(grid, np.zeros((F,) + grid.dims))
    obj = joint_objective(rows, U, c, v, problem, mp)
    objectives, accepted = [obj], []
    for _ in range(problem.alternations):
        c_new = reconstruct_joint(S, U, grid, v, problem, x0=c.data).sequence
        o = joint_objective(rows, U, c_new, v, problem, mp)
        ok_c = o <= obj
        if ok_c:
            c, obj = c_new, o
        v_new = estimate_motion(c, mp, motion_params, v_init=v, n_workers=n_workers)
        o = joint_objective(rows, U, c, v_new, problem, mp)
        ok_v = o <= obj
        if ok_v:
            v, obj = v_new, o
        objectives.append(obj)
        accepted.append((bool(ok_c), bool(ok_v)))
    return JointResult(c, v, objectives, accepted)
