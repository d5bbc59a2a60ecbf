"""Flat-vector linear operators with adjoints and norm estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ADJOINT_TOL = 1e-8
NORM_SAFETY = 1.05


class AdjointMismatch(AssertionError):
    pass


@dataclass
class LinOp:
    """Linear map between flat float vectors of length ``in_dim`` -> ``out_dim``."""

    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Callable[[np.ndarray], np.ndarray]
    in_dim: int
    out_dim: int
    name: str = "linop"
    _norm: float | None = field(default=None, repr=False)

    def __call__(self, x):
        return self.apply(x)

    @property
    def T(self) -> "LinOp":
        return LinOp(self.apply_adjoint, self.apply, self.out_dim, self.in_dim, f"{self.name}^T")

    def norm(self, iters: int = 100, seed: int = 0) -> float:
        if self._norm is None:
            self._norm = estimate_operator_norm(self, iters, seed)
        return self._norm


def adjoint_error(op: LinOp, n_probes: int = 20, seed: int = 0) -> float:
    """Largest relative mismatch |<Ax,y> - <x,A^T y>| / (|Ax||y|) over random probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        x = rng.standard_normal(op.in_dim)
        y = rng.standard_normal(op.out_dim)
        Ax = op.apply(x)
        ATy = op.apply_adjoint(y)
        lhs, rhs = float(Ax @ y), float(x @ ATy)
        scale = max(np.linalg.norm(Ax) * np.linalg.norm(y), np.linalg.norm(x) * np.linalg.norm(ATy), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def check_adjoint(op: LinOp, tol: float = ADJOINT_TOL, n_probes: int = 5, seed: int = 0) -> LinOp:
    err = adjoint_error(op, n_probes, seed)
    if not err < tol:
        raise AdjointMismatch(f"adjoint test failed for {op.name}: relative error {err:.3e}")
    return op


def estimate_operator_norm(op: LinOp, iters: int = 100, seed: int = 0) -> float:
    """Power iteration on A^T A; returns the (unscaled) estimate of ||A||."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.random.default_rng(seed).standard_normal(op.in_dim)
    nx = np.linalg.norm(x)
    if nx == 0:
        return 0.0
    x /= nx
    s = 0.0
    for _ in range(iters):
        y = op.apply_adjoint(op.apply(x))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        s = np.sqrt(ny)
        x = y / ny
    return float(s)


def from_matrix(M, name: str = "matrix") -> LinOp:
    M = M if hasattr(M, "tocsr") else np.asarray(M, dtype=np.float64)
    return LinOp(lambda x: M @ x, lambda y: M.T @ y, M.shape[1], M.shape[0], name)


def identity(n: int, name: str = "I") -> LinOp:
    return LinOp(lambda x: x.copy(), lambda y: y.copy(), n, n, name, _norm=1.0)


def scaled(op: LinOp, s: float) -> LinOp:
    norm = None if op._norm is None else abs(s) * op._norm
    return LinOp(lambda x: s * op.apply(x), lambda y: s * op.apply_adjoint(y), op.in_dim, op.out_dim, f"{s}*{op.name}", norm)


def vstack(ops: Sequence[LinOp], name: str = "stack", check: bool = True) -> LinOp:
    """Stack operators sharing an input: x -> (A_1 x, ..., A_k x)."""
    n = ops[0].in_dim
    if any(o.in_dim != n for o in ops):
        raise ValueError("stacked operators must share the input dimension")
    splits = np.cumsum([o.out_dim for o in ops])[:-1]

    def fwd(x):
        return np.concatenate([o.apply(x) for o in ops])

    def adj(y):
        out = np.zeros(n)
        for o, part in zip(ops, np.split(y, splits)):
            out += o.apply_adjoint(part)
        return out

    op = LinOp(fwd, adj, n, int(sum(o.out_dim for o in ops)), name)
    return check_adjoint(op) if check else op


def block_diag(ops: Sequence[LinOp], name: str = "blockdiag", check: bool = True) -> LinOp:
    in_splits = np.cumsum([o.in_dim for o in ops])[:-1]
    out_splits = np.cumsum([o.out_dim for o in ops])[:-1]

    def fwd(x):
        return np.concatenate([o.apply(p) for o, p in zip(ops, np.split(x, in_splits))])

    def adj(y):
        return np.concatenate([o.apply_adjoint(p) for o, p in zip(ops, np.split(y, out_splits))])

    op = LinOp(fwd, adj, int(sum(o.in_dim for o in ops)), int(sum(o.out_dim for o in ops)), name)
    return check_adjoint(op) if check else op
