"""Independent reference minimizers for the prox and solver tests."""

import numpy as np
from scipy import optimize


def grid_min_1d(f, lo, hi, n=2001, rounds=8):
    """Zooming grid search for a convex scalar objective on [lo, hi] (vectorized f).

    For a convex function the minimizer lies within one spacing of the
    discrete argmin, so each round may shrink to +-2 spacings around it.
    """
    a, b = lo, hi
    for _ in range(rounds):
        x = np.linspace(a, b, n)
        i = int(np.argmin(f(x)))
        h = (b - a) / (n - 1)
        a, b = max(lo, x[i] - 2 * h), min(hi, x[i] + 2 * h)
    return x[i]


def _inner_min(f, xs, lo, hi, n, rounds):
    """Row-wise 1-D zoom over y for every x in ``xs``; returns (min values, argmins)."""
    a = np.full(xs.shape, float(lo))
    b = np.full(xs.shape, float(hi))
    rows = np.arange(xs.size)
    for _ in range(rounds):
        y = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, n)[None]
        vals = f(xs[:, None], y)
        i = np.argmin(vals, axis=1)
        h = (b - a) / (n - 1)
        best = y[rows, i]
        a, b = np.maximum(lo, best - 2 * h), np.minimum(hi, best + 2 * h)
    return vals[rows, i], best


def grid_min_2d(f, lo, hi, n=201, rounds=6):
    """Nested zooming grid search for a convex objective f(x, y) over a box.

    The partial minimum over y is convex in x, so both levels keep the
    one-spacing guarantee of the 1-D search.
    """
    a, b = float(lo[0]), float(hi[0])
    for _ in range(rounds):
        x = np.linspace(a, b, n)
        vals, ys = _inner_min(f, x, lo[1], hi[1], n, rounds)
        i = int(np.argmin(vals))
        h = (b - a) / (n - 1)
        a, b = max(lo[0], x[i] - 2 * h), min(hi[0], x[i] + 2 * h)
    return np.array([x[i], ys[i]])


def lasso_reference(A, b, lam):
    """min 1/2 |Ax - b|^2 + lam |x|_1 via the split x = p - q, p, q >= 0 (L-BFGS-B)."""
    n = A.shape[1]

    def fun(z):
        p, q = z[:n], z[n:]
        r = A @ (p - q) - b
        g = A.T @ r
        return 0.5 * r @ r + lam * z.sum(), np.concatenate([g + lam, -g + lam])

    res = optimize.minimize(fun, np.zeros(2 * n), jac=True, method="L-BFGS-B", bounds=[(0, None)] * (2 * n),
                            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 20000})
    x = res.x[:n] - res.x[n:]
    return x, 0.5 * np.sum((A @ x - b) ** 2) + lam * np.abs(x).sum()


def tv1d_reference(b, lam):
    """1-D TV denoising min 1/2 |x - b|^2 + lam |Dx|_1 through its box-constrained dual."""
    n = b.size

    def Dt(p):
        out = np.zeros(n)
        out[:-1] -= p
        out[1:] += p
        return out

    def fun(p):
        r = b - Dt(p)
        g = np.diff(r) * -1.0  # gradient of 1/2|b - D^T p|^2 is -D(b - D^T p)
        return 0.5 * r @ r, g

    res = optimize.minimize(fun, np.zeros(n - 1), jac=True, method="L-BFGS-B", bounds=[(-lam, lam)] * (n - 1),
                            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 20000})
    x = b - Dt(res.x)
    return x, 0.5 * np.sum((x - b) ** 2) + lam * np.abs(np.diff(x)).sum()
