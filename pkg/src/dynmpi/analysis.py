"""Image-quality metrics, mass statistics and trajectory post-processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import FlowField, ImageSequence
from .motion import sample_flow


@dataclass(frozen=True)
class SsimResult:
    mean: float
    per_frame: np.ndarray


def _ssim_volume(a, b, size, c1, c2):
    f = lambda x: ndimage.uniform_filter(x, size=size, mode="reflect")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    saa = f(a * a) - mu_a**2
    sbb = f(b * b) - mu_b**2
    sab = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(
    recon: ImageSequence,
    truth: ImageSequence,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float | None = None,
) -> SsimResult:
    """Mean over frames of windowed SSIM with a uniform cubic window.

    On axes shorter than the window it shrinks to the largest odd size that
    fits, so it stays centered (1 on singleton axes).  ``data_range`` defaults to
    max(truth) - min(truth) over the whole sequence.
    """
    a = np.asarray(recon.data if hasattr(recon, "data") else recon, dtype=np.float64)
    b = np.asarray(truth.data if hasattr(truth, "data") else truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    L = float(b.max() - b.min()) if data_range is None else float(data_range)
    if not L > 0:
        raise ValueError("data range must be > 0")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    size = tuple(min(window, n - 1 + n % 2) for n in a.shape[1:])
    per = np.array([_ssim_volume(x, y, size, c1, c2) for x, y in zip(a, b)])
    return SsimResult(float(per.mean()), per)


def mass_cov(c: ImageSequence, frames=None) -> float:
    """std / mean of the per-frame total mass (population std)."""
    m = c.data.reshape(c.n_frames, -1).sum(axis=1)
    if frames is not None:
        m = m[frames]
    mean = m.mean()
    if mean == 0:
        raise ValueError("mean mass is zero")
    return float(m.std() / abs(mean))


@dataclass(frozen=True)
class Trajectory:
    voxel_path: np.ndarray
    path: np.ndarray  # physical positions [m]
    smoothed: np.ndarray


def centroid(volume) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    w = v.sum()
    if w <= 0:
        raise ValueError("no positive concentration to locate")
    idx = np.indices(v.shape).reshape(3, -1)
    return idx @ v.ravel() / w


def polyfit_path(path: np.ndarray, degree: int = 4) -> np.ndarray:
    k = np.arange(len(path), dtype=np.float64)
    deg = min(degree, len(path) - 1)
    out = np.empty_like(path)
    for a in range(path.shape[1]):
        coef = np.polynomial.polynomial.polyfit(k, path[:, a], deg)
        out[:, a] = np.polynomial.polynomial.polyval(k, coef)
    return out


def extract_trajectory(c: ImageSequence, v: FlowField, start_frame: int = 0, end_frame: int | None = None, degree: int = 4) -> Trajectory:
    """Follow the start-frame centroid along the flow: p_{k+1} = p_k + v_k(p_k)."""
    end = v.n_steps if end_frame is None else end_frame
    if not 0 <= start_frame <= end <= v.n_steps:
        raise ValueError(f"frame range [{start_frame}, {end}] outside 0..{v.n_steps}")
    vol = np.clip(c.data[start_frame], 0.0, None)
    p = centroid(vol)
    dims = np.asarray(c.grid.dims)
    pts = [p]
    for k in range(start_frame, end):
        p = p + sample_flow(v.data[k], p)
        if np.any(p < -0.5) or np.any(p > dims - 0.5):
            raise ValueError(f"trajectory leaves the grid at step {k}")
        pts.append(p)
    vp = np.array(pts)
    phys = np.array([c.grid.to_physical(q) for q in vp])
    return Trajectory(vp, phys, polyfit_path(phys, degree))


@dataclass(frozen=True)
class Circle:
    center: np.ndarray
    radius: float
    residual: float
    normal: np.ndarray


def fit_circle(points) -> Circle:
    """Algebraic least-squares circle in the best-fit plane of the points."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 3:
        raise ValueError("fit_circle needs at least 3 points")
    mean = P.mean(axis=0)
    Q = P - mean
    _, s, vt = np.linalg.svd(Q, full_matrices=False)
    if s[0] == 0 or s[1] <= 1e-9 * s[0]:
        raise ValueError("points are collinear")
    e1, e2 = vt[0], vt[1]
    x, y = Q @ e1, Q @ e2
    M = np.column_stack([x, y, np.ones_like(x)])
    rhs = x * x + y * y
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    cx, cy = sol[0] / 2.0, sol[1] / 2.0
    r = float(np.sqrt(sol[2] + cx * cx + cy * cy))
    d = np.hypot(x - cx, y - cy) - r
    center = mean + cx * e1 + cy * e2
    normal = vt[2] if P.shape[1] > 2 else np.array([0.0, 0.0, np.linalg.det(vt[:2, :2])])
    return Circle(center, r, float(np.sqrt(np.mean(d * d))), normal)


def metrics_table(rows: dict) -> str:
    """Text table: one line per noise level, one column per algorithm."""
    algos = sorted({a for v in rows.values() for a in v})
    lines = ["noise " + " ".join(algos)]
    for noise in sorted(rows):
        lines.append(f"{noise:g} " + " ".join(f"{rows[noise].get(a, float('nan')):.4f}" for a in algos))
    return "\n".join(lines) + "\n"
