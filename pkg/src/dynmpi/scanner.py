"""FFP scanner geometry, system function and system-matrix assembly."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    TIME_DOMAIN,
    Grid3,
    grid_from_meta,
    grid_meta,
    load_array,
    read_sidecar,
    save_array,
    sidecar_path,
    write_sidecar,
)
from .magnetization import ParticleModel, ftilde_apply

log = logging.getLogger(__name__)

DEFAULT_ELEMENT_BUDGET = 60_000_000

ROW_DTYPE = np.dtype([("channel", "<i8"), ("index", "<i8"), ("part", "<i8")])
PART_TIME, PART_RE, PART_IM = -1, 0, 1


@dataclass(frozen=True)
class CycleClock:
    divisors: tuple[int, ...]
    base_frequency: float

    def __post_init__(self):
        divs = tuple(int(d) for d in self.divisors)
        if not divs or any(d < 1 for d in divs):
            raise ValueError(f"divisors must be positive integers, got {self.divisors}")
        if not self.base_frequency > 0:
            raise ValueError("base frequency must be > 0")
        object.__setattr__(self, "divisors", divs)

    @property
    def samples_per_cycle(self) -> int:
        return math.lcm(*self.divisors)

    @property
    def repetition_time(self) -> float:
        return self.samples_per_cycle / self.base_frequency

    @property
    def sample_times(self) -> np.ndarray:
        return np.arange(self.samples_per_cycle) / self.base_frequency


@dataclass(frozen=True)
class ScannerModel:
    """Linear-gradient FFP scanner with sinusoidal drive fields.

    Field quantities are in T/mu0, positions in meters.  ``divisors`` may name
    fewer than three axes; the remaining axes carry no drive field.  The sample
    rate equals ``base_frequency`` so drive axis ``j`` has period
    ``divisors[j]`` samples.
    """

    gradient: np.ndarray
    drive_amplitudes: tuple[float, ...]
    divisors: tuple[int, ...]
    base_frequency: float = 2.5e6
    receive_coils: np.ndarray = field(default_factory=lambda: np.eye(3))
    particle: ParticleModel = field(default_factory=ParticleModel.from_physical)

    def __post_init__(self):
        G = np.asarray(self.gradient, dtype=np.float64)
        if G.shape == (3,):
            G = np.diag(G)
        if G.shape != (3, 3):
            raise ValueError("gradient must be a 3x3 matrix or a diagonal 3-vector")
        if abs(np.linalg.det(G)) < 1e-12 * max(1.0, np.abs(G).max() ** 3):
            raise ValueError("selection-field gradient G must be invertible for an FFP scanner")
        divs = tuple(int(d) for d in self.divisors)
        amps = tuple(float(a) for a in self.drive_amplitudes)
        if not 1 <= len(divs) <= 3 or len(amps) != len(divs):
            raise ValueError("need one amplitude per divisor (1 to 3 drive axes)")
        if any(d < 1 for d in divs):
            raise ValueError("divisors must be positive")
        R = np.asarray(self.receive_coils, dtype=np.float64)
        if R.ndim == 1:
            R = R[:, None]
        if R.shape[0] != 3 or R.shape[1] < 1:
            raise ValueError("receive_coils must be a 3 x L matrix with L >= 1")
        if R.shape[1] == 3 and np.linalg.matrix_rank(R) < 3:
            raise ValueError("three receive coils must span R^3")
        object.__setattr__(self, "gradient", G)
        object.__setattr__(self, "divisors", divs)
        object.__setattr__(self, "drive_amplitudes", amps)
        object.__setattr__(self, "receive_coils", R)
        object.__setattr__(self, "_G_inv", np.linalg.inv(G))

    # -- derived quantities -------------------------------------------------

    @property
    def n_channels(self) -> int:
        return self.receive_coils.shape[1]

    @property
    def amplitudes3(self) -> np.ndarray:
        a = np.zeros(3)
        a[: len(self.drive_amplitudes)] = self.drive_amplitudes
        return a

    @property
    def drive_frequencies(self) -> np.ndarray:
        f = np.zeros(3)
        f[: len(self.divisors)] = self.base_frequency / np.asarray(self.divisors, float)
        return f

    @property
    def sample_rate(self) -> float:
        return self.base_frequency

    @property
    def clock(self) -> CycleClock:
        active = [d for d, a in zip(self.divisors, self.drive_amplitudes) if a != 0.0]
        return CycleClock(tuple(active) or (1,), self.base_frequency)

    # -- fields and trajectory ----------------------------------------------

    def _phase(self, t):
        """2*pi*frac(f_j t) per axis, shape (..., 3); reduced so periodicity is exact."""
        t = np.asarray(t, dtype=np.float64)
        cyc = np.fmod(t[..., None] * self.drive_frequencies, 1.0)
        return 2.0 * np.pi * cyc

    def _sample_phase(self, k):
        """Phase at integer sample indices, computed in exact integer arithmetic."""
        k = np.asarray(k, dtype=np.int64)
        divs = np.ones(3, dtype=np.int64)
        divs[: len(self.divisors)] = self.divisors
        return 2.0 * np.pi * np.mod(k[..., None], divs) / divs

    def drive_field(self, t) -> np.ndarray:
        return self.amplitudes3 * np.sin(self._phase(t))

    def drive_field_rate(self, t) -> np.ndarray:
        w = 2.0 * np.pi * self.drive_frequencies
        return self.amplitudes3 * w * np.cos(self._phase(t))

    def field(self, x, t) -> np.ndarray:
        """H(x, t) = G x + H_D(t)."""
        return np.asarray(x, float) @ self.gradient.T + self.drive_field(t)

    def ffp_position(self, t) -> np.ndarray:
        return -self.drive_field(t) @ self._G_inv.T

    def ffp_velocity(self, t) -> np.ndarray:
        return -self.drive_field_rate(t) @ self._G_inv.T

    def covered_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the FFP trajectory."""
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * 3, indexing="ij")).reshape(3, -1).T
        pts = -(corners * self.amplitudes3) @ self._G_inv.T
        return pts.min(axis=0), pts.max(axis=0)

    # -- system function -------------------------------------------------------

    def _kernel(self, x, H_D, H_D_rate) -> np.ndarray:
        """s_i(x, t) for points x (n, 3) and m time samples -> (m, L, n)."""
        H = x[None, :, :] @ self.gradient.T + H_D[:, None, :]
        # dH/dt = -G dx_s/dt = dH_D/dt
        Hdot = np.broadcast_to(H_D_rate[:, None, :], H.shape)
        FH = ftilde_apply(H, Hdot, self.particle.beta)
        p = self.particle
        s = -p.mu0 * p.m0 * FH @ self.receive_coils
        return np.transpose(s, (0, 2, 1))

    def system_function(self, x, t) -> np.ndarray:
        """System function per receive coil.

        ``x`` is a 3-vector or (n, 3) array and ``t`` a scalar or (m,) array;
        the result has shape (..., L) following the broadcast of t and x.
        """
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        xs = np.atleast_2d(x)
        ts = np.atleast_1d(t)
        s = self._kernel(xs, self.drive_field(ts), self.drive_field_rate(ts))
        s = np.transpose(s, (0, 2, 1))
        if x.ndim == 1:
            s = s[:, 0]
        if t.ndim == 0:
            s = s[0]
        return s

    def sampled_kernel(self, x, sample_index) -> np.ndarray:
        """Kernel at integer ADC sample indices, (m, L, n)."""
        ph = self._sample_phase(sample_index)
        w = 2.0 * np.pi * self.drive_frequencies
        HD = self.amplitudes3 * np.sin(ph)
        HDr = self.amplitudes3 * w * np.cos(ph)
        return self._kernel(np.atleast_2d(np.asarray(x, float)), HD, HDr)

    def describe(self) -> dict:
        return {
            "scanner.gradient": self.gradient.ravel(),
            "scanner.drive_amplitudes": self.drive_amplitudes,
            "scanner.divisors": self.divisors,
            "scanner.base_frequency": self.base_frequency,
            "scanner.receive_coils": self.receive_coils.ravel(),
            "scanner.n_channels": self.n_channels,
            "particle.beta": self.particle.beta,
            "particle.m0": self.particle.m0,
        }


@dataclass(frozen=True)
class SystemMatrix:
    """Dense forward matrix with one descriptor per row.

    Time-domain rows are ordered (channel, sample); frequency rows carry the
    (channel, DFT bin, real/imag part) of the selected component.
    """

    rows: np.ndarray
    row_meta: np.ndarray
    grid: Grid3
    domain_tag: str = TIME_DOMAIN
    samples_per_cycle: int = 0
    sample_rate: float = 0.0

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        meta = np.asarray(self.row_meta, dtype=ROW_DTYPE)
        if rows.ndim != 2 or rows.shape[1] != self.grid.n_voxels:
            raise ValueError(f"system matrix shape {rows.shape} does not match grid with {self.grid.n_voxels} voxels")
        if meta.shape != (rows.shape[0],):
            raise ValueError("row_meta needs one descriptor per row")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "row_meta", meta)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def apply(self, c) -> np.ndarray:
        return self.rows @ np.asarray(c, float).reshape(-1)

    def apply_adjoint(self, y) -> np.ndarray:
        return self.rows.T @ np.asarray(y, float)

    def save(self, path, extra_meta: dict | None = None):
        save_array(path, self.rows)
        meta = {
            "domain_tag": self.domain_tag,
            "samples_per_cycle": self.samples_per_cycle,
            "sample_rate": self.sample_rate,
            "n_rows": self.n_rows,
            **grid_meta(self.grid),
            **(extra_meta or {}),
        }
        write_sidecar(sidecar_path(path), meta)
        save_row_meta(str(path) + ".rows", self.row_meta, self.sample_rate, self.samples_per_cycle)


def save_row_meta(path, row_meta, sample_rate, samples_per_cycle):
    """Text table ``channel bin frequency_hz part`` with one line per row."""
    lines = ["# channel bin frequency_hz part"]
    for ch, idx, part in row_meta:
        if part == PART_TIME:
            lines.append(f"{ch} {idx} 0 time")
        else:
            fhz = idx * sample_rate / samples_per_cycle if samples_per_cycle else 0.0
            lines.append(f"{ch} {idx} {fhz!r} {'re' if part == PART_RE else 'im'}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_row_meta(path) -> np.ndarray:
    recs = []
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ch, idx, _f, part = line.split()
        recs.append((int(ch), int(idx), {"time": PART_TIME, "re": PART_RE, "im": PART_IM}[part]))
    return np.array(recs, dtype=ROW_DTYPE)


def time_row_meta(n_channels: int, n_samples: int) -> np.ndarray:
    meta = np.empty(n_channels * n_samples, dtype=ROW_DTYPE)
    meta["channel"] = np.repeat(np.arange(n_channels), n_samples)
    meta["index"] = np.tile(np.arange(n_samples), n_channels)
    meta["part"] = PART_TIME
    return meta


def build_system_matrix(
    grid: Grid3,
    scanner: ScannerModel,
    clock: CycleClock | None = None,
    n_workers: int = 1,
    element_budget: int = DEFAULT_ELEMENT_BUDGET,
    columns: np.ndarray | None = None,
    chunk: int = 256,
) -> SystemMatrix:
    """Assemble the time-domain system matrix by midpoint quadrature.

    Entry ((i, k), j) is s_i(x_j, k/f_S) * voxel_volume.  Columns are computed
    in independent chunks written to disjoint storage, so the result does not
    depend on ``n_workers``.  A 2D grid (n_z == 1) places the concentration on
    the plane through its voxel centers.  ``columns`` restricts assembly to a
    subset of voxels (other columns are zero).
    """
    clock = clock or scanner.clock
    n_samples = clock.samples_per_cycle
    L = scanner.n_channels
    n_rows = L * n_samples
    if n_rows * grid.n_voxels > element_budget:
        raise MemoryError(
            f"system matrix with {n_rows} x {grid.n_voxels} entries exceeds the element budget {element_budget}"
        )
    lo, hi = scanner.covered_box()
    centers = grid.voxel_centers()
    tol = 1e-12
    outside = np.any((centers < lo - tol) | (centers > hi + tol), axis=1)
    if outside.any():
        warnings.warn(f"{int(outside.sum())} voxel centers lie outside the FFP-covered region", stacklevel=2)

    S = np.zeros((n_rows, grid.n_voxels))
    k = np.arange(n_samples)
    cols = np.arange(grid.n_voxels) if columns is None else np.asarray(columns, dtype=int)
    vv = grid.voxel_volume

    def work(sl):
        idx = cols[sl]
        s = scanner.sampled_kernel(centers[idx], k)  # (m, L, n)
        S[:, idx] = np.transpose(s, (1, 0, 2)).reshape(n_rows, len(idx)) * vv

    slices = [slice(i, i + chunk) for i in range(0, len(cols), chunk)]
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            list(pool.map(work, slices))
    else:
        for sl in slices:
            work(sl)
    return SystemMatrix(
        S,
        time_row_meta(L, n_samples),
        grid,
        TIME_DOMAIN,
        samples_per_cycle=n_samples,
        sample_rate=clock.base_frequency,
    )


def load_system_matrix(path) -> SystemMatrix:
    meta = read_sidecar(sidecar_path(path))
    return SystemMatrix(
        load_array(path),
        load_row_meta(str(path) + ".rows"),
        grid_from_meta(meta),
        meta["domain_tag"],
        int(meta["samples_per_cycle"]),
        float(meta["sample_rate"]),
    )
