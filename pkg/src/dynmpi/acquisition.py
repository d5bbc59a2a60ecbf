"""Synthetic dynamic measurements under the quasi-static frame model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TIME_DOMAIN, Grid3, ImageSequence, MeasurementSeries
from .scanner import CycleClock, ScannerModel, SystemMatrix, build_system_matrix

RNG_NAME = "numpy.random.Philox"


@dataclass(frozen=True)
class NoiseModel:
    level: float = 0.0
    seed: int = 0
    kind: str = "gaussian_time_domain"
    averages: int = 1  # drive-field cycles pooled per frame

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("noise level must be >= 0")
        if self.averages < 1:
            raise ValueError("averages must be >= 1")
        if self.kind != "gaussian_time_domain":
            raise ValueError(f"unsupported noise kind {self.kind!r}")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so noise streams are reproducible across platforms."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def check_inverse_crime(sim_grid: Grid3, recon_grid: Grid3):
    for a in range(3):
        if recon_grid.dims[a] > 1 and not sim_grid.dims[a] > recon_grid.dims[a]:
            raise ValueError(
                f"simulation grid {sim_grid.dims} must be strictly finer than reconstruction grid "
                f"{recon_grid.dims} on every imaged axis"
            )


def simulate_dynamic_signal(
    phantom: ImageSequence,
    scanner: ScannerModel,
    clock: CycleClock | None = None,
    system_matrix: SystemMatrix | None = None,
) -> MeasurementSeries:
    """One drive-field cycle of time-domain signal per phantom frame.

    The phantom is treated as static within each cycle (the dc/dt contribution
    to the induced voltage is omitted).  Only voxels that are nonzero in some
    frame enter the quadrature.
    """
    clock = clock or scanner.clock
    if clock.samples_per_cycle != scanner.clock.samples_per_cycle:
        raise ValueError("clock does not match the scanner's drive-field divisors")
    flat = phantom.flat()
    if system_matrix is None:
        support = np.flatnonzero(np.any(flat != 0.0, axis=0))
        S = build_system_matrix(
            phantom.grid,
            scanner,
            clock,
            columns=support,
            element_budget=np.iinfo(np.int64).max,
        ) if support.size else None
        if S is None:
            data = np.zeros((phantom.n_frames, clock.samples_per_cycle * scanner.n_channels))
        else:
            data = flat[:, support] @ S.rows[:, support].T
    else:
        if system_matrix.grid.dims != phantom.grid.dims:
            raise ValueError("system matrix grid does not match the phantom grid")
        data = flat @ system_matrix.rows.T
    return MeasurementSeries(
        data,
        TIME_DOMAIN,
        meta={
            "n_channels": scanner.n_channels,
            "samples_per_cycle": clock.samples_per_cycle,
            "sample_rate": clock.base_frequency,
        },
    )


def neglected_term_magnitude(phantom: ImageSequence, scanner: ScannerModel) -> np.ndarray:
    """Diagnostic size of the m * dc/dt signal term left out of the simulation.

    Uses a forward difference of c over one repetition time and the mean
    moment along the trajectory; returns the per-frame RMS over samples.
    """
    from .magnetization import mean_moment

    clock = scanner.clock
    dc = np.diff(phantom.flat(), axis=0) / clock.repetition_time
    centers = phantom.grid.voxel_centers()
    k = np.arange(clock.samples_per_cycle)
    ph = scanner._sample_phase(k)
    HD = scanner.amplitudes3 * np.sin(ph)
    out = []
    for frame_dc in dc:
        idx = np.flatnonzero(frame_dc)
        if idx.size == 0:
            out.append(0.0)
            continue
        H = centers[idx][None] @ scanner.gradient.T + HD[:, None, :]
        m = mean_moment(H, scanner.particle)
        u = -scanner.particle.mu0 * np.einsum("mnj,jl,n->ml", m, scanner.receive_coils, frame_dc[idx])
        out.append(float(np.sqrt(np.mean(u**2))) * phantom.grid.voxel_volume)
    return np.array(out)


def add_noise(u: MeasurementSeries, noise: NoiseModel) -> MeasurementSeries:
    """Add i.i.d. Gaussian noise with std ``level * max|u|`` (time domain only).

    With ``averages = n`` each frame is the mean of n noisy repetitions of its
    (quasi-static) cycle, so the pooled noise std is ``level * max|u| / sqrt(n)``.
    """
    if u.domain_tag != TIME_DOMAIN:
        raise ValueError("noise is added in the time domain")
    meta = dict(u.meta, noise_level=noise.level, noise_seed=noise.seed, rng=RNG_NAME, averages=noise.averages)
    if noise.level == 0.0:
        return MeasurementSeries(u.data.copy(), u.domain_tag, meta)
    std = noise.level * float(np.abs(u.data).max())
    rng = make_rng(noise.seed)
    if noise.averages == 1:
        eps = rng.standard_normal(u.data.shape)
    else:
        eps = rng.standard_normal((noise.averages,) + u.data.shape).mean(axis=0)
    meta["noise_std_sample"] = std
    meta["noise_std"] = std / np.sqrt(noise.averages)  # std of the pooled frame data
    return MeasurementSeries(u.data + std * eps, u.domain_tag, meta)


def select_window(u: MeasurementSeries, S: SystemMatrix, start: int, length: int):
    """Restrict each frame and the matrix to samples [start, start+length) per channel.

    Expresses a quasi-static interval shorter than one drive-field cycle.
    """
    if S.domain_tag != TIME_DOMAIN or u.domain_tag != TIME_DOMAIN:
        raise ValueError("windowing applies to time-domain data")
    N = S.samples_per_cycle
    if not (0 <= start and length >= 1 and start + length <= N):
        raise ValueError(f"window [{start}, {start + length}) outside cycle of {N} samples")
    keep = (S.row_meta["index"] >= start) & (S.row_meta["index"] < start + length)
    S_w = SystemMatrix(S.rows[keep], S.row_meta[keep], S.grid, S.domain_tag, S.samples_per_cycle, S.sample_rate)
    return MeasurementSeries(u.data[:, keep], u.domain_tag, dict(u.meta, window=(start, length))), S_w
