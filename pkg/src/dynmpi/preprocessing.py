"""Frequency-domain preprocessing: DFT, frequency selection, real split, row weighting."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FREQUENCY_SPLIT, TIME_DOMAIN, MeasurementSeries
from .scanner import PART_IM, PART_RE, ROW_DTYPE, SystemMatrix

MODES = ("snr_threshold", "mixing_order", "band_only")
WEIGHTINGS = ("row_norm", "global", "none")


@dataclass(frozen=True)
class FrequencySelection:
    mode: str = "mixing_order"
    snr_threshold: float = 5.0
    max_mixing_order: int = 3
    min_frequency: float = 0.0
    selected_indices: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.min_frequency < 0 or self.snr_threshold < 0 or self.max_mixing_order < 1:
            raise ValueError("invalid frequency selection parameters")
        for idx in self.selected_indices:
            if np.any(np.diff(idx) <= 0):
                raise ValueError("selected indices must be strictly increasing per channel")

    @property
    def resolved(self) -> bool:
        return bool(self.selected_indices)

    def n_selected(self) -> int:
        return int(sum(len(i) for i in self.selected_indices))


def one_sided_weights(n: int) -> np.ndarray:
    """Parseval weights of the one-sided spectrum of a real length-n signal."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def to_frequency_domain(u_time, n_samples: int) -> np.ndarray:
    """One-sided DFT u_hat[k] = sum_j u[j] exp(-2 pi i k j / N) per channel.

    The last axis of ``u_time`` holds channel-major samples (L * N); the result
    has shape (..., L, N//2 + 1).
    """
    u = np.asarray(u_time, dtype=np.float64)
    if u.shape[-1] % n_samples:
        raise ValueError(f"sample axis of length {u.shape[-1]} is not a multiple of N = {n_samples}")
    u = u.reshape(u.shape[:-1] + (u.shape[-1] // n_samples, n_samples))
    return np.fft.rfft(u, axis=-1)


def matrix_to_frequency_domain(S: SystemMatrix) -> np.ndarray:
    """(L, N//2+1, n_voxels) complex spectrum of every matrix column."""
    if S.domain_tag != TIME_DOMAIN:
        raise ValueError("system matrix is already in the frequency domain")
    N = S.samples_per_cycle
    L = S.n_rows // N
    return np.fft.rfft(S.rows.reshape(L, N, -1), axis=1)


def mixing_bins(divisors, n_samples: int, max_order: int) -> np.ndarray:
    """Bins |sum_i n_i N/d_i| (folded into [0, N/2]) with 1 <= sum |n_i| <= max_order."""
    base = [n_samples // d for d in divisors]
    bins = set()
    ranges = [range(-max_order, max_order + 1)] * len(base)
    for ns in itertools.product(*ranges):
        order = sum(abs(n) for n in ns)
        if order == 0 or order > max_order:
            continue
        k = abs(sum(n * b for n, b in zip(ns, base))) % n_samples
        bins.add(min(k, n_samples - k))
    return np.array(sorted(bins), dtype=int)


def snr_estimates(clean_spectrum: np.ndarray, noise_std: float, n_samples: int) -> np.ndarray:
    """Per-channel, per-bin SNR |clean| / (std * sqrt(N/2)), averaged over frames.

    ``clean_spectrum`` has shape (n_frames, L, K).  White noise of variance
    std^2 has expected bin magnitude std * sqrt(N) (sqrt(N/2) per real part).
    """
    mag = np.abs(np.asarray(clean_spectrum)).mean(axis=0)
    if noise_std <= 0:
        return np.full(mag.shape, np.inf)
    return mag / (noise_std * math.sqrt(n_samples / 2.0))


def select_frequencies(
    n_channels: int,
    n_samples: int,
    sample_rate: float,
    selection: FrequencySelection,
    divisors=None,
    snr=None,
) -> FrequencySelection:
    """Resolve a selection into per-channel kept DFT bins."""
    n_bins = n_samples // 2 + 1
    bins = np.arange(n_bins)
    # bins strictly below the cutoff are dropped; 1e-9 guards float rounding
    cutoff = math.ceil(selection.min_frequency * n_samples / sample_rate - 1e-9)
    band = bins >= cutoff
    keep = []
    for ch in range(n_channels):
        mask = band.copy()
        if selection.mode == "snr_threshold":
            if snr is None:
                raise ValueError("snr_threshold mode needs SNR estimates")
            mask &= np.asarray(snr)[ch] >= selection.snr_threshold
        elif selection.mode == "mixing_order":
            if divisors is None:
                raise ValueError("mixing_order mode needs the drive-field divisors")
            mix = np.zeros(n_bins, bool)
            mix[mixing_bins(divisors, n_samples, selection.max_mixing_order)] = True
            mask &= mix
        keep.append(tuple(int(b) for b in np.flatnonzero(mask)))
    if not any(keep):
        raise ValueError("no frequencies survive selection")
    return replace(selection, selected_indices=tuple(keep))


def split_real_imag(rows: np.ndarray, data: np.ndarray | None = None):
    """Each complex row becomes the real rows (Re, Im); data likewise along its last axis."""
    rows = np.asarray(rows)
    out = np.empty((2 * rows.shape[0],) + rows.shape[1:])
    out[0::2] = rows.real
    out[1::2] = rows.imag
    if data is None:
        return out
    data = np.asarray(data)
    d = np.empty(data.shape[:-1] + (2 * data.shape[-1],))
    d[..., 0::2] = data.real
    d[..., 1::2] = data.imag
    return out, d


def row_normalize(rows: np.ndarray, data: np.ndarray, eps_rel: float = 1e-12):
    """Divide every row and its data entries by the row's Euclidean norm.

    Rows with norm <= eps_rel * max norm are dropped.  Returns
    (rows, data, kept_mask, n_dropped); ``data`` may carry leading frame axes.
    """
    rows = np.asarray(rows, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    eps = eps_rel * norms.max() if norms.size else 0.0
    keep = norms > eps
    scale = 1.0 / norms[keep]
    return rows[keep] * scale[:, None], data[..., keep] * scale, keep, int((~keep).sum())


def subtract_background(u: MeasurementSeries, background: MeasurementSeries) -> MeasurementSeries:
    if u.data.shape != background.data.shape:
        raise ValueError(f"background shape {background.data.shape} does not match {u.data.shape}")
    return MeasurementSeries(u.data - background.data, u.domain_tag, dict(u.meta))


@dataclass
class Preprocessed:
    matrix: SystemMatrix
    data: MeasurementSeries
    selection: FrequencySelection
    n_dropped: int


def preprocess(
    S: SystemMatrix,
    u: MeasurementSeries,
    selection: FrequencySelection,
    divisors=None,
    snr=None,
    weighting: str = "row_norm",
) -> Preprocessed:
    """DFT, frequency selection, real/imag split and row weighting.

    ``weighting`` is "row_norm" (each row scaled to unit norm), "global" (one
    scalar, the mean row norm, divides all rows and data; only fixes units) or
    "none".  Matrix rows and data entries are transformed identically, so the
    pipeline commutes with applying the matrix.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    N = S.samples_per_cycle
    L = S.n_rows // N
    if u.n_rows != S.n_rows:
        raise ValueError(f"data with {u.n_rows} rows does not match matrix with {S.n_rows} rows")
    S_hat = matrix_to_frequency_domain(S)
    u_hat = to_frequency_domain(u.data, N)
    if not selection.resolved:
        selection = select_frequencies(L, N, S.sample_rate, selection, divisors, snr)
    rows, data, meta = [], [], []
    for ch, kept in enumerate(selection.selected_indices):
        kept = np.asarray(kept, dtype=int)
        rows.append(S_hat[ch, kept])
        data.append(u_hat[:, ch, kept])
        m = np.empty(2 * len(kept), dtype=ROW_DTYPE)
        m["channel"] = ch
        m["index"] = np.repeat(kept, 2)
        m["part"] = np.tile([PART_RE, PART_IM], len(kept))
        meta.append(m)
    rows_r, data_r = split_real_imag(np.concatenate(rows), np.concatenate(data, axis=-1))
    meta = np.concatenate(meta)
    n_dropped = 0
    if weighting == "row_norm":
        rows_r, data_r, keep, n_dropped = row_normalize(rows_r, data_r)
    else:
        keep = np.linalg.norm(rows_r, axis=1) > 0
        rows_r, data_r = rows_r[keep], data_r[:, keep]
        n_dropped = int((~keep).sum())
        if weighting == "global" and rows_r.shape[0]:
            scale = float(np.linalg.norm(rows_r, axis=1).mean())
            rows_r, data_r = rows_r / scale, data_r / scale
    meta = meta[keep]
    matrix = SystemMatrix(rows_r, meta, S.grid, FREQUENCY_SPLIT, N, S.sample_rate)
    series = MeasurementSeries(data_r, FREQUENCY_SPLIT, dict(u.meta, n_dropped_rows=n_dropped))
    return Preprocessed(matrix, series, selection, n_dropped)
