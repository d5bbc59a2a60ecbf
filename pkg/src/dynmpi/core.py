"""Grids, image/flow/measurement containers and the on-disk array format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"DMPI"
FORMAT_VERSION = 1
MAX_NDIM = 32

TIME_DOMAIN = "time_domain"
FREQUENCY_SPLIT = "frequency_selected_real_split"
DOMAIN_TAGS = (TIME_DOMAIN, FREQUENCY_SPLIT)


class ArrayFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Grid3:
    """Regular voxel grid; ``origin`` is the center of voxel (0, 0, 0) in meters."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        org = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(vs) != 3 or len(org) != 3:
            raise ValueError("Grid3 needs three dims, voxel sizes and origin coordinates")
        if any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if any(not v > 0 for v in vs):
            raise ValueError(f"voxel sizes must be > 0, got {vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)

    @classmethod
    def centered(cls, dims, voxel_size, center=(0.0, 0.0, 0.0)) -> "Grid3":
        dims = tuple(int(d) for d in dims)
        origin = tuple(c - (n - 1) * v / 2.0 for c, n, v in zip(center, dims, voxel_size))
        return cls(dims, tuple(voxel_size), origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple(n * v for n, v in zip(self.dims, self.voxel_size))

    @property
    def active_axes(self) -> tuple[int, ...]:
        """Axes with more than one voxel (a 2D grid has n_z == 1)."""
        return tuple(a for a in range(3) if self.dims[a] > 1)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.voxel_size[axis] * np.arange(self.dims[axis])

    def voxel_centers(self) -> np.ndarray:
        """(n_voxels, 3) array of voxel centers, C-order."""
        xs, ys, zs = (self.axis_coords(a) for a in range(3))
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def to_voxel(self, position) -> np.ndarray:
        """Physical position (m) -> fractional voxel index."""
        return (np.asarray(position, float) - np.asarray(self.origin)) / np.asarray(self.voxel_size)

    def to_physical(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, float) * np.asarray(self.voxel_size)

    def scaled(self, dims) -> "Grid3":
        """Same physical extent and center, different sampling."""
        dims = tuple(int(d) for d in dims)
        vs = tuple(e / n for e, n in zip(self.extent, dims))
        center = tuple(o + (n - 1) * v / 2.0 for o, n, v in zip(self.origin, self.dims, self.voxel_size))
        return Grid3.centered(dims, vs, center)


@dataclass(frozen=True)
class ImageSequence:
    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1:] != self.grid.dims:
            raise ValueError(
                f"ImageSequence data shape {data.shape} inconsistent with grid dims {self.grid.dims}"
            )
        if data.shape[0] < 1:
            raise ValueError("ImageSequence needs at least one frame")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def masses(self) -> np.ndarray:
        return self.data.reshape(self.n_frames, -1).sum(axis=1) * self.grid.voxel_volume

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.n_frames, -1)


@dataclass(frozen=True)
class FlowField:
    """Step k moves frame k to frame k+1; components in voxels per frame step."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 4:
            data = data[None]
        if data.ndim != 5 or data.shape[1] != 3 or data.shape[2:] != self.grid.dims:
            raise ValueError(
                f"FlowField data shape {data.shape} inconsistent with grid dims {self.grid.dims}"
            )
        if data.shape[0] < 1:
            raise ValueError("FlowField needs at least one step")
        if not np.all(np.isfinite(data)):
            raise ValueError("FlowField entries must be finite")
        object.__setattr__(self, "data", data)

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, grid: Grid3, n_steps: int) -> "FlowField":
        return cls(grid, np.zeros((n_steps, 3) + grid.dims))

    def check_matches(self, seq: ImageSequence):
        if self.grid.dims != seq.grid.dims or self.n_steps != seq.n_frames - 1:
            raise ValueError(
                f"flow with {self.n_steps} steps on {self.grid.dims} does not match "
                f"sequence with {seq.n_frames} frames on {seq.grid.dims}"
            )


@dataclass(frozen=True)
class MeasurementSeries:
    data: np.ndarray
    domain_tag: str = TIME_DOMAIN
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"MeasurementSeries needs (n_frames, n_rows) data, got {data.shape}")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_rows(self) -> int:
        return self.data.shape[1]


# --------------------------------------------------------------------------
# array file format


def save_array(path, array) -> None:
    arr = np.asarray(array, dtype="<f8").copy(order="C")  # ascontiguousarray would lift 0-d to 1-d
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ArrayFormatError("malformed header: file too short")
    if raw[:4] != MAGIC:
        raise ArrayFormatError("bad magic")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ArrayFormatError(f"malformed header: unsupported version {version}")
    if ndim > MAX_NDIM:
        raise ArrayFormatError(f"dimension overflow: ndim {ndim}")
    offset = 12 + 8 * ndim
    if len(raw) < offset:
        raise ArrayFormatError("malformed header: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    count = 1
    for d in dims:
        count *= d
        if count * 8 > len(raw):
            # checked incrementally so huge dims cannot overflow anything
            raise ArrayFormatError("truncated payload")
    if len(raw) - offset != 8 * count:
        raise ArrayFormatError(
            f"truncated payload: expected {8 * count} bytes, found {len(raw) - offset}"
        )
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return arr.reshape(dims).astype(np.float64)


def write_sidecar(path, meta: dict) -> None:
    """Text metadata: one ``key = value`` line per entry, keys sorted."""
    lines = [f"{k} = {_fmt_meta(v)}" for k, v in sorted(meta.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed metadata line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def _fmt_meta(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(_fmt_meta(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def grid_meta(grid: Grid3, prefix="grid") -> dict:
    return {
        f"{prefix}.dims": grid.dims,
        f"{prefix}.voxel_size": grid.voxel_size,
        f"{prefix}.origin": grid.origin,
    }


def grid_from_meta(meta: dict, prefix="grid") -> Grid3:
    def vec(key, cast):
        return tuple(cast(x) for x in meta[f"{prefix}.{key}"].split(","))

    return Grid3(vec("dims", int), vec("voxel_size", float), vec("origin", float))


# --------------------------------------------------------------------------
# resampling


def _axis_factor(factor, axis_len: int, mode: str) -> int:
    f = Fraction(factor).limit_denominator(10_000)
    out = f * axis_len
    if out.denominator != 1 or out < 1:
        raise ValueError(f"factor {factor} gives non-integer output size {float(out)} for axis {axis_len}")
    return int(out)


def _down_axis(vol: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = vol.shape[axis]
    if n_in % n_out:
        raise ValueError(f"down_average needs an integer block size ({n_in} -> {n_out})")
    b = n_in // n_out
    shape = vol.shape[:axis] + (n_out, b) + vol.shape[axis + 1 :]
    return vol.reshape(shape).mean(axis=axis + 1)


def _up_axis(vol: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = vol.shape[axis]
    # cell-centered sample positions of the output grid in input index units
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = s - i0
    v0 = np.take(vol, i0, axis=axis)
    v1 = np.take(vol, i1, axis=axis)
    wshape = [1] * vol.ndim
    wshape[axis] = n_out
    w = w.reshape(wshape)
    return (1.0 - w) * v0 + w * v1


def resample_trilinear(volume, factor, mode: str = "down_average") -> np.ndarray:
    """Resample a 3D volume by a per-axis rational factor.

    ``down_average`` averages integer blocks (factor = 1/block) and preserves the
    volume mean exactly; ``up_trilinear`` interpolates linearly between cell
    centers with edge clamping.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError("resample_trilinear expects a 3D volume")
    factors = factor if isinstance(factor, Sequence) else (factor,) * 3
    out = vol
    for axis, f in enumerate(factors):
        n_out = _axis_factor(f, vol.shape[axis], mode)
        if n_out == vol.shape[axis]:
            continue
        if mode == "down_average":
            if n_out > vol.shape[axis]:
                raise ValueError("down_average cannot enlarge an axis")
            out = _down_axis(out, axis, n_out)
        elif mode == "up_trilinear":
            out = _up_axis(out, axis, n_out)
        else:
            raise ValueError(f"unknown resample mode {mode!r}")
    return out
