import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dynmpi.core import (
    ArrayFormatError,
    FlowField,
    Grid3,
    ImageSequence,
    MeasurementSeries,
    grid_from_meta,
    grid_meta,
    load_array,
    read_sidecar,
    resample_trilinear,
    save_array,
    write_sidecar,
)


def test_roundtrip_zeros(tmp_path):
    p = tmp_path / "a.bin"
    save_array(p, np.zeros((2, 2, 2)))
    out = load_array(p)
    assert out.shape == (2, 2, 2) and np.all(out == 0)


def test_roundtrip_extreme_values_bit_exact(tmp_path):
    a = np.array([-0.0, 1e-300, 1e300, 5e-324, -np.inf, np.nan])
    p = tmp_path / "a.bin"
    save_array(p, a)
    assert load_array(p).tobytes() == a.astype("<f8").tobytes()


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4)))
def test_roundtrip_property(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("rt") / "a.bin"
    save_array(p, a)
    b = load_array(p)
    assert b.shape == a.shape
    assert b.tobytes() == a.copy(order="C").tobytes()


def test_header_layout(tmp_path):
    p = tmp_path / "a.bin"
    save_array(p, np.arange(6.0).reshape(2, 3))
    raw = p.read_bytes()
    assert raw[:4] == b"DMPI"
    assert struct.unpack_from("<II", raw, 4) == (1, 2)
    assert struct.unpack_from("<2Q", raw, 12) == (2, 3)
    assert len(raw) == 12 + 16 + 48


def test_bad_magic(tmp_path):
    p = tmp_path / "a.bin"
    save_array(p, np.ones(3))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(ArrayFormatError, match="bad magic"):
        load_array(p)


def test_truncated_and_overflow(tmp_path):
    p = tmp_path / "a.bin"
    save_array(p, np.ones(10))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ArrayFormatError, match="truncated"):
        load_array(p)
    p.write_bytes(b"DMPI" + struct.pack("<II", 1, 2) + struct.pack("<2Q", 2**40, 2**40))
    with pytest.raises(ArrayFormatError):
        load_array(p)
    p.write_bytes(b"DMPI" + struct.pack("<II", 1, 999))
    with pytest.raises(ArrayFormatError, match="dimension overflow"):
        load_array(p)


def test_sidecar_roundtrip(tmp_path):
    g = Grid3((3, 4, 5), (1e-3, 2e-3, 0.5e-3), (0.1, -0.2, 0.3))
    p = tmp_path / "m.meta"
    write_sidecar(p, {**grid_meta(g), "note": "x"})
    meta = read_sidecar(p)
    assert grid_from_meta(meta) == g
    assert meta["note"] == "x"


def test_grid_invariants():
    g = Grid3((4, 5, 1), (1e-3, 2e-3, 3e-3))
    assert g.n_voxels == 20
    assert np.allclose(g.extent, (4e-3, 10e-3, 3e-3))
    assert g.active_axes == (0, 1)
    with pytest.raises(ValueError):
        Grid3((0, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        Grid3((1, 1, 1), (1, -1, 1))


def test_centered_grid_voxel_mapping():
    g = Grid3.centered((4, 4, 2), (1e-3, 1e-3, 2e-3))
    centers = g.voxel_centers()
    assert np.allclose(centers.mean(axis=0), 0.0)
    assert np.allclose(g.to_voxel(g.to_physical([1, 2, 0])), [1, 2, 0])
    assert np.allclose(g.to_physical([0, 0, 0]), [-1.5e-3, -1.5e-3, -1e-3])


def test_containers_reject_bad_shapes():
    g = Grid3((2, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        ImageSequence(g, np.zeros((3, 2, 2, 3)))
    with pytest.raises(ValueError):
        FlowField(g, np.zeros((1, 2, 2, 2, 2)))
    with pytest.raises(ValueError):
        MeasurementSeries(np.zeros((2, 3)), domain_tag="bogus")
    seq = ImageSequence(g, np.zeros((3, 2, 2, 2)))
    FlowField.zeros(g, 2).check_matches(seq)
    with pytest.raises(ValueError):
        FlowField.zeros(g, 3).check_matches(seq)


@pytest.mark.parametrize(
    "factor, mode",
    [(0.5, "down_average"), ((0.5, 1, 0.25), "down_average"), (2, "up_trilinear"), ((1.5, 1, 0.5), "up_trilinear")],
)
def test_resample_constant_fixed_point(factor, mode):
    out = resample_trilinear(np.full((8, 4, 8), 3.0), factor, mode)
    assert np.allclose(out, 3.0)


def test_down_average_block_mean(rng):
    v = rng.standard_normal((4, 4, 4))
    out = resample_trilinear(v, 0.5, "down_average")
    ref = v.reshape(2, 2, 2, 2, 2, 2).mean(axis=(1, 3, 5))
    assert np.allclose(out, ref, atol=1e-14)


@given(hnp.arrays(np.float64, (8, 4, 2), elements=st.floats(-1e3, 1e3)))
def test_down_average_preserves_mean(v):
    out = resample_trilinear(v, 0.5, "down_average")
    assert abs(out.mean() - v.mean()) <= 1e-12 * max(1.0, np.abs(v).mean())


def test_down_then_up_constant():
    v = np.full((8, 8, 1), -1.25)
    out = resample_trilinear(resample_trilinear(v, (0.5, 0.5, 1), "down_average"), (2, 2, 1), "up_trilinear")
    assert out.shape == v.shape and np.allclose(out, -1.25)


def test_resample_non_integer_dims():
    with pytest.raises(ValueError):
        resample_trilinear(np.ones((5, 4, 4)), 0.5, "down_average")
