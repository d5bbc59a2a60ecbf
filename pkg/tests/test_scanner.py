import warnings

import numpy as np
import pytest

from dynmpi.core import Grid3, ImageSequence
from dynmpi.acquisition import simulate_dynamic_signal
from dynmpi.scanner import (
    PART_TIME,
    CycleClock,
    ScannerModel,
    build_system_matrix,
    load_system_matrix,
)


def test_cycle_clock():
    c = CycleClock((102, 96, 99), 2.5e6)
    assert c.samples_per_cycle == 53856
    assert c.repetition_time == pytest.approx(53856 / 2.5e6)
    assert CycleClock((17, 16), 2.5e6).samples_per_cycle == 272
    with pytest.raises(ValueError):
        CycleClock((0, 3), 1.0)
    with pytest.raises(ValueError):
        CycleClock((3,), 0.0)


def test_scanner_validation():
    with pytest.raises(ValueError, match="invertible"):
        ScannerModel(gradient=np.array([0.5, 0.0, 1.0]), drive_amplitudes=(0.01,), divisors=(4,))
    with pytest.raises(ValueError):
        ScannerModel(gradient=np.ones(3), drive_amplitudes=(0.01, 0.01), divisors=(4,))
    with pytest.raises(ValueError, match="span"):
        ScannerModel(gradient=np.ones(3), drive_amplitudes=(0.01,), divisors=(4,), receive_coils=np.ones((3, 3)))


def test_field_free_point(scanner3d, rng):
    t = rng.uniform(0, 1e-4, 500)
    xs = scanner3d.ffp_position(t)
    H = scanner3d.field(xs, t)
    assert np.abs(H).max() < 1e-14
    assert np.linalg.norm(H, axis=-1).max() < 1e-14


def test_ffp_velocity_matches_difference(scanner3d):
    t, h = 3.3e-6, 1e-12
    fd = (scanner3d.ffp_position(t + h) - scanner3d.ffp_position(t - h)) / (2 * h)
    v = scanner3d.ffp_velocity(t)
    np.testing.assert_allclose(fd, v, rtol=1e-5, atol=1e-6 * np.abs(v).max())


def test_covered_box(desk_scanner):
    lo, hi = desk_scanner.covered_box()
    # A / G = 14 mT / 0.5 T/m = 28 mm on x and y, nothing on z
    np.testing.assert_allclose(hi, [0.028, 0.028, 0.0], atol=1e-15)
    np.testing.assert_allclose(lo, -hi, atol=1e-15)


def test_system_function_is_periodic(scanner3d, rng):
    T = scanner3d.clock.repetition_time
    x = rng.uniform(-5e-3, 5e-3, (7, 3))
    t = rng.uniform(0, T, 11)
    s0 = scanner3d.system_function(x, t)
    s1 = scanner3d.system_function(x, t + T)
    assert np.abs(s1 - s0).max() <= 1e-12 * np.abs(s0).max()


def test_static_phantom_signal_periodic(scanner3d):
    # two cycles of a static phantom from sample indices 0..2N-1: exactly equal halves
    N = scanner3d.clock.samples_per_cycle
    x = np.array([[1e-3, -2e-3, 0.5e-3], [0.0, 1e-3, -1e-3]])
    s = scanner3d.sampled_kernel(x, np.arange(2 * N))
    u = s.sum(axis=-1)
    assert np.abs(u[N:] - u[:N]).max() <= 1e-12 * np.abs(u).max()


def test_system_function_shapes(desk_scanner):
    assert desk_scanner.system_function(np.zeros(3), 0.0).shape == (2,)
    assert desk_scanner.system_function(np.zeros((4, 3)), np.zeros(5)).shape == (5, 4, 2)


def test_sampled_kernel_matches_continuous(scanner3d):
    k = np.arange(0, 60, 7)
    x = np.array([[2e-3, 1e-3, -1e-3]])
    a = scanner3d.sampled_kernel(x, k)[:, :, 0]
    b = scanner3d.system_function(x[0], k / scanner3d.sample_rate)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12 * np.abs(b).max())


def test_system_function_symmetry(desk_scanner):
    # H_D(-t) = -H_D(t) with an even rate and F~ even in H: s(-x, -t) = s(x, t)
    T = desk_scanner.clock.repetition_time
    t = np.linspace(0, T, 37, endpoint=False)
    x = np.array([3e-3, -1e-3, 0.0])
    s = desk_scanner.system_function(x, t)
    s_mirror = desk_scanner.system_function(-x, -t)
    np.testing.assert_allclose(s_mirror, s, rtol=1e-9, atol=1e-12 * np.abs(s).max())


def test_build_matrix_layout(desk_scanner, desk_grid):
    S = build_system_matrix(desk_grid, desk_scanner)
    assert S.rows.shape == (2 * 272, 256)
    assert np.all(S.row_meta["part"] == PART_TIME)
    assert list(S.row_meta["channel"][[0, 271, 272]]) == [0, 0, 1]
    assert S.samples_per_cycle == 272
    # column j is the kernel at voxel center j times the voxel volume
    j = 37
    ref = desk_scanner.sampled_kernel(desk_grid.voxel_centers()[j], np.arange(272))[:, :, 0]
    np.testing.assert_allclose(S.rows[:, j], ref.T.ravel() * desk_grid.voxel_volume)


def test_workers_do_not_change_result(desk_scanner, desk_grid):
    a = build_system_matrix(desk_grid, desk_scanner, n_workers=1, chunk=37)
    b = build_system_matrix(desk_grid, desk_scanner, n_workers=3, chunk=37)
    assert np.array_equal(a.rows, b.rows)


def test_element_budget(desk_scanner, desk_grid):
    with pytest.raises(MemoryError):
        build_system_matrix(desk_grid, desk_scanner, element_budget=1000)


def test_outside_coverage_warns(desk_scanner):
    g = Grid3.centered((4, 4, 1), (20e-3, 20e-3, 1e-3))
    with pytest.warns(UserWarning, match="outside"):
        build_system_matrix(g, desk_scanner)


def test_ill_posed(desk_scanner, desk_grid):
    S = build_system_matrix(desk_grid, desk_scanner)
    sv = np.linalg.svd(S.rows, compute_uv=False)
    assert sv[19] / sv[0] < 1e-3


def test_matrix_round_trip(tmp_path, desk_scanner, desk_grid):
    S = build_system_matrix(desk_grid, desk_scanner)
    p = tmp_path / "S.bin"
    S.save(p)
    T = load_system_matrix(p)
    assert np.array_equal(T.rows, S.rows)
    assert np.array_equal(T.row_meta, S.row_meta)
    assert T.grid == S.grid
    assert T.samples_per_cycle == 272 and T.sample_rate == S.sample_rate


def test_signal_through_matrix_equals_direct(desk_scanner, desk_grid, rng):
    c = np.zeros((2,) + desk_grid.dims)
    c[:, 5:9, 6:10] = rng.uniform(0.5, 1.0, (2, 4, 4, 1))
    seq = ImageSequence(desk_grid, c)
    S = build_system_matrix(desk_grid, desk_scanner)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        u_direct = simulate_dynamic_signal(seq, desk_scanner)
    u_matrix = simulate_dynamic_signal(seq, desk_scanner, system_matrix=S)
    np.testing.assert_allclose(u_direct.data, u_matrix.data, rtol=1e-12, atol=1e-14 * np.abs(u_matrix.data).max())
