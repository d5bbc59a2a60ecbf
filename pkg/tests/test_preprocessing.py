import numpy as np
import pytest

from dynmpi.acquisition import simulate_dynamic_signal
from dynmpi.core import FREQUENCY_SPLIT, ImageSequence, MeasurementSeries
from dynmpi.preprocessing import (
    FrequencySelection,
    matrix_to_frequency_domain,
    mixing_bins,
    one_sided_weights,
    preprocess,
    row_normalize,
    select_frequencies,
    snr_estimates,
    split_real_imag,
    subtract_background,
    to_frequency_domain,
)
from dynmpi.scanner import PART_IM, PART_RE, build_system_matrix


@pytest.fixture(scope="module")
def S(desk_scanner, desk_grid):
    return build_system_matrix(desk_grid, desk_scanner)


def test_dft_convention():
    N = 8
    j = np.arange(N)
    u = np.cos(2 * np.pi * 3 * j / N)
    U = to_frequency_domain(u[None], N)
    assert U.shape == (1, 1, 5)
    np.testing.assert_allclose(U[0, 0], [0, 0, 0, N / 2, 0], atol=1e-12)


def test_one_sided_parseval(rng):
    for n in (8, 9):
        u = rng.standard_normal(n)
        U = np.fft.rfft(u)
        assert np.sum(one_sided_weights(n) * np.abs(U) ** 2) / n == pytest.approx(np.sum(u**2))


def test_dft_rejects_bad_length():
    with pytest.raises(ValueError):
        to_frequency_domain(np.ones(10), 4)


def test_mixing_bins_small():
    # N = 12, divisors (4, 3): base bins 3 and 4
    assert list(mixing_bins((4, 3), 12, 1)) == [3, 4]
    assert list(mixing_bins((4, 3), 12, 2)) == [1, 3, 4, 5, 6]


def test_mixing_excludes_dc_at_low_order():
    assert 0 not in mixing_bins((17, 16), 272, 3)


def test_selection_validation():
    with pytest.raises(ValueError):
        FrequencySelection(mode="bogus")
    with pytest.raises(ValueError):
        FrequencySelection(selected_indices=((3, 2),))


def test_band_only_cutoff():
    sel = select_frequencies(2, 272, 2.5e6, FrequencySelection("band_only", min_frequency=80e3))
    # bin k sits at k * f_s / N = k * 9191.2 Hz; the first kept bin is 9
    assert sel.selected_indices[0][0] == 9 and sel.selected_indices[1][0] == 9
    assert sel.n_selected() == 2 * (137 - 9)


def test_snr_selection(rng):
    snr = np.array([[10.0, 1.0, 6.0], [0.5, 5.0, 4.9]])
    sel = select_frequencies(2, 4, 1.0, FrequencySelection("snr_threshold", snr_threshold=5.0), snr=snr)
    assert sel.selected_indices == ((0, 2), (1,))
    with pytest.raises(ValueError):
        select_frequencies(2, 4, 1.0, FrequencySelection("snr_threshold"))


def test_snr_estimate_scale(rng):
    # pure noise: bin magnitude ~ std sqrt(N), so the estimate is ~ sqrt(2) * E|z| / |z| ~ 1
    N, std = 256, 0.3
    noise = rng.standard_normal((200, N)) * std
    spec = np.fft.rfft(noise)[:, None, 1:-1]
    est = snr_estimates(spec, std, N)
    assert est.mean() == pytest.approx(np.sqrt(np.pi) / 2 * np.sqrt(2), rel=0.05)
    assert np.all(np.isinf(snr_estimates(spec, 0.0, N)))


def test_no_frequencies_left():
    with pytest.raises(ValueError, match="survive"):
        select_frequencies(1, 16, 16.0, FrequencySelection("band_only", min_frequency=100.0))


def test_split_real_imag_interleaves():
    rows = np.array([[1 + 2j, 3 - 1j]])
    data = np.array([[4 + 5j]])
    r, d = split_real_imag(rows, data)
    np.testing.assert_array_equal(r, [[1, 3], [2, -1]])
    np.testing.assert_array_equal(d, [[4, 5]])


def test_row_normalize_drops_zero_rows():
    rows = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
    data = np.array([[10.0, 1.0, 2.0]])
    r, d, keep, n = row_normalize(rows, data)
    assert n == 1 and list(keep) == [True, False, True]
    np.testing.assert_allclose(r, [[0.6, 0.8], [1.0, 0.0]])
    np.testing.assert_allclose(d, [[2.0, 2.0]])


@pytest.mark.parametrize("weighting", ["row_norm", "global", "none"])
def test_preprocess_commutes_with_matrix(S, desk_grid, desk_scanner, weighting, rng):
    c = np.zeros((2,) + desk_grid.dims)
    c[:, 3:12, 4:9] = rng.uniform(0, 1, (2, 9, 5, 1))
    u = simulate_dynamic_signal(ImageSequence(desk_grid, c), desk_scanner, system_matrix=S)
    pp = preprocess(S, u, FrequencySelection(max_mixing_order=8), divisors=(17, 16), weighting=weighting)
    assert pp.matrix.domain_tag == FREQUENCY_SPLIT
    pred = c.reshape(2, -1) @ pp.matrix.rows.T
    np.testing.assert_allclose(pp.data.data, pred, rtol=1e-9, atol=1e-12 * np.abs(pred).max())


def test_preprocess_row_meta(S, desk_scanner):
    u = MeasurementSeries(np.zeros((1, S.n_rows)))
    pp = preprocess(S, u, FrequencySelection(max_mixing_order=2), divisors=(17, 16), weighting="none")
    m = pp.matrix.row_meta
    assert set(m["part"]) <= {PART_RE, PART_IM}
    assert set(m["channel"]) == {0, 1}
    assert set(m["index"]) <= set(mixing_bins((17, 16), 272, 2))


def test_weighting_scales(S):
    u = MeasurementSeries(np.zeros((1, S.n_rows)))
    sel = FrequencySelection(max_mixing_order=8)
    rn = preprocess(S, u, sel, divisors=(17, 16)).matrix.rows
    np.testing.assert_allclose(np.linalg.norm(rn, axis=1), 1.0)
    g = preprocess(S, u, sel, divisors=(17, 16), weighting="global").matrix.rows
    assert np.linalg.norm(g, axis=1).mean() == pytest.approx(1.0)
    n = preprocess(S, u, sel, divisors=(17, 16), weighting="none").matrix.rows
    np.testing.assert_allclose(g * (np.linalg.norm(n, axis=1).mean()), n, rtol=1e-12)
    with pytest.raises(ValueError):
        preprocess(S, u, sel, divisors=(17, 16), weighting="max")


def test_matrix_spectrum_shape(S):
    assert matrix_to_frequency_domain(S).shape == (2, 137, 256)


def test_preprocess_row_mismatch(S):
    with pytest.raises(ValueError, match="rows"):
        preprocess(S, MeasurementSeries(np.zeros((1, 10))), FrequencySelection(), divisors=(17, 16))


def test_subtract_background():
    u = MeasurementSeries(np.ones((2, 3)))
    b = MeasurementSeries(np.full((2, 3), 0.25))
    np.testing.assert_allclose(subtract_background(u, b).data, 0.75)
    with pytest.raises(ValueError):
        subtract_background(u, MeasurementSeries(np.ones((1, 3))))
