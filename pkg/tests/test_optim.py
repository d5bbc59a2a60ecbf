import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynmpi.optim import prox as P
from dynmpi.optim.difference import (
    central_axis,
    div_backward,
    div_central,
    dt_forward,
    dt_forward_adjoint,
    grad_central,
    grad_central_adjoint,
    grad_forward,
)
from dynmpi.optim.linop import (
    AdjointMismatch,
    LinOp,
    adjoint_error,
    block_diag,
    check_adjoint,
    estimate_operator_norm,
    from_matrix,
    identity,
    scaled,
    vstack,
)
from dynmpi.optim.solvers import DualBlock, NumericalFailure, PdhgParams, pdhg, spdhg

from oracles import grid_min_1d, grid_min_2d, lasso_reference, tv1d_reference

DIMS = [(6, 5, 4), (7, 6, 1), (5, 1, 1)]


def as_op(fwd, adj, shape_in, shape_out, name):
    n_in, n_out = int(np.prod(shape_in)), int(np.prod(shape_out))
    return LinOp(lambda x: fwd(x.reshape(shape_in)).ravel(), lambda y: adj(y.reshape(shape_out)).ravel(), n_in, n_out, name)


# ---- linop ------------------------------------------------------------------


def test_identity_norm_is_one():
    assert estimate_operator_norm(identity(10)) == pytest.approx(1.0)
    assert identity(4).norm() == 1.0


def test_norm_of_diagonal_matrix():
    M = np.diag([3.0, -5.0, 1.0])
    assert estimate_operator_norm(from_matrix(M), iters=200) == pytest.approx(5.0, rel=1e-8)


def test_norm_of_zero():
    z = LinOp(lambda x: np.zeros(2), lambda y: np.zeros(3), 3, 2)
    assert estimate_operator_norm(z) == 0.0
    with pytest.raises(ValueError):
        estimate_operator_norm(z, iters=0)


def test_check_adjoint_rejects_wrong_adjoint(rng):
    M = rng.standard_normal((4, 3))
    bad = LinOp(lambda x: M @ x, lambda y: 2 * M.T @ y, 3, 4, "bad")
    with pytest.raises(AdjointMismatch, match="bad"):
        check_adjoint(bad)


def test_transpose_and_scaling(rng):
    M = rng.standard_normal((4, 3))
    A = from_matrix(M)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(A.T(x), M.T @ x)
    np.testing.assert_allclose(scaled(A, -2.0)(rng.standard_normal(3) * 0 + 1), -2 * M @ np.ones(3))
    assert adjoint_error(scaled(A, 3.0)) < 1e-12


def test_stacks(rng):
    A, B = from_matrix(rng.standard_normal((4, 3))), from_matrix(rng.standard_normal((2, 3)))
    S = vstack([A, B])
    assert S.out_dim == 6 and adjoint_error(S) < 1e-12
    D = block_diag([A, B.T])
    assert (D.in_dim, D.out_dim) == (5, 7) and adjoint_error(D) < 1e-12
    with pytest.raises(ValueError):
        vstack([A, B.T])


# ---- differences ------------------------------------------------------------


def test_forward_gradient_values():
    u = np.arange(4.0).reshape(4, 1, 1) ** 2
    g = grad_forward(u)
    np.testing.assert_array_equal(g[0, :, 0, 0], [1, 3, 5, 0])
    assert not g[1:].any()


def test_central_values():
    u = np.arange(5.0)
    np.testing.assert_array_equal(central_axis(u, 0), [0.5, 1, 1, 1, -1.5])


def test_dt_forward():
    s = np.arange(3.0)[:, None] * np.ones((3, 2))
    np.testing.assert_array_equal(dt_forward(s), np.ones((2, 2)))
    with pytest.raises(ValueError):
        dt_forward(np.ones((1, 2)))


@pytest.mark.parametrize("dims", DIMS)
def test_difference_adjoints(dims):
    ops = [
        as_op(grad_forward, lambda p: -div_backward(p), dims, (3,) + dims, "grad/-div"),
        as_op(grad_central, grad_central_adjoint, dims, (3,) + dims, "central"),
        as_op(div_central, lambda u: np.stack([-central_axis(u, a) for a in range(3)]), (3,) + dims, dims, "div_central"),
        as_op(dt_forward, dt_forward_adjoint, (4,) + dims, (3,) + dims, "dt"),
    ]
    for op in ops:
        assert adjoint_error(op, n_probes=20) < 1e-8, op.name


def test_sequence_gradient_leading_axes(rng):
    u = rng.standard_normal((2, 5, 4, 3))
    g = grad_forward(u)
    assert g.shape == (2, 3, 5, 4, 3)
    np.testing.assert_array_equal(g[1], grad_forward(u[1]))


@given(arrays(np.float64, (4, 3, 2), elements=st.floats(-10, 10)))
def test_constant_offset_has_zero_gradient(u):
    np.testing.assert_allclose(grad_forward(u + 3.0), grad_forward(u), atol=1e-12)


# ---- prox -------------------------------------------------------------------


def test_prox_l1_values():
    np.testing.assert_array_equal(P.prox_l1([-3.0, -0.5, 0.0, 0.2, 2.0], 1.0), [-2.0, 0.0, 0.0, 0.0, 1.0])


def test_prox_l1_matches_grid(rng):
    for _ in range(50):
        x, t = rng.uniform(-5, 5), rng.uniform(0.01, 3)
        ref = grid_min_1d(lambda u: t * np.abs(u) + 0.5 * (u - x) ** 2, -6, 6)
        assert abs(P.prox_l1(x, t) - ref) < 1e-4


def test_projection_scalar_matches_grid(rng):
    for _ in range(50):
        y, r = rng.uniform(-5, 5), rng.uniform(0.1, 3)
        ref = grid_min_1d(lambda u: (u - y) ** 2, -r, r)
        assert abs(P.project_linf_ball(y, r) - ref) < 1e-4


def test_projection_vector_matches_grid(rng):
    for _ in range(50):
        y, r = rng.uniform(-4, 4, 2), rng.uniform(0.1, 3)
        ref = grid_min_2d(lambda a, b: np.where(a * a + b * b <= r * r * (1 + 1e-12), (a - y[0]) ** 2 + (b - y[1]) ** 2, np.inf), [-r, -r], [r, r])
        got = P.project_linf_ball(y, r, "per_voxel_vector")
        assert np.abs(got - ref).max() < 1e-4


def test_projection_per_voxel_layout(rng):
    y = rng.standard_normal((2, 3, 10)) * 3
    out = P.project_linf_ball(y.ravel(), 1.0, "per_voxel_vector", 3, 10).reshape(2, 3, 10)
    assert np.linalg.norm(out, axis=1).max() <= 1.0 + 1e-12
    inside = np.linalg.norm(y, axis=1) <= 1
    np.testing.assert_array_equal(out[:, :, inside[0]][0], y[:, :, inside[0]][0])
    with pytest.raises(ValueError):
        P.project_linf_ball(y, 1.0, "bogus")


def test_mc_dual_prox_matches_grid(rng):
    for _ in range(50):
        y, s, g, b = rng.uniform(-5, 5), rng.uniform(0.1, 2), rng.uniform(0.1, 3), rng.uniform(-3, 3)
        obj = lambda u: s * (-b * u) + 0.5 * (u - y) ** 2  # noqa: E731
        ref = grid_min_1d(obj, -g, g)
        assert abs(P.prox_translated_linf_indicator(y, s, g, b) - ref) < 1e-4


def test_affine_l1_prox_matches_grid(rng):
    for _ in range(50):
        v, b = rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2)
        a, t = rng.uniform(-3, 3), rng.uniform(0.05, 1.5)
        obj = lambda x, y: t * np.abs(a + b[0] * x + b[1] * y) + 0.5 * ((x - v[0]) ** 2 + (y - v[1]) ** 2)  # noqa: E731
        ref = grid_min_2d(obj, v - 6, v + 6)
        got = P.prox_affine_l1(np.append(v, 0.0)[:, None], t, np.array([a]), np.append(b, 0.0)[:, None])[:2, 0]
        assert np.abs(got - ref).max() < 1e-4


def test_l2_dual_proxes_match_grid(rng):
    for _ in range(50):
        y, s, beta = rng.uniform(-5, 5), rng.uniform(0.1, 3), rng.uniform(0.1, 3)
        ref = grid_min_1d(lambda u: s * u**2 / (2 * beta) + 0.5 * (u - y) ** 2, -6, 6)
        assert abs(P.prox_l2_squared_dual(y, s, beta) - ref) < 1e-4


def test_nonnegative_l1():
    f = P.l1(1.0, nonnegative=True)
    np.testing.assert_array_equal(f(np.array([-1.0, 0.5, 3.0]), 1.0), [0.0, 0.0, 2.0])


def test_l2_squared_prox(rng):
    c = rng.standard_normal(3)
    f = P.l2_squared(0.5, c)
    x = rng.standard_normal(3)
    # argmin t/2 |u - c|^2 + 1/2 |u - x|^2 = (x + t c) / (1 + t)
    np.testing.assert_allclose(f(x, 0.7), (x + 0.7 * c) / 1.7)


def test_moreau_matches_closed_form_duals(rng):
    u = rng.standard_normal(20)
    y = rng.standard_normal(20) * 3
    for s in (0.3, 2.0):
        # conjugate of |. - u|_1 and of 1/2|. - u|^2
        f1 = P.conjugate_via_moreau(P.ProxFn(lambda x, t: u + P.prox_l1(x - u, t), "l1u"))
        np.testing.assert_allclose(f1(y, s), P.l1_data_dual(u)(y, s), atol=1e-12)
        f2 = P.conjugate_via_moreau(P.ProxFn(lambda x, t: (x + t * u) / (1 + t), "l2u"))
        np.testing.assert_allclose(f2(y, s), P.l2_data_dual(u)(y, s), atol=1e-12)
        f3 = P.conjugate_via_moreau(P.l1(0.7))
        np.testing.assert_allclose(f3(y, s), P.linf_ball_dual(0.7)(y, s), atol=1e-12)


@given(st.floats(-100, 100), st.floats(0.0, 10.0))
def test_prox_l1_firmly_nonexpansive(x, t):
    assert abs(P.prox_l1(x, t)) <= abs(x)


# ---- solvers ----------------------------------------------------------------


@pytest.fixture(scope="module")
def lasso():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((30, 20))
    x_true = np.zeros(20)
    x_true[[2, 7, 11]] = [1.5, -2.0, 0.7]
    b = A @ x_true + 0.05 * rng.standard_normal(30)
    lam = 0.5
    x_ref, obj_ref = lasso_reference(A, b, lam)
    return A, b, lam, x_ref, obj_ref


def lasso_objective(A, b, lam):
    return lambda x: 0.5 * np.sum((A @ x - b) ** 2) + lam * np.abs(x).sum()


def test_pdhg_lasso(lasso):
    A, b, lam, x_ref, obj_ref = lasso
    x, _, diag = pdhg(from_matrix(A), P.l1(lam), P.l2_data_dual(b), PdhgParams(max_iters=5000), objective=lasso_objective(A, b, lam))
    assert abs(lasso_objective(A, b, lam)(x) - obj_ref) / obj_ref < 1e-4
    assert diag.iterations == 5000 and len(diag.trace) == 500
    assert diag.sigma == diag.tau


def test_pdhg_tv_denoising():
    rng = np.random.default_rng(2)
    b = np.repeat([0.0, 1.0, 0.4, 0.8], 12) + 0.1 * rng.standard_normal(48)
    lam = 0.3
    _, obj_ref = tv1d_reference(b, lam)
    dims = (48, 1, 1)
    G = as_op(grad_forward, lambda p: -div_backward(p), dims, (3,) + dims, "grad")
    x, _, _ = pdhg(G, P.l2_squared(0.5, b), P.linf_ball_dual(lam, "per_voxel_vector", 3, 48), PdhgParams(max_iters=3000))
    obj = 0.5 * np.sum((x - b) ** 2) + lam * np.abs(np.diff(x)).sum()
    assert abs(obj - obj_ref) / obj_ref < 1e-3


def test_pdhg_step_validation(lasso):
    A, b, lam, *_ = lasso
    with pytest.raises(ValueError, match="step"):
        pdhg(from_matrix(A), P.l1(lam), P.l2_data_dual(b), PdhgParams(sigma=1.0, tau=1.0, max_iters=1))


def test_params_validation():
    with pytest.raises(ValueError):
        PdhgParams(theta=1.5)
    with pytest.raises(ValueError):
        PdhgParams(variant="other")
    with pytest.raises(ValueError):
        PdhgParams(rho=0.0)


def test_pdhg_nonfinite_raises():
    op = from_matrix(np.eye(2))
    bad = P.ProxFn(lambda x, t: x * np.nan, "nan")
    with pytest.raises(NumericalFailure) as e:
        pdhg(op, bad, P.zero_fn(), PdhgParams(max_iters=5))
    assert e.value.iteration == 0


def test_spdhg_one_block_reproduces_pdhg(lasso):
    A, b, lam, *_ = lasso
    op = from_matrix(A)
    x1, _, _ = pdhg(op, P.l1(lam), P.l2_data_dual(b), PdhgParams(max_iters=300))
    x2, _, _ = spdhg([[DualBlock(op, P.l2_data_dual(b))]], P.l1(lam), PdhgParams(max_iters=300))
    np.testing.assert_allclose(x2, x1, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("variant", ["primal_extrapolation", "dual_extrapolation"])
def test_spdhg_lasso_batches(lasso, variant):
    A, b, lam, x_ref, obj_ref = lasso
    blocks = [DualBlock(from_matrix(A[i::3]), P.l2_data_dual(b[i::3])) for i in range(3)]
    x, _, _ = spdhg([blocks], P.l1(lam), PdhgParams(max_iters=30000, variant=variant, seed=3))
    assert abs(lasso_objective(A, b, lam)(x) - obj_ref) / obj_ref < 1e-4


def test_spdhg_seed_reproducible(lasso):
    A, b, lam, *_ = lasso
    blocks = [DualBlock(from_matrix(A[i::2]), P.l2_data_dual(b[i::2])) for i in range(2)]
    groups = [blocks, [DualBlock(identity(20), P.linf_ball_dual(0.1))]]
    run = lambda s: spdhg(groups, P.zero_fn(), PdhgParams(max_iters=400, seed=s))[0]  # noqa: E731
    assert np.array_equal(run(4), run(4))
    assert not np.array_equal(run(4), run(5))


def test_spdhg_l1_data_batches(lasso):
    # nonsmooth data term split into two batches: the default variant converges
    A, b, lam, *_ = lasso
    op = from_matrix(A)
    obj = lambda x: np.abs(A @ x - b).sum() + lam * np.abs(x).sum()  # noqa: E731
    x_ref, _, _ = pdhg(op, P.l1(lam), P.l1_data_dual(b), PdhgParams(max_iters=20000))
    blocks = [DualBlock(from_matrix(A[i::2]), P.l1_data_dual(b[i::2])) for i in range(2)]
    x, _, _ = spdhg([blocks], P.l1(lam), PdhgParams(max_iters=20000, seed=1))
    assert abs(obj(x) - obj(x_ref)) / obj(x_ref) < 1e-3


def test_spdhg_seed_average_matches_pdhg(lasso):
    A, b, lam, x_ref, _ = lasso
    blocks = [DualBlock(from_matrix(A[i::3]), P.l2_data_dual(b[i::3])) for i in range(3)]
    runs = [spdhg([blocks], P.l1(lam), PdhgParams(max_iters=6000, seed=s))[0] for s in range(32)]
    x_pd, _, _ = pdhg(from_matrix(A), P.l1(lam), P.l2_data_dual(b), PdhgParams(max_iters=5000))
    assert np.linalg.norm(np.mean(runs, axis=0) - x_pd) <= 1e-3 * np.linalg.norm(x_pd)
