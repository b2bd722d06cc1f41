import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gfi.engine import GfiConfig, ParameterPoint, SolverFailure, run_fiducial
from gfi.models.tensor import (
    CpFactors,
    TensorDataset,
    TensorModel,
    _objective,
    block_relaxation_fit,
    cp_compose,
    sigma_mle,
    tr_predict,
)
from gfi.numerics import RandomStream


def _random_factors(rng, dims, R, scale=1.0):
    return CpFactors(tuple(rng.normal(0.0, scale, (p, R)) for p in dims))


def _make_data(rng, dims, n, B, sigma):
    X = rng.standard_normal((n,) + tuple(dims))
    y = X.reshape(n, -1) @ B.ravel() + rng.normal(0.0, sigma, n)
    return TensorDataset(X, y)


# ------------------------------------------------------------------ cp_compose

def test_cp_compose_rank_one_outer_product():
    f = CpFactors((np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])))
    assert_allclose(cp_compose(f), [[3.0, 4.0], [6.0, 8.0]], rtol=0, atol=0)


def test_cp_compose_zero_mode_vector_gives_zero_tensor():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 2))
    b = np.zeros((4, 2))
    c = rng.standard_normal((2, 2))
    assert np.array_equal(cp_compose(CpFactors((a, b, c))), np.zeros((3, 4, 2)))


def test_cp_compose_matches_brute_force_triple_loop():
    rng = np.random.default_rng(1)
    dims, R = (3, 4, 2), 2
    f = _random_factors(rng, dims, R)
    expect = np.zeros(dims)
    for i in range(3):
        for j in range(4):
            for k in range(2):
                for r in range(R):
                    expect[i, j, k] += (
                        f.factors[0][i, r] * f.factors[1][j, r] * f.factors[2][k, r]
                    )
    assert_allclose(cp_compose(f), expect, atol=1e-12)


def test_cp_compose_rank_permutation_exact():
    # integer-valued factors so the reordered sums are exact in floats
    rng = np.random.default_rng(2)
    dims, R = (3, 2, 4), 3
    fac = tuple(rng.integers(-3, 4, (p, R)).astype(float) for p in dims)
    perm = [2, 0, 1]
    permuted = tuple(F[:, perm] for F in fac)
    assert np.array_equal(cp_compose(CpFactors(fac)), cp_compose(CpFactors(permuted)))


def test_cp_factors_validation():
    with pytest.raises(ValueError):
        CpFactors((np.ones((2, 2)), np.ones((3, 3))))  # rank mismatch
    with pytest.raises(ValueError):
        CpFactors((np.array([[np.nan]]),))
    with pytest.raises(ValueError):
        CpFactors((np.ones((2, 0)),))  # R = 0
    with pytest.raises(ValueError):
        CpFactors(())
    f = CpFactors((np.ones((2, 3)), np.ones((5, 3))))
    assert f.order == 2 and f.rank == 3 and f.dims == (2, 5)


# ------------------------------------------------------------------ tr_predict

def test_tr_predict_identity_pattern():
    f = CpFactors((np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])))
    X = np.eye(2)
    assert tr_predict(X, f) == pytest.approx(11.0, abs=1e-12)


def test_tr_predict_zero_tensor():
    f = CpFactors((np.ones((2, 1)), np.ones((3, 1))))
    assert tr_predict(np.zeros((2, 3)), f) == 0.0


def test_tr_predict_matches_materialized_inner_product():
    rng = np.random.default_rng(3)
    f = _random_factors(rng, (4, 4, 3), 2)
    X = rng.standard_normal((4, 4, 3))
    oracle = X.ravel() @ cp_compose(f).ravel()
    assert tr_predict(X, f) == pytest.approx(oracle, abs=1e-10)


def test_tr_predict_shape_mismatch():
    f = CpFactors((np.ones((2, 1)), np.ones((3, 1))))
    with pytest.raises(ValueError):
        tr_predict(np.zeros((3, 2)), f)


# ----------------------------------------------------------------- TensorDataset

def test_dataset_validation():
    with pytest.raises(ValueError):
        TensorDataset(np.zeros((3, 2)), np.zeros(4))  # y length mismatch
    with pytest.raises(ValueError):
        TensorDataset(np.zeros(3), np.zeros(3))  # no mode axes
    with pytest.raises(ValueError):
        TensorDataset(np.zeros((0, 2)), np.zeros(0))  # n = 0
    with pytest.raises(ValueError):
        TensorDataset(np.full((2, 2), np.nan), np.zeros(2))
    data = TensorDataset(np.zeros((5, 2, 3)), np.zeros(5))
    assert data.n == 5 and data.dims == (2, 3) and data.order == 2


# ---------------------------------------------------------- block_relaxation_fit

def test_fit_soft_threshold_oracle_on_identity_design():
    # one mode, identity design: the lasso solution is entrywise
    # soft-thresholding of y + u* at half the penalty weight
    data = TensorDataset(np.eye(2), np.array([3.0, -0.5]))
    fit = block_relaxation_fit(data, np.zeros(2), 1, 1.0, stream=RandomStream(0, 1))
    coef = fit.factors[0][:, 0]
    assert_allclose(coef, [2.5, 0.0], atol=1e-12)
    assert coef[1] == 0.0


def test_fit_zero_solution_threshold():
    # one mode: the all-zero solution appears exactly at lam = 2*||X^T v||_inf;
    # probe both sides of the threshold with a small margin
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 3))
    y = rng.standard_normal(6)
    edge = 2.0 * np.max(np.abs(X.T @ y))
    data = TensorDataset(X, y)
    above = block_relaxation_fit(data, np.zeros(6), 1, edge * 1.05,
                                 stream=RandomStream(0, 1))
    assert np.all(above.factors[0] == 0.0)
    below = block_relaxation_fit(data, np.zeros(6), 1, edge * 0.95,
                                 stream=RandomStream(0, 1))
    assert np.any(below.factors[0] != 0.0)
    # two modes, enormous lam: every factor collapses to exact zero
    f = _random_factors(rng, (3, 4), 2)
    data2 = _make_data(rng, (3, 4), 20, cp_compose(f), 0.1)
    fit2 = block_relaxation_fit(data2, np.zeros(20), 2, 1e8, stream=RandomStream(0, 2))
    assert all(np.all(F == 0.0) for F in fit2.factors)


def test_fit_exact_recovery_noiseless():
    rng = np.random.default_rng(5)
    truth = _random_factors(rng, (4, 3), 2)
    data = _make_data(rng, (4, 3), 200, cp_compose(truth), 0.0)
    fit = block_relaxation_fit(data, np.zeros(200), 2, 0.0, stream=RandomStream(0, 1))
    resid = data.y - np.array([tr_predict(X, fit) for X in data.X])
    assert resid @ resid / data.n < 1e-6


def test_fit_objective_not_above_random_init():
    rng = np.random.default_rng(6)
    truth = _random_factors(rng, (4, 4), 2)
    data = _make_data(rng, (4, 4), 40, cp_compose(truth), 0.5)
    for sid in (1, 2, 3):
        stream = RandomStream(9, sid)
        fit = block_relaxation_fit(data, np.zeros(40), 2, 0.7, stream=stream)
        g = stream.generator()
        init = [g.normal(0.0, (p * 2) ** -0.25, (p, 2)) for p in (4, 4)]
        assert (_objective(data.X, data.y, fit.factors, 0.7)
                <= _objective(data.X, data.y, init, 0.7) + 1e-9)


def test_fit_monotone_in_cycle_budget():
    rng = np.random.default_rng(7)
    truth = _random_factors(rng, (5, 4), 2)
    data = _make_data(rng, (5, 4), 50, cp_compose(truth), 0.3)
    with pytest.warns(UserWarning, match="converge"):
        rough = block_relaxation_fit(data, np.zeros(50), 2, 0.5,
                                     cfg={"max_cycles": 1}, stream=RandomStream(1, 1))
    fine = block_relaxation_fit(data, np.zeros(50), 2, 0.5,
                                cfg={"max_cycles": 200}, stream=RandomStream(1, 1))
    obj_rough = _objective(data.X, data.y, rough.factors, 0.5)
    obj_fine = _objective(data.X, data.y, fine.factors, 0.5)
    assert obj_fine <= obj_rough + 1e-9


def test_fit_nan_objective_raises():
    data = TensorDataset(np.eye(2), np.array([1.0, 2.0]))
    u = np.array([np.nan, 0.0])
    with pytest.raises(ValueError, match="finite"):
        block_relaxation_fit(data, u, 1, 0.1, stream=RandomStream(0, 1))


def test_fit_deterministic_given_stream():
    rng = np.random.default_rng(8)
    truth = _random_factors(rng, (4, 3), 2)
    data = _make_data(rng, (4, 3), 30, cp_compose(truth), 0.4)
    a = block_relaxation_fit(data, np.zeros(30), 2, 0.3, stream=RandomStream(5, 2))
    b = block_relaxation_fit(data, np.zeros(30), 2, 0.3, stream=RandomStream(5, 2))
    for Fa, Fb in zip(a.factors, b.factors):
        assert np.array_equal(Fa, Fb)
    c = block_relaxation_fit(data, np.zeros(30), 2, 0.3, stream=RandomStream(5, 3))
    assert any(not np.array_equal(Fa, Fc) for Fa, Fc in zip(a.factors, c.factors))


def test_fit_zeroed_coordinates_satisfy_subgradient_bound():
    rng = np.random.default_rng(9)
    truth = CpFactors((np.array([[2.0, 0.0], [0.0, 1.5], [0.0, 0.0], [1.0, 0.0]]),
                       np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 0.0], [0.0, 0.0]])))
    data = _make_data(rng, (4, 4), 60, cp_compose(truth), 0.2)
    lam = 20.0
    t = lam / 2.0
    cfg = {"tol": 1e-13, "ccd_tol": 1e-12, "max_cycles": 500}
    fit = block_relaxation_fit(data, np.zeros(60), 2, lam, cfg=cfg,
                               stream=RandomStream(2, 1))
    pred = np.array([tr_predict(X, fit) for X in data.X])
    e = data.y - pred
    n_zero = n_nonzero = 0
    for d in range(2):
        other = fit.factors[1 - d]
        if d == 0:
            T = np.einsum("ijk,kr->ijr", data.X, other)
        else:
            T = np.einsum("ijk,jr->ikr", data.X, other)
        W = T.transpose(0, 2, 1).reshape(60, -1)
        grad = W.T @ e
        b = fit.factors[d].ravel(order="F")
        zero = b == 0.0
        n_zero += int(zero.sum())
        n_nonzero += int((~zero).sum())
        assert np.all(np.abs(grad[zero]) <= t + 1e-10 * (1.0 + t))
        # stationarity of the surviving coordinates, much looser: mode
        # alternation converges slowly along the CP scale-indeterminacy
        # direction, leaving each mode's gradient slightly stale
        assert np.all(np.abs(grad[~zero] - t * np.sign(b[~zero])) <= 1e-3)
    assert n_zero > 0 and n_nonzero > 0


def test_fit_rejects_bad_args():
    data = TensorDataset(np.eye(2), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        block_relaxation_fit(data, np.zeros(2), 0, 0.1)
    with pytest.raises(ValueError):
        block_relaxation_fit(data, np.zeros(2), 1, -0.1)
    with pytest.raises(ValueError):
        block_relaxation_fit(data, np.zeros(3), 1, 0.1)


# ------------------------------------------------------------------- sigma_mle

def test_sigma_mle_zero_residual_floors_with_warning():
    # y = 0 with a positive penalty: the all-zero factors interpolate exactly
    rng = np.random.default_rng(10)
    X = rng.standard_normal((10, 3, 3))
    data = TensorDataset(X, np.zeros(10))
    with pytest.warns(UserWarning, match="zero residual"):
        sig = sigma_mle(data, 2, 1.0, stream=RandomStream(0, 0))
    assert sig == np.finfo(float).eps


def test_sigma_mle_constant_zero_model():
    rng = np.random.default_rng(11)
    X = rng.standard_normal((3, 2, 2))
    y = np.array([1.0, 2.0, 2.0])
    sig = sigma_mle(TensorDataset(X, y), 2, 1e9, stream=RandomStream(0, 0))
    assert sig == pytest.approx(np.sqrt(np.mean(y**2)), abs=1e-12)


def test_sigma_mle_monte_carlo_recovery():
    # 32x32 predictors, n = 400, sigma^2 = 0.5, low-rank sparse coefficient
    rng = np.random.default_rng(12)
    B = np.zeros((32, 32))
    for lo, hi in ((2, 10), (12, 22), (24, 31)):
        u = np.zeros(32)
        v = np.zeros(32)
        u[lo:hi] = rng.normal(0.0, 1.0, hi - lo)
        v[lo:hi] = rng.normal(0.0, 1.0, hi - lo)
        B += np.outer(u, v)
    sigma = np.sqrt(0.5)
    cfg = {"tol": 1e-6, "max_cycles": 60}
    est = []
    for rep in range(20):
        data = _make_data(rng, (32, 32), 400, B, sigma)
        est.append(sigma_mle(data, 4, 100.0, cfg=cfg, stream=RandomStream(13, rep)))
    assert abs(np.mean(est) - sigma) <= 0.15 * sigma


def test_sigma_mle_requires_n_above_one():
    with pytest.raises(ValueError):
        sigma_mle(TensorDataset(np.ones((1, 2)), np.ones(1)), 1, 0.1)


# ----------------------------------------------------------- model and hessian

def _theta(flat, dims, R):
    flat = np.asarray(flat, dtype=float)
    return ParameterPoint(flat, flat != 0.0, ("tr", tuple(dims), R))


def test_hessian_scalar_hand_case():
    # p = (1, 1), R = 1, theta = (a, b) = (2, 3), X = (1, 2), y = (7, 13):
    # residuals are (1, 1), sum r_i X_i = 3, and
    # H = [[b^2 S, ab S - 3], [ab S - 3, a^2 S]] with S = sum X_i^2 = 5
    data = TensorDataset(np.array([[[1.0]], [[2.0]]]), np.array([7.0, 13.0]))
    model = TensorModel(1)
    theta = _theta([2.0, 3.0], (1, 1), 1)
    H = model.hessian(data, np.zeros(2), theta)
    assert_allclose(H, [[45.0, 27.0], [27.0, 20.0]], atol=1e-12)
    H_gn = model.hessian(data, np.zeros(2), theta, gauss_newton_only=True)
    assert_allclose(H_gn, [[45.0, 30.0], [30.0, 20.0]], atol=1e-12)


def test_hessian_matches_finite_differences():
    rng = np.random.default_rng(13)
    dims, R, n = (3, 3), 2, 12
    truth = _random_factors(rng, dims, R)
    data = _make_data(rng, dims, n, cp_compose(truth), 0.5)
    u = rng.normal(0.0, 0.3, n)
    model = TensorModel(R)
    flat = rng.standard_normal(R * sum(dims))
    theta = _theta(flat, dims, R)
    H = model.hessian(data, u, theta)

    def grad(fl):
        th = theta.replace_flat(fl)
        J = model.predict_gradient(data, th)
        return -J.T @ (data.y - model.predict(data, th) - u)

    k = flat.size
    fd = np.zeros((k, k))
    h = 1e-6
    for j in range(k):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        fd[:, j] = (grad(up) - grad(dn)) / (2 * h)
    assert np.linalg.norm(H - fd) / np.linalg.norm(fd) < 1e-4
    # the gauss-newton variant drops exactly the residual-curvature part
    J = model.predict_gradient(data, theta)
    assert_allclose(model.hessian(data, u, theta, gauss_newton_only=True), J.T @ J,
                    atol=1e-10)


def test_hessian_restriction_matches_full_submatrix():
    rng = np.random.default_rng(14)
    dims, R, n = (3, 2), 2, 10
    data = _make_data(rng, dims, n, cp_compose(_random_factors(rng, dims, R)), 0.3)
    model = TensorModel(R)
    flat = rng.standard_normal(R * sum(dims))
    flat[[1, 4, 7]] = 0.0
    keep = np.flatnonzero(flat != 0.0)
    restricted = model.hessian(data, np.zeros(n), _theta(flat, dims, R))
    all_active = ParameterPoint(flat, np.ones(flat.size, bool), ("tr", dims, R))
    full = model.hessian(data, np.zeros(n), all_active)
    assert restricted.shape == (keep.size, keep.size)
    assert_allclose(restricted, full[np.ix_(keep, keep)], atol=1e-12)


def test_debias_unshrinks_active_coordinate_to_ols():
    # identity design, lam = 1: theta* = (2.5, 0); debiasing the active
    # coordinate adds pinv(H) @ (lam/2) sign = 0.5, landing on the OLS value 3
    data = TensorDataset(np.eye(2), np.array([3.0, -0.5]))
    model = TensorModel(1)
    cfg = GfiConfig(m=2, c=0.05, lam=1.0, sigma=1.0, seed=0)
    theta_star = model.fit(data, np.zeros(2), 1.0, {}, RandomStream(0, 1))
    assert_allclose(theta_star.flat, [2.5, 0.0], atol=1e-12)
    theta_de = model.debias(data, np.zeros(2), theta_star, cfg)
    assert_allclose(theta_de.flat, [3.0, 0.0], atol=1e-10)
    assert theta_de.flat[1] == 0.0


def test_model_fit_wraps_solver_errors():
    data = TensorDataset(np.eye(2), np.array([1.0, 2.0]))
    model = TensorModel(1)
    with pytest.raises(SolverFailure):
        model.fit(data, np.array([np.nan, 0.0]), 0.1, {}, RandomStream(0, 1))


def test_model_estimate_sigma_delegates_to_mle():
    rng = np.random.default_rng(15)
    dims, R = (4, 3), 2
    data = _make_data(rng, dims, 50, cp_compose(_random_factors(rng, dims, R)), 0.4)
    cfg = GfiConfig(m=4, lam=0.6, seed=3)
    model = TensorModel(R)
    direct = sigma_mle(data, R, 0.6, cfg=cfg.solver_cfg, stream=RandomStream(3, 0))
    assert model.estimate_sigma(data, cfg, RandomStream(3, 0)) == direct


def test_run_fiducial_end_to_end():
    rng = np.random.default_rng(16)
    dims, R, n = (4, 4), 2, 80
    truth = CpFactors((np.array([[2.0, 0.0], [0.0, 1.0], [1.5, 0.0], [0.0, 0.0]]),
                       np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 2.0], [1.0, 0.0]])))
    data = _make_data(rng, dims, n, cp_compose(truth), 0.5)
    model = TensorModel(R)
    cfg = GfiConfig(m=12, c=0.05, lam=1.0, sigma=0.5, seed=21)
    sample = run_fiducial(model, data, cfg)
    assert len(sample.accepted_draws()) >= 2
    for d in sample.draws:
        if d.failed:
            continue
        zero = d.theta_star.flat == 0.0
        assert np.all(d.theta_de.flat[zero] == 0.0)
    again = run_fiducial(model, data, cfg)
    assert np.array_equal(sample.theta_de_matrix(), again.theta_de_matrix())
