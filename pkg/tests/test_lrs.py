import numpy as np
import pytest

from cptar.als import AlsConfig, als_fit, ar_data
from cptar.factor import TensorSeries, assemble_coef
from cptar.lrs import (LrsConfig, SparseCoef, default_alpha, kkt_violation, lambda_max,
                       lasso_cd, lasso_gradient, lasso_step, lrs_fit, penalized_objective,
                       trim, trim_level)
from cptar.simulation import DgpSpec, draw_coefficients, simulate_series

import oracles


def white(rng, T=80, dims=(2, 2)):
    return TensorSeries(rng.standard_normal((T,) + dims))


def test_trim():
    np.testing.assert_array_equal(trim([0.7, -0.3, -0.6], 0.5), [0.5, -0.3, -0.5])
    t = np.random.default_rng(0).standard_normal(10)
    np.testing.assert_array_equal(trim(t, np.inf), t)
    np.testing.assert_array_equal(trim(t, np.max(np.abs(t))), t)
    np.testing.assert_array_equal(trim(trim(t, 0.3), 0.3), trim(t, 0.3))
    assert np.max(np.abs(trim(t, 0.3))) <= 0.3
    with pytest.raises(ValueError):
        trim(t, -1.0)


def test_trim_level_default():
    assert default_alpha(2, 8) == pytest.approx(np.sqrt(2) * 8)
    assert trim_level(default_alpha(2, 8), 2, 8) == pytest.approx(np.sqrt(2) * 8 / 128)


def test_sparse_coef_round_trip():
    rng = np.random.default_rng(1)
    m = np.where(rng.random((6, 12)) < 0.2, rng.standard_normal((6, 12)), 0.0)
    s = SparseCoef.from_matrix(m, (2, 3), 2)
    np.testing.assert_array_equal(s.to_matrix(), m)
    assert s.support_size() == np.count_nonzero(m)
    assert s.shape == (2, 3, 2, 2, 3)
    with pytest.raises(IndexError):
        SparseCoef((2, 3), 2, {(0, 0, 2, 0, 0): 1.0})
    assert len(SparseCoef((2,), 1, {(0, 0, 1): 0.0})) == 0


def test_scalar_soft_threshold_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.standard_normal(50)
        y = 0.4 * x + rng.standard_normal(50)
        lam = rng.uniform(0.01, 1.0)
        corr = np.array([[y @ x / 50]])
        gram = np.array([[x @ x / 50]])
        a, _ = lasso_cd(corr, gram, lam)
        z = corr[0, 0]
        expect = np.sign(z) * max(abs(z) - lam / 2, 0.0) / gram[0, 0]
        assert a[0, 0] == pytest.approx(expect, abs=1e-14)


def test_lambda_max_kills_everything():
    rng = np.random.default_rng(3)
    s = white(rng)
    lam = lambda_max(s, 1)
    assert len(lasso_step(s, 1, np.zeros((4, 4)), lam * 1.0001)) == 0
    assert len(lasso_step(s, 1, np.zeros((4, 4)), lam * 0.9)) > 0


def test_small_lambda_approaches_ols():
    rng = np.random.default_rng(4)
    s = white(rng, T=3000)
    data = ar_data(s, 1)
    x, y = data.covariate_rows(), data.response_rows()
    low = 0.05 * rng.standard_normal((4, 4))
    ols = np.linalg.lstsq(x, y - x @ low.T, rcond=None)[0].T
    est = lasso_step(s, 1, low, 1e-7).to_matrix()
    np.testing.assert_allclose(est, ols, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_lasso_step_kkt(seed):
    rng = np.random.default_rng(seed)
    s = white(rng, T=40, dims=(2, 3))
    low = 0.1 * rng.standard_normal((6, 12))
    lam = rng.uniform(0.05, 0.5) * lambda_max(s, 2, low)
    est = lasso_step(s, 2, low, lam)
    grad = lasso_gradient(s, 2, low, est)
    assert kkt_violation(grad, est.to_matrix(), lam) <= 1e-6


def test_penalized_objective():
    rng = np.random.default_rng(5)
    s = white(rng, T=10)
    obj = penalized_objective(np.zeros((4, 8)), None, s, 2, 0.3)
    assert obj.penalty == 0
    assert obj.loss == pytest.approx(oracles.naive_loss(np.zeros((4, 8)), s.data, 2))
    low = 0.01 * rng.standard_normal((4, 8))
    sp = np.zeros((4, 8))
    sp[1, 3], sp[2, 5] = 0.5, -0.2
    obj = penalized_objective(low, SparseCoef.from_matrix(sp, (2, 2), 2), s, 2, 0.3)
    assert obj.loss == pytest.approx(oracles.naive_loss(low + sp, s.data, 2))
    assert obj.penalty == pytest.approx(0.3 * 0.7)
    assert obj.value == pytest.approx(obj.loss + obj.penalty)
    assert obj.constraint_satisfied
    same = penalized_objective(low, SparseCoef((2, 2), 2, {(0, 0, 0, 1, 1): 0.0}), s, 2, 0.3)
    assert same.value == pytest.approx(penalized_objective(low, None, s, 2, 0.3).value)
    assert not penalized_objective(np.ones((4, 8)), None, s, 2, 0.3).constraint_satisfied


def test_lrs_large_lambda_reduces_to_als():
    rng = np.random.default_rng(6)
    spec = DgpSpec(dims=(3, 3), P=1, R_y=2, R_x=1)
    low, _ = draw_coefficients(spec, rng)
    s = simulate_series(spec, low, 300, rng)
    cfg = AlsConfig(rng_seed=11)
    lam = 10 * lambda_max(s, 1)
    l_est, s_est, rep = lrs_fit(s, 1, 2, 1, LrsConfig(lam=lam, als_config=cfg))
    a_est, _ = als_fit(s, 1, 2, 1, cfg)
    assert len(s_est) == 0
    assert np.linalg.norm(assemble_coef(l_est) - assemble_coef(a_est)) <= 1e-6
    assert rep.converged


def test_lrs_objective_trace_non_increasing():
    rng = np.random.default_rng(7)
    spec = DgpSpec(dims=(3, 3), P=1, R_y=2, R_x=1, sparse_support_size=5,
                   alpha_L=default_alpha(1, 9), target_coef_norm=0.6)
    low, sp = draw_coefficients(spec, rng)
    s = simulate_series(spec, low, 400, rng, sparse=sp)
    _, s_est, rep = lrs_fit(s, 1, 2, 1, LrsConfig(lam=0.05, alpha_L=spec.alpha_L))
    assert rep.outer_iterations >= 1
    assert s_est.support_size() > 0
    assert rep.objective_trace[-1] <= rep.objective_trace[0] + 1e-8


@pytest.mark.slow
def test_pure_sparse_model_goes_to_sparse_part():
    shares = []
    for rep in range(50):
        rng = np.random.default_rng([99, rep])
        spec = DgpSpec(dims=(4, 4, 4), P=1, R_y=1, R_x=1, sparse_support_size=20,
                       alpha_L=1e-3, target_coef_norm=0.6)
        low, sp = draw_coefficients(spec, rng)
        low = low.with_core(np.zeros_like(low.core))
        sp_mat = sp.to_matrix() * 0.6 / np.linalg.norm(sp.to_matrix())
        sp = SparseCoef.from_matrix(sp_mat, spec.dims, 1)
        s = simulate_series(spec, low, 1000, rng, sparse=sp)
        cfg = LrsConfig(lam=np.sqrt(np.log(64 ** 2) / 999), alpha_L=1e-3,
                        als_config=AlsConfig(rng_seed=rep))
        l_est, s_est, _ = lrs_fit(s, 1, 1, 1, cfg)
        a_s = s_est.to_matrix()
        shares.append(np.sum(a_s ** 2) / np.sum((a_s + assemble_coef(l_est)) ** 2))
    assert np.median(shares) >= 0.9
