from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import approx_fprime
from scipy.special import expit

from enrollcast.errors import DataError
from enrollcast.models.glm import GLMModel, fit_hurdle, fit_zip, truncated_nb_negll


def zip_sample(n, pi, lam, seed):
    rng = np.random.default_rng(seed)
    y = rng.poisson(lam, size=n).astype(float)
    y[rng.random(n) < pi] = 0.0
    return y


def test_zip_intercept_recovery():
    y = zip_sample(20_000, 0.3, 2.0, seed=0)
    m = fit_zip(np.empty((y.size, 0)), y)
    pi, lam = expit(m.zero_coef[0]), np.exp(m.count_coef[0])
    assert abs(pi - 0.3) < 0.03 and abs(lam - 2.0) < 0.06
    assert m.converged and not m.flags


@pytest.mark.parametrize("accelerate", [True, False])
def test_zip_loglik_non_decreasing(accelerate):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3000, 2))
    lam = np.exp(0.3 + 0.5 * X[:, 0])
    y = rng.poisson(lam).astype(float)
    y[rng.random(3000) < expit(-1 + X[:, 1])] = 0
    m = fit_zip(X, y, accelerate=accelerate, max_iter=300)
    assert np.all(np.diff(m.loglik_trace) >= -1e-9)
    assert m.converged
    assert m.count_coef[1] == pytest.approx(0.5, abs=0.1)
    assert m.zero_coef[2] == pytest.approx(1.0, abs=0.3)


def test_zip_accelerated_matches_plain_em():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(2000, 1))
    y = zip_sample(2000, 0.25, 1.5, seed=12)
    fast = fit_zip(X, y, tol=1e-10, max_iter=2000)
    slow = fit_zip(X, y, tol=1e-10, max_iter=2000, accelerate=False)
    assert fast.loglik >= slow.loglik - 1e-4
    assert fast.iterations < slow.iterations


def test_zip_no_zeros_clamps():
    y = np.random.default_rng(2).poisson(6.0, size=2000).astype(float) + 1
    m = fit_zip(np.empty((2000, 0)), y, max_iter=500)
    assert expit(m.zero_coef[0]) < 1e-3
    assert m.predict(np.empty((1, 0)))[0] == pytest.approx(y.mean(), rel=1e-2)


def test_zip_rejects_bad_targets():
    with pytest.raises(DataError):
        fit_zip(np.empty((3, 0)), np.array([0.0, 1.5, 2.0]))
    with pytest.raises(DataError, match="missing"):
        fit_zip(np.array([[np.nan], [1.0]]), np.array([0.0, 1.0]))


def test_predict_zip_row():
    m = GLMModel("zip", np.array([np.log(0.25 / 0.75)]), np.array([np.log(2.0)]))
    assert m.predict(np.empty((1, 0)))[0] == pytest.approx(1.5, abs=1e-12)
    rng = np.random.default_rng(3)
    m2 = GLMModel("zip", rng.normal(size=4), rng.normal(size=4))
    assert np.all(m2.predict(rng.normal(size=(500, 3)) * 20) >= 0)


def test_hurdle_mean():
    m = GLMModel("hurdle", np.array([0.0]), np.array([0.0]))
    assert m.predict(np.empty((1, 0)))[0] == pytest.approx(0.790989, abs=1e-6)


def test_hurdle_recovers_zero_fraction():
    y = zip_sample(20_000, 0.3, 2.0, seed=4)
    m = fit_hurdle(np.empty((y.size, 0)), y, "poisson")
    pi_hat = m.count_params(np.empty((1, 0))).pi[0]
    assert abs(pi_hat - np.mean(y == 0)) < 0.02
    assert abs(pi_hat - (0.3 + 0.7 * np.exp(-2.0))) < 0.02
    assert np.exp(m.count_coef[0]) == pytest.approx(2.0, abs=0.06)


def test_hurdle_all_positive():
    y = np.random.default_rng(5).poisson(3.0, size=3000).astype(float) + 1
    m = fit_hurdle(np.empty((3000, 0)), y)
    cp = m.count_params(np.empty((1, 0)))
    assert cp.pi[0] < 1e-6
    assert m.predict(np.empty((1, 0)))[0] == pytest.approx(y.mean(), rel=1e-3)


def test_hurdle_no_positives():
    with pytest.raises(DataError, match="no positive"):
        fit_hurdle(np.empty((4, 0)), np.zeros(4))


def test_hurdle_separation_falls_back_to_ridge():
    x = np.linspace(-1, 1, 200)
    y = np.where(x > 0, 2.0, 0.0)
    y[x > 0.5] = 1.0
    m = fit_hurdle(x[:, None], y)
    assert "separation_ridge" in m.flags
    assert np.all(np.isfinite(m.zero_coef))


def test_truncated_nb_gradient():
    rng = np.random.default_rng(6)
    X = np.hstack([np.ones((50, 1)), rng.normal(size=(50, 2))])
    y = rng.integers(1, 8, size=50).astype(float)
    theta = np.array([0.2, -0.1, 0.3, np.log(1.7)])
    f = lambda t: truncated_nb_negll(t, X, y, np.zeros(50))[0]  # noqa: E731
    num = approx_fprime(theta, f, 1e-7)
    ana = truncated_nb_negll(theta, X, y, np.zeros(50))[1]
    np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-5)


def test_hurdle_negbin_overdispersed():
    rng = np.random.default_rng(7)
    n = 20_000
    y = rng.negative_binomial(1.5, 1.5 / (1.5 + 3.0), size=n).astype(float)
    m = fit_hurdle(np.empty((n, 0)), y, "negative_binomial")
    assert m.count_family == "negative_binomial"
    assert m.r == pytest.approx(1.5, rel=0.15)
    p = fit_hurdle(np.empty((n, 0)), y, "poisson")
    assert m.loglik > p.loglik


def test_hurdle_negbin_near_poisson():
    y = np.random.default_rng(8).poisson(2.0, size=5000).astype(float)
    m = fit_hurdle(np.empty((5000, 0)), y, "negative_binomial")
    assert m.count_family == "negative_binomial" and m.r > 50


def test_hurdle_negbin_underdispersed_falls_back():
    y = np.r_[np.zeros(100), np.full(300, 2.0), np.full(300, 3.0)]
    m = fit_hurdle(np.empty((y.size, 0)), y, "negative_binomial")
    assert m.count_family == "poisson" and m.r is None
    assert "nb_poisson_fallback" in m.flags


def test_roundtrip_dict():
    y = zip_sample(2000, 0.3, 2.0, seed=9)
    m = fit_zip(np.random.default_rng(9).normal(size=(2000, 1)), y)
    back = GLMModel.from_dict(m.to_dict())
    assert back.fingerprint() == m.fingerprint()
