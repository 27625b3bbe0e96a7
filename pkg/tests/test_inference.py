import math

import numpy as np
import pytest

from damlab.design import ModelSpec
from damlab.diagnostics import ess, split_rhat
from damlab.effect_coding import coding_integer_enactment
from damlab.inference import (
    McmcOptions,
    Posterior,
    Priors,
    diagnostics,
    fit_bayes,
    fit_mle,
    format_rr,
    summarize_rr,
)
from damlab.nb_models import simulate_nb

from conftest import make_panel

LOG_RATE = math.log(1e-4)


def simulated(n, t1, seed, delta=0.8, rr=(0.95, 0.95), phi=60.0, year_effects=False):
    rng = np.random.default_rng(seed)
    exposure = np.exp(rng.uniform(math.log(5e5), math.log(3e7), size=(n, 1))) * np.ones((1, t1))
    base = make_panel(n, t1, rng, treated_frac=0.3, exposure=exposure,
                      counts=np.maximum(rng.poisson(exposure * 1e-4), 1))
    spec = ModelSpec(family="nb-dam", p=1, b=5, year_effects=year_effects)
    theta = np.array([LOG_RATE * (1 - delta), delta, math.log(rr[0]), math.log(rr[1]), phi])
    return simulate_nb(base, spec, theta, rng), spec, theta


@pytest.fixture(scope="module")
def big():
    return simulated(50, 37, 101)


@pytest.fixture(scope="module")
def big_fit(big):
    panel, spec, _ = big
    return fit_mle(panel, spec)


def test_mle_recovers_truth(big, big_fit):
    _, _, theta = big
    z = (big_fit.estimates - theta) / big_fit.se
    assert np.all(np.abs(z) < 3), dict(zip(big_fit.names, z))
    assert big_fit.meta["hessian_pd"]
    cov = big_fit.cov
    np.testing.assert_allclose(cov, cov.T, atol=0)
    assert np.all(np.linalg.eigvalsh(cov) > -1e-14)


def test_duplicated_units_shrink_standard_errors(big, big_fit):
    panel, spec, _ = big
    n = panel.n_units
    doubled = panel.subset_units(list(range(n)) * 2)
    doubled = type(panel)(
        units=tuple(f"{u}{k}" for k in "ab" for u in panel.units),
        times=panel.times, counts=doubled.counts, exposure=doubled.exposure,
        schedules=doubled.schedules, covariates=doubled.covariates, covariate_names=panel.covariate_names,
    )
    f2 = fit_mle(doubled, spec)
    np.testing.assert_allclose(f2.estimates, big_fit.estimates, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(f2.se / big_fit.se, 1 / math.sqrt(2), rtol=1e-3)


def test_unit_permutation_invariance(big, big_fit):
    panel, spec, _ = big
    perm = np.random.default_rng(5).permutation(panel.n_units)
    f2 = fit_mle(panel.subset_units(perm), spec)
    np.testing.assert_allclose(f2.estimates, big_fit.estimates, rtol=1e-6, atol=1e-7)


def test_wald_summary(big_fit):
    c = coding_integer_enactment(5, 6)
    point, lo, hi = summarize_rr(big_fit, c, 5)
    assert point == pytest.approx(math.exp(big_fit["beta0"] + big_fit["beta1"]), rel=1e-12)
    se = math.sqrt(np.array([1, 1]) @ big_fit.cov[2:4, 2:4] @ np.array([1, 1]))
    assert lo == pytest.approx(point * math.exp(-1.959963984540054 * se), rel=1e-9)
    assert hi == pytest.approx(point * math.exp(1.959963984540054 * se), rel=1e-9)


def test_rr_string_format():
    assert format_rr(0.93, 0.868, 0.997) == "0.930 (0.868–0.997)"


def fake_posterior(draws, names=("alpha", "delta1", "beta0", "beta1", "phi")):
    draws = np.asarray(draws, dtype=float)
    k = draws.shape[2]
    return Posterior(names=tuple(names), draws=draws, rhat=np.ones(k), ess=np.ones(k),
                     acceptance=np.ones((draws.shape[0], k)), seed=0, converged=True)


def test_posterior_summaries():
    c = coding_integer_enactment(5, 6)
    rng = np.random.default_rng(1)
    d = rng.normal(0, 0.05, size=(4, 500, 5))
    point, lo, hi = summarize_rr(fake_posterior(d), c, 5)
    assert lo < 1 < hi
    const = np.tile([-5.0, 0.5, math.log(0.95), math.log(0.95), 60.0], (2, 100, 1))
    point, lo, hi = summarize_rr(fake_posterior(const), c, 5)
    assert point == lo == hi == pytest.approx(0.9025, abs=1e-12)


def test_rhat_examples():
    rng = np.random.default_rng(2)
    x = rng.normal(size=1000)
    assert split_rhat(np.stack([x, x, x, x])) == pytest.approx(1.0, abs=0.01)
    assert split_rhat(np.full((4, 100), 3.0)) == 1.0
    stuck = rng.normal(size=(4, 1000))
    stuck[0] += 5
    assert split_rhat(stuck) > 1.5
    trend = np.tile(np.linspace(0, 10, 1000), (4, 1)) + rng.normal(size=(4, 1000))
    assert split_rhat(trend) > 1.5


def test_rhat_without_between_chain_spread():
    # split halves identical across chains: between-chain variance is exactly zero
    x = np.random.default_rng(3).normal(size=50)
    chains = np.tile(np.concatenate([x, x]), (4, 1))
    B = 50 * np.var(np.mean(np.concatenate([chains[:, :50], chains[:, 50:]]), axis=1), ddof=1)
    assert B == 0
    assert split_rhat(chains) == pytest.approx(math.sqrt(49 / 50), abs=1e-15)


def test_ess_white_noise():
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = rng.normal(size=(4, 1000))
        assert abs(ess(x) / 4000 - 1) < 0.2


def test_ess_ar1_matches_theory():
    rng = np.random.default_rng(5)
    rho = 0.9
    n = 20000
    x = np.empty((4, n))
    x[:, 0] = rng.normal(size=4)
    e = rng.normal(size=(4, n)) * math.sqrt(1 - rho**2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    # integrated autocorrelation time (1 + rho) / (1 - rho) = 19
    assert ess(x) == pytest.approx(4 * n / 19, rel=0.15)


def test_priors_validate():
    with pytest.raises(ValueError):
        Priors(alpha=(0.0, 0.0))
    with pytest.raises(ValueError):
        McmcOptions(delta_scale="probit")


@pytest.fixture(scope="module")
def small():
    return simulated(20, 12, 202, delta=0.6, rr=(0.95, 0.95))


@pytest.fixture(scope="module")
def small_post(small):
    panel, spec, _ = small
    return fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=600, seed=11))


def test_bayes_support_and_shape(small_post):
    d = small_post.draws
    assert d.shape == (2, 300, 5)
    assert np.all((d[:, :, 1] >= 0) & (d[:, :, 1] <= 1))
    assert np.all(d[:, :, 4] > 0)
    diag = diagnostics(small_post)
    assert set(diag["rhat"]) == set(small_post.names)
    assert np.all((small_post.acceptance > 0.05) & (small_post.acceptance < 0.95))


def test_bayes_deterministic(small, small_post):
    panel, spec, _ = small
    again = fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=600, seed=11))
    assert np.array_equal(again.draws, small_post.draws)
    par = fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=600, seed=11, workers=2))
    assert np.array_equal(par.draws, small_post.draws)
    other = fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=600, seed=12))
    assert not np.array_equal(other.draws, small_post.draws)


def test_bayes_logit_scale_agrees(small, small_post):
    panel, spec, _ = small
    post = fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=1200, seed=13, delta_scale="logit"))
    assert np.all((post.draws[:, :, 1] > 0) & (post.draws[:, :, 1] < 1))
    for name in ("delta1", "beta0", "beta1"):
        a, b = post.param(name), small_post.param(name)
        assert abs(np.median(a) - np.median(b)) < 0.5 * np.std(b) + 0.02


def test_bayes_without_mle_covariance(small):
    panel, spec, _ = small
    from damlab.results import FitResult

    mle = fit_mle(panel, spec)
    no_cov = FitResult(**{**mle.__dict__, "cov": None})
    post = fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=1000, seed=14), mle=no_cov)
    assert np.all((post.draws[:, :, 1] >= 0) & (post.draws[:, :, 1] <= 1))
    assert abs(np.median(post.param("delta1")) - mle["delta1"]) < 0.1


def test_nonconvergence_is_flagged(small):
    panel, spec, _ = small
    post = fit_bayes(panel, spec, opts=McmcOptions(chains=4, iter=40, seed=15, init_scale=8.0, rhat_threshold=1.0001))
    assert post.converged is False


def test_bayes_rejects_bad_options(small):
    panel, spec, _ = small
    with pytest.raises(ValueError):
        fit_bayes(panel, spec, opts=McmcOptions(chains=1))
    with pytest.raises(ValueError):
        fit_bayes(panel, spec, opts=McmcOptions(chains=2, iter=100, warmup=100))
