"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Runtime is dominated by the two 500-replication studies and the sampler
checks (about 7 minutes on one core).
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from damlab.design import ModelSpec, build_design, policy_columns
from damlab.effect_coding import coding_integer_enactment, coding_partial_year, effect_curve
from damlab.inference import McmcOptions, Priors, fit_bayes, fit_mle, summarize_rr
from damlab.linear_dam import LinearDamParams, fit_linear_dam, simulate_linear_dam
from damlab.nb_models import NbObjective, NbParams, approx_effect, marginal_effect_oracle, simulate_nb
from damlab.simharness import (
    BaseConfig,
    StudyConfig,
    assign_treatment,
    inject_effect,
    pooled_autocorr,
    run_study,
    study_specs,
    synth_base_panel,
    write_outputs,
)

from conftest import make_panel, record_acceptance
from test_effect_coding import ramp_average
from test_linear_dam import first_difference_oracle, forward, simulate_panel, twfe_oracle

pytestmark = pytest.mark.acceptance

B = 5


@pytest.fixture(scope="module")
def base():
    return synth_base_panel(BaseConfig())


@pytest.fixture(scope="module")
def null_study(base):
    return run_study(StudyConfig(cells=((1.0, 1.0),), replications=500, seed=0), base=base)


@pytest.fixture(scope="module")
def effect_study(base):
    return run_study(StudyConfig(cells=((0.95, 0.95),), replications=500, seed=0), base=base)


def at_total(metrics, name):
    row = metrics[(metrics.estimator == name) & (metrics.horizon == B)]
    assert len(row) == 1
    return row.iloc[0]


def test_criterion_01_effect_coding_oracle():
    start = time.perf_counter()
    worst = 0.0
    exact = True
    for t_e in (0.0, 0.25, 0.5, 0.99):
        for b in (1, 5):
            c = coding_partial_year(t_e, b, b + 2)
            for t in range(b + 3):
                worst = max(worst, abs(c.w1[t] - ramp_average(t, t_e, b)))
            if t_e == 0.0:
                # recursion: w_0 = 1/(2b), increments 1/b, then w_b = 1
                rec = [1 / (2 * b)]
                for t in range(1, b + 3):
                    rec.append(min(rec[-1] + 1 / b, 1.0) if t < b else 1.0)
                exact &= np.array_equal(c.w1, coding_integer_enactment(b, b + 2).w1)
                exact &= np.allclose(c.w1, rec, rtol=0, atol=1e-15)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and exact and elapsed < 1.0
    record_acceptance(1, ok, f"max |w1 - quad| = {worst:.2e}, t_e=0 recursion exact: {exact}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_total_effect_identity():
    ok = True
    for b in (1, 2, 3, 5, 8, 12):
        c = coding_partial_year(0.0, b, b + 2)
        ok &= c.w1[b] == 1.0
        b0, b1 = math.log(0.93), math.log(0.88)
        ok &= effect_curve(b0, b1, c).log_rr[b] == b0 + b1
    record_acceptance(2, bool(ok), "w1[b] == 1 and log RR_b == beta0 + beta1 exactly for b in 1..12")
    assert ok


def test_criterion_03_linear_dam_closed_form():
    rng = np.random.default_rng(30)
    worst_diff = 0.0
    T1, enact = 24, 6
    for delta in ([0.3], [0.8], [0.5, 0.3], [0.99]):
        for t_e in (0.0, 0.5):
            c = coding_partial_year(t_e, B, 30)
            Z = np.column_stack(c.weights(np.arange(T1) - enact))
            beta = np.array([math.log(0.9), math.log(0.85)])
            X2 = rng.normal(size=(T1, 1))
            params = LinearDamParams(alpha=0.4, delta=delta, theta=beta, gamma2=[0.2])
            y0 = rng.normal(size=len(delta))
            diff = simulate_linear_dam(params, y0, Z, X2=X2) - simulate_linear_dam(params, y0, 0 * Z, X2=X2)
            worst_diff = max(worst_diff, np.max(np.abs(diff[len(delta):] - (Z @ beta)[len(delta):])))

    worst_fit = 0.0
    for p, delta in ((1, [0.6]), (2, [0.5, 0.25])):
        panel = make_panel(30, 14, rng, treated_frac=0.6, covariates=2)
        spec = ModelSpec(family="linear-dam", p=p, b=3, x1=("x1",), x2=("x2",), year_effects=True)
        design = build_design(panel, spec)
        g2 = np.concatenate([[0.4], rng.normal(scale=0.3, size=design.k2 - 1)])
        theta = np.array([-0.3, 0.5])
        Z, _ = policy_columns(panel, spec)
        Y = np.stack([
            forward(1.2, delta, theta, [0.8], g2, Z[i], panel.covariate(["x1"])[i], design.X2[i],
                    rng.normal(size=p), np.zeros(panel.n_periods))
            for i in range(panel.n_units)
        ])
        fit = fit_linear_dam(panel, spec, outcome=Y)
        truth = np.concatenate([[1.2], delta, theta, [0.8], g2])
        worst_fit = max(worst_fit, np.max(np.abs(fit.estimates - truth)))
    ok = worst_diff < 1e-10 and worst_fit < 1e-6
    record_acceptance(3, ok, f"max |diff - f_t| = {worst_diff:.2e}, max NLS error = {worst_fit:.2e}")
    assert ok


def test_criterion_04_special_case_reductions():
    rng = np.random.default_rng(40)
    panel = make_panel(40, 12, rng, treated_frac=0.6)
    spec = ModelSpec(family="linear-dam", p=1, b=4, year_effects=False, fixed={"delta1": 1.0})
    Y = simulate_panel(panel, spec, 0.2, [0.7], np.array([0.5, -0.3]), [], [], 1.0, rng)
    fit = fit_linear_dam(panel, spec, outcome=Y)
    est = fit.estimates[[fit.index("alpha"), fit.index("beta0"), fit.index("beta1")]]
    fd = np.max(np.abs(est - first_difference_oracle(panel, spec, Y)))

    panel = make_panel(25, 10, rng, treated_frac=0.6)
    spec = ModelSpec(family="linear-dam", p=1, b=3, year_effects=True, unit_effects=True, fixed={"delta1": 0.0})
    Y = simulate_panel(panel, spec, 0.0, [0.5], np.array([0.5, 0.8]), [], [], 1.0, rng)
    Y += rng.normal(size=(panel.n_units, 1)) + rng.normal(size=(1, panel.n_periods))
    fit = fit_linear_dam(panel, spec, outcome=Y)
    est = fit.estimates[[fit.index("beta0"), fit.index("beta1")]]
    fe = np.max(np.abs(est - twfe_oracle(panel, spec, Y)))
    ok = fd < 1e-8 and fe < 1e-8
    record_acceptance(4, ok, f"delta=1 vs first differences {fd:.2e}, delta=0 vs two-way FE {fe:.2e}")
    assert ok


def test_criterion_05_approximation_vs_oracle():
    start = time.perf_counter()
    spec = ModelSpec(family="nb-dam", p=1, b=B)
    coding = coding_integer_enactment(B, B + 1)
    worst = 0.0
    for k, rr in enumerate((0.9, 0.95, 1.05, 1.1)):
        for j, delta in enumerate((0.5, 0.8)):
            params = NbParams(alpha=math.log(1e-4) * (1 - delta), delta=[delta],
                              beta0=math.log(rr), beta1=math.log(rr), phi=50.0)
            res = marginal_effect_oracle(params, spec, horizon=B, mc_draws=100_000, seed=100 + 10 * k + j)
            for t in (0, B):
                z = abs(res.rr[t] - approx_effect(params, coding, t)) / res.se[t]
                worst = max(worst, float(z))
    elapsed = time.perf_counter() - start
    ok = worst < 3 and elapsed < 120
    record_acceptance(5, ok, f"max |approx - oracle| / MC SE = {worst:.2f}, {elapsed:.0f}s")
    assert ok


def test_criterion_06_null_study(base, null_study):
    m = null_study.metrics
    parts, ok = [], True
    for name in ("nb-dam1", "nb-dam2"):
        row = at_total(m, name)
        good = abs(row.bias) < 0.01 and 0.03 <= row.rejection <= 0.10 and row.n_failed == 0
        ok &= bool(good)
        parts.append(f"{name} bias {row.bias:+.4f} type I {row.rejection:.3f}")
    detail = f"autocorr {pooled_autocorr(base):.3f}; " + "; ".join(parts)
    record_acceptance(6, ok, detail)
    assert ok


def size_adjusted_power(null_est, eff_est, name, level=0.95):
    """Rejection rate using the null study's empirical |z| quantile as the critical value."""

    def zstat(est):
        d = est[(est.estimator == name) & (est.horizon == B)]
        se = (np.log(d.hi) - np.log(d.lo)) / (2 * stats.norm.ppf(0.5 + level / 2))
        return np.abs(np.log(d.est_rr) / se).to_numpy()

    return float(np.mean(zstat(eff_est) > np.quantile(zstat(null_est), level)))


def test_criterion_07_effect_study(null_study, effect_study):
    m = effect_study.metrics
    est = effect_study.estimates
    d1, d2 = at_total(m, "nb-dam1"), at_total(m, "nb-dam2")
    eff, chg = at_total(m, "effect-coded"), at_total(m, "change-coded")
    sel = est[(est.estimator == "effect-coded") & (est.horizon == B)]
    recovered = float(np.mean(np.log(sel.est_rr)) / math.log(eff.true_rr))
    checks = {
        "dam bias": abs(d1.bias) < 0.015 and abs(d2.bias) < 0.015,
        "power order": d2.rejection > d1.rejection,
        "effect-coded attenuation": recovered < 0.5,
        "change-coded sign": chg.bias < 0,
    }
    ok = all(checks.values())
    detail = (f"dam1 bias {d1.bias:+.4f} power {d1.rejection:.3f}; dam2 bias {d2.bias:+.4f} power {d2.rejection:.3f}; "
              f"effect-coded recovers {recovered:.2f} of log RR (bias {eff.bias:+.4f}); "
              f"change-coded bias {chg.bias:+.4f}")
    # informational only; the criterion is on nominal Wald rejection rates
    adj = {k: size_adjusted_power(null_study.estimates, est, k) for k in ("nb-dam1", "nb-dam2")}
    detail += f"; size-adjusted power dam1 {adj['nb-dam1']:.3f} dam2 {adj['nb-dam2']:.3f}"
    failed = [k for k, v in checks.items() if not v]
    if failed:
        detail += f"; failed: {', '.join(failed)}"
    record_acceptance(7, ok, detail)
    assert ok


def test_criterion_08_mse_identity(null_study, effect_study):
    worst = 0.0
    n = 0
    for res in (null_study, effect_study):
        m = res.metrics
        worst = max(worst, float(np.max(np.abs(m.mse - (m.bias**2 + m.sd**2)))))
        n += len(m)
    ok = worst <= 1e-12
    record_acceptance(8, ok, f"max |MSE - bias^2 - SD^2| = {worst:.1e} over {n} rows")
    assert ok


def sbc_ranks(reps=100, n_draws=99):
    """Rank of each true parameter among thinned posterior draws, data simulated from the prior."""
    spec = ModelSpec(family="nb-dam", p=1, b=3, year_effects=False)
    priors = Priors(alpha=(0.0, 0.1), beta=((0.0, 0.1), (0.0, 0.1)), log_phi=(math.log(50.0), 0.3))
    ranks = []
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([77, r]))
        exposure = np.full((20, 12), 1000.0)
        template = make_panel(20, 12, rng, exposure=exposure, counts=rng.poisson(1000, (20, 12)))
        theta = priors.sample(NbObjective(template, spec), rng)
        panel = simulate_nb(template, spec, theta, rng)
        post = fit_bayes(panel, spec, priors, McmcOptions(chains=2, iter=2000, seed=r))
        draws = post.draws.reshape(-1, post.draws.shape[2])
        keep = np.linspace(0, len(draws) - 1, n_draws).round().astype(int)
        ranks.append(np.sum(draws[keep] < theta, axis=0))
    return np.array(ranks), post.names


def test_criterion_09_inference_cross_checks(base):
    rng = np.random.default_rng(np.random.SeedSequence([2024, 0]))
    schedules = assign_treatment(rng, base, 15, (1, 27))
    panel = inject_effect(base, schedules, math.log(0.95), math.log(0.95), B)
    spec = study_specs(StudyConfig(), base)["nb-dam2"]
    mle = fit_mle(panel, spec)
    post = fit_bayes(panel, spec, opts=McmcOptions(chains=4, iter=2000, seed=1), mle=mle)
    coding = coding_integer_enactment(B, B + 1)
    gap = abs(math.log(summarize_rr(post, coding, B)[0]) - math.log(summarize_rr(mle, coding, B)[0]))
    max_rhat = float(np.nanmax(post.rhat))

    ranks, names = sbc_ranks()
    pvals = {}
    for j, name in enumerate(names):
        counts = np.bincount(ranks[:, j] * 10 // 100, minlength=10)
        pvals[name] = float(stats.chisquare(counts).pvalue)
    ok = gap < 0.02 and max_rhat < 1.05 and min(pvals.values()) > 0.01
    sbc = ", ".join(f"{k} {v:.3f}" for k, v in pvals.items())
    record_acceptance(9, ok, f"|median - MLE| log RR {gap:.4f}; max R-hat {max_rhat:.3f} "
                             f"({len(mle.names)} params); SBC p-values {sbc}")
    assert ok


def test_criterion_10_determinism(base, tmp_path):
    config = StudyConfig(cells=((1.0, 1.0), (0.95, 0.95)), replications=20, seed=5)
    blobs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        write_outputs(run_study(config, base=synth_base_panel(BaseConfig())), out)
        blobs.append((out / "metrics.csv").read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    record_acceptance(10, ok, f"metrics.csv identical across two runs ({len(blobs[0])} bytes)")
    assert ok
