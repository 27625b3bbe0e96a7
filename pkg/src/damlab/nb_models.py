"""Negative-binomial autoregressive count models.

Counts follow NB(mu, phi) with ``Var = mu + mu**2 / phi`` (large ``phi``
approaches Poisson).  The log mean is linear in the floored lagged log
rates; the debiased family subtracts the systematic part of each lag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import digamma, expit, gammaln

from .design import ZERO_FLOOR, Design, ModelSpec, build_design
from .effect_coding import EffectCoding, coding_partial_year
from .panel import PanelData

__all__ = [
    "ModelSpec",
    "NbParams",
    "NbObjective",
    "nb_log_mean_adl",
    "nb_log_mean_dam",
    "nb_logpdf",
    "nb_loglik",
    "approx_effect",
    "simulate_nb",
    "marginal_effect_oracle",
]


class NonFiniteMeanError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NbParams:
    alpha: float
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta0: float = 0.0
    beta1: float = 0.0
    gamma1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phi: float = 100.0

    def __post_init__(self):
        for name in ("delta", "gamma1", "gamma2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any((self.delta < 0) | (self.delta > 1)):
            raise ValueError("autoregressive coefficients must lie in [0, 1]")
        if not self.phi > 0:
            raise ValueError("dispersion phi must be positive")

    @property
    def p(self) -> int:
        return len(self.delta)

    def vector(self) -> np.ndarray:
        """Natural-scale vector in design order, dispersion last."""
        return np.concatenate(
            [[self.alpha], self.delta, [self.beta0, self.beta1], self.gamma1, self.gamma2, [self.phi]]
        )

    @classmethod
    def from_vector(cls, design: Design, vec) -> "NbParams":
        vec = np.asarray(vec, dtype=float)
        alpha, delta, beta, g1, g2 = design.split(vec)
        return cls(alpha, delta, beta[0], beta[1], g1, g2, vec[design.n_mean])


def _lag_rate(y, n):
    return np.log(np.maximum(np.asarray(y, dtype=float), ZERO_FLOOR) / np.asarray(n, dtype=float))


def nb_log_mean_adl(params: NbParams, y_lags, n_lags, exposure, z, x1=(), x2=()):
    """Log mean with observed lagged log rates entering directly.

    ``y_lags``/``n_lags`` hold ``y_{t-k}``/``N_{t-k}`` for ``k = 1..p``;
    ``z`` is the policy row ``(w0, w1)`` (already differenced for change
    coding).
    """
    L = _lag_rate(y_lags, n_lags)
    m = params.beta0 * z[0] + params.beta1 * z[1] + float(np.dot(params.gamma1, x1) if len(x1) else 0.0)
    h = float(np.dot(params.gamma2, x2)) if len(x2) else 0.0
    return params.alpha + float(np.dot(params.delta, L)) + m + h + np.log(exposure)


def nb_log_mean_dam(params: NbParams, y_lags, n_lags, exposure, z, z_lags, x1=(), x1_lags=None, x2=()):
    """Log mean with each lagged log rate taken relative to its own systematic part."""
    L = _lag_rate(y_lags, n_lags)
    z_lags = np.asarray(z_lags, dtype=float).reshape(params.p, 2)
    g1 = params.gamma1
    m = params.beta0 * z[0] + params.beta1 * z[1] + (float(np.dot(g1, x1)) if len(x1) else 0.0)
    m_lags = z_lags @ np.array([params.beta0, params.beta1])
    if x1_lags is not None and len(g1):
        m_lags = m_lags + np.asarray(x1_lags, dtype=float).reshape(params.p, -1) @ g1
    h = float(np.dot(params.gamma2, x2)) if len(x2) else 0.0
    return params.alpha + float(np.dot(params.delta, L - m_lags)) + m + h + np.log(exposure)


def nb_logpdf(y, eta, phi):
    """NB log density at log mean ``eta``."""
    y = np.asarray(y, dtype=float)
    log_phi = np.log(phi)
    log_phi_mu = np.logaddexp(log_phi, eta)
    return gammaln(y + phi) - gammaln(phi) - gammaln(y + 1) + phi * (log_phi - log_phi_mu) + y * (eta - log_phi_mu)


class NbObjective:
    """Log likelihood and score over the natural parameter vector ``(mean params..., phi)``."""

    def __init__(self, panel: PanelData, spec: ModelSpec):
        if not spec.count_model:
            raise ValueError(f"{spec.family} is not a count family")
        self.panel = panel
        self.spec = spec
        self.design = build_design(panel, spec, extra_names=("phi",))
        self.y = self.design.y[:, spec.p :]
        self.n_params = self.design.n_mean + 1
        self._phi_cache = None

    @property
    def names(self):
        return self.design.names

    def _eta(self, theta):
        eta = self.design.eta(theta[: self.design.n_mean])
        if not np.all(np.isfinite(eta)) or np.any(eta > 700):
            i, t = np.argwhere(~np.isfinite(eta) | (eta > 700))[0]
            raise NonFiniteMeanError(
                f"non-finite mean at ({self.panel.units[i]}, {self.panel.times[t + self.spec.p]}) "
                f"for parameters {np.array2string(np.asarray(theta), precision=4)}"
            )
        return eta

    def _phi_terms(self, phi) -> float:
        # the gamma-function terms only move with phi; samplers revisit the same phi often
        if self._phi_cache is None or self._phi_cache[0] != phi:
            y = self.y
            const = np.sum(gammaln(y + phi) - gammaln(y + 1)) - y.size * (gammaln(phi) - phi * np.log(phi))
            self._phi_cache = (phi, float(const))
        return self._phi_cache[1]

    def loglik(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        phi = float(theta[-1])
        if not phi > 0:
            return -np.inf
        eta = self._eta(theta)
        log_phi_mu = np.logaddexp(np.log(phi), eta)
        return self._phi_terms(phi) + float(np.sum(self.y * (eta - log_phi_mu) - phi * log_phi_mu))

    def loglik_cells(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return nb_logpdf(self.y, self._eta(theta), theta[-1])

    def score(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        phi = theta[-1]
        eta = self._eta(theta)
        y = self.y
        w = expit(eta - np.log(phi))  # mu / (mu + phi)
        d_eta = y - (phi + y) * w
        J = self.design.jacobian(theta[: self.design.n_mean])
        g = np.einsum("it,itk->k", d_eta, J)
        log_phi_mu = np.logaddexp(np.log(phi), eta)
        d_phi = digamma(y + phi) - digamma(phi) + np.log(phi) + 1.0 - log_phi_mu - (phi + y) * np.exp(-log_phi_mu)
        return np.append(g, d_phi.sum())

    def fisher_mean(self, theta) -> np.ndarray:
        """Expected information for the mean parameters (``J' W J``)."""
        theta = np.asarray(theta, dtype=float)
        phi = theta[-1]
        eta = self._eta(theta)
        mu = np.exp(eta)
        W = (mu * phi / (mu + phi)).ravel()
        J = self.design.jacobian(theta[: self.design.n_mean]).reshape(-1, self.design.n_mean)
        return (J * W[:, None]).T @ J


def nb_loglik(params, panel: PanelData, spec: ModelSpec) -> float:
    """Conditional log likelihood over cells with ``t >= p``."""
    obj = NbObjective(panel, spec)
    vec = params.vector() if isinstance(params, NbParams) else np.asarray(params, dtype=float)
    if len(vec) != obj.n_params:
        raise ValueError(f"expected {obj.n_params} parameters {obj.names}, got {len(vec)}")
    return obj.loglik(vec)


def approx_effect(params: NbParams, coding: EffectCoding, t) -> np.ndarray:
    """Risk ratio ``exp(w0_t beta0 + w1_t beta1)`` at event time ``t`` (1 before enactment)."""
    return np.exp(coding.log_rr(params.beta0, params.beta1, t))


def nb_draw(rng, mu, phi):
    """NB draws as a gamma-Poisson mixture."""
    g = rng.gamma(phi, 1.0 / phi, size=np.shape(mu))
    return rng.poisson(mu * g)


def simulate_nb(panel: PanelData, spec: ModelSpec, theta, rng) -> PanelData:
    """Forward-simulate counts for ``t >= p``; the panel's first ``p`` periods are kept as initial values."""
    design = build_design(panel, spec, extra_names=("phi",))
    theta = np.asarray(theta, dtype=float)
    n_mean = design.n_mean
    alpha, delta, beta, g1, g2 = design.split(theta[:n_mean])
    phi = theta[n_mean]
    M = design.systematic(beta, g1)
    H = design.X2 @ g2 if design.k2 else np.zeros_like(M)
    d = 1.0 if spec.debiased else 0.0
    y = panel.counts.astype(float).copy()
    L = design.L.copy()
    p = spec.p
    for t in range(p, panel.n_periods):
        eta = alpha + M[:, t] + H[:, t] + design.offset[:, t]
        for k in range(1, p + 1):
            eta = eta + delta[k - 1] * (L[:, t - k] - d * M[:, t - k])
        y[:, t] = nb_draw(rng, np.exp(eta), phi)
        L[:, t] = _lag_rate(y[:, t], panel.exposure[:, t])
    return panel.with_counts(y.astype(np.int64))


@dataclass(frozen=True)
class OracleResult:
    t: np.ndarray
    rr: np.ndarray
    se: np.ndarray
    mean_treated: np.ndarray
    mean_control: np.ndarray


def marginal_effect_oracle(
    params: NbParams,
    spec: ModelSpec,
    horizon: int,
    mc_draws: int = 100_000,
    seed: Optional[int] = 0,
    exposure: float = 1e6,
    y_init=None,
    t_e: float = 0.0,
    crn: str = "gamma",
) -> OracleResult:
    """Monte Carlo risk ratio ``E[y_t | a] / E[y_t | 0]`` for enactment at event time 0.

    Both arms start from the same ``p`` conditioning counts ``y_init``
    (default: the stationary untreated mean, rounded) and share random
    numbers.  With ``crn="gamma"`` the gamma mixing variates are shared
    and the Poisson stage is drawn per arm; ``crn="full"`` also shares the
    Poisson uniforms through the inverse CDF.  Covariates are held at zero.
    """
    if not spec.count_model:
        raise ValueError("oracle is defined for count families")
    if crn not in ("gamma", "full"):
        raise ValueError("crn must be 'gamma' or 'full'")
    p = spec.p
    delta = params.delta
    coding = coding_partial_year(t_e, spec.b, max(horizon, spec.b + 1))
    t = np.arange(horizon + 1)
    w0, w1 = coding.weights(np.arange(-p, horizon + 1))
    beta = np.array([params.beta0, params.beta1])
    Z = np.column_stack([w0, w1])
    if spec.family == "nb-adl-change":
        Z = np.vstack([Z[:1], np.diff(Z, axis=0)])
        Z[0] = 0.0
    m = Z @ beta
    d = 1.0 if spec.debiased else 0.0
    if y_init is None:
        level = params.alpha / (1.0 - delta.sum()) if delta.sum() < 1 else params.alpha
        y_init = np.full(p, max(round(np.exp(level) * exposure), 1))
    y_init = np.asarray(y_init, dtype=float)
    log_n = np.log(exposure)

    root = np.random.SeedSequence(seed)
    g_ss, pa_ss, p0_ss = root.spawn(3)
    g_rng = np.random.default_rng(g_ss)
    rngs = {1: np.random.default_rng(pa_ss), 0: np.random.default_rng(p0_ss)}
    shape = (mc_draws,)
    L = {arm: np.tile(_lag_rate(y_init, exposure), (mc_draws, 1)) for arm in (0, 1)}
    out = {0: [], 1: []}
    for step in range(horizon + 1):
        j = step + p  # row in the coded arrays
        gam = g_rng.gamma(params.phi, 1.0 / params.phi, size=shape)
        u = g_rng.random(shape) if crn == "full" else None
        for arm in (0, 1):
            mm = m if arm == 1 else np.zeros_like(m)
            eta = params.alpha + mm[j] + log_n
            for k in range(1, p + 1):
                eta = eta + delta[k - 1] * (L[arm][:, -k] - d * mm[j - k])
            lam = np.exp(eta) * gam
            if crn == "full":
                y = stats.poisson.ppf(u, lam)
            else:
                y = rngs[arm].poisson(lam).astype(float)
            out[arm].append(y)
            L[arm] = np.column_stack([L[arm][:, 1:], _lag_rate(y, exposure)]) if p else L[arm]
    ya = np.array(out[1])
    y0 = np.array(out[0])
    ma, m0 = ya.mean(axis=1), y0.mean(axis=1)
    rr = ma / m0
    resid = ya - rr[:, None] * y0
    se = resid.std(axis=1, ddof=1) / np.sqrt(mc_draws) / m0
    return OracleResult(t=t, rr=rr, se=se, mean_treated=ma, mean_control=m0)
