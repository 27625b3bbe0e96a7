"""Linear autoregressive and debiased autoregressive (DAM) models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .design import Design, ModelSpec, build_design
from .panel import PanelData
from .results import ConvergenceError, FitResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearDamParams:
    alpha: float
    delta: np.ndarray
    theta: np.ndarray
    gamma1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("delta", "theta", "gamma1", "gamma2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any((self.delta < 0) | (self.delta > 1)):
            raise ValueError("autoregressive coefficients must lie in [0, 1]")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def p(self) -> int:
        return len(self.delta)

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.delta, self.theta, self.gamma1, self.gamma2])


def ar_effect(theta: float, delta: float, a, t: int) -> float:
    """Effect of policy path ``a`` at ``t`` under the standard (non-debiased) AR(1)."""
    a = np.asarray(a, dtype=float)
    if t > len(a) - 1:
        raise ValueError("t beyond the policy history")
    k = np.arange(t + 1)
    return float(theta * np.sum(delta**k * a[t - k]))


def dam_mean_recursion(params: LinearDamParams, y, Z, X1=None, X2=None, debiased=True):
    """Conditional means for one unit's history.

    ``y`` is the observed series (length ``T1``), ``Z`` the ``(T1, q)``
    policy design and ``X1``/``X2`` the covariate blocks.  The first ``p``
    entries of the result are NaN: those periods are conditioned on.
    """
    y = np.asarray(y, dtype=float)
    T1 = len(y)
    Z = np.asarray(Z, dtype=float).reshape(T1, -1)
    X1 = np.zeros((T1, 0)) if X1 is None else np.asarray(X1, dtype=float).reshape(T1, -1)
    X2 = np.zeros((T1, 0)) if X2 is None else np.asarray(X2, dtype=float).reshape(T1, -1)
    m = Z @ params.theta + (X1 @ params.gamma1 if X1.shape[1] else 0.0)
    h = X2 @ params.gamma2 if X2.shape[1] else np.zeros(T1)
    d = 1.0 if debiased else 0.0
    mu = np.full(T1, np.nan)
    for t in range(params.p, T1):
        lag = sum(params.delta[k - 1] * (y[t - k] - d * m[t - k]) for k in range(1, params.p + 1))
        mu[t] = params.alpha + lag + m[t] + h[t]
    return mu


def simulate_linear_dam(params: LinearDamParams, y_init, Z, X1=None, X2=None, eps=None, debiased=True):
    """Forward-simulate one unit; ``eps`` defaults to zero noise."""
    Z = np.asarray(Z, dtype=float)
    T1 = Z.shape[0]
    Z = Z.reshape(T1, -1)
    X1 = np.zeros((T1, 0)) if X1 is None else np.asarray(X1, dtype=float).reshape(T1, -1)
    X2 = np.zeros((T1, 0)) if X2 is None else np.asarray(X2, dtype=float).reshape(T1, -1)
    eps = np.zeros(T1) if eps is None else np.asarray(eps, dtype=float)
    m = Z @ params.theta + (X1 @ params.gamma1 if X1.shape[1] else 0.0)
    h = X2 @ params.gamma2 if X2.shape[1] else np.zeros(T1)
    d = 1.0 if debiased else 0.0
    y = np.empty(T1)
    y[: params.p] = y_init
    for t in range(params.p, T1):
        lag = sum(params.delta[k - 1] * (y[t - k] - d * m[t - k]) for k in range(1, params.p + 1))
        y[t] = params.alpha + lag + m[t] + h[t] + eps[t]
    return y


def _free_delta(design: Design):
    """Indices (into the mean vector) of autoregressive coefficients that are estimated."""
    return [k for k in range(1, 1 + design.p) if not design.fixed_mask[k]]


def _to_natural(u, design, free):
    theta = design.fixed_values[: design.n_mean].copy()
    theta[free] = u
    dl = _free_delta(design)
    theta[dl] = expit(theta[dl])
    return theta


def _start_values(design: Design, free):
    """Intercept, policy and covariate terms from the delta = 0 ordinary regression."""
    theta = design.fixed_values[: design.n_mean].copy()
    dl = _free_delta(design)
    theta[dl] = 0.5
    lin = [j for j in free if j not in range(1, 1 + design.p)]
    probe = theta.copy()
    probe[dl] = 0.0
    J = design.jacobian(probe).reshape(-1, design.n_mean)
    r = (design.y[:, design.p :] - design.eta(probe)).ravel()
    if lin:
        coef, *_ = np.linalg.lstsq(J[:, lin], r, rcond=None)
        theta[lin] += coef
    u = theta[free].copy()
    dl_pos = [free.index(k) for k in dl]
    u[dl_pos] = logit(u[dl_pos])
    return u


def fit_linear_dam(
    panel: PanelData,
    spec: ModelSpec,
    outcome=None,
    max_iter: int = 200,
    xtol: float = 1e-10,
    gtol: float = 1e-8,
) -> FitResult:
    """Gauss-Newton least squares for the linear AR / DAM families.

    Autoregressive coefficients are optimized on the logit scale and the
    first ``p`` periods of each unit are conditioned on.  Convergence
    requires a relative step below ``xtol`` and a scaled gradient
    ``|J'r| / (|J| |r|)`` below ``gtol``.
    """
    if spec.count_model:
        raise ValueError(f"{spec.family} is a count family; use fit_mle")
    design = build_design(panel, spec, outcome=outcome)
    n_mean = design.n_mean
    free = [j for j in range(n_mean) if not design.fixed_mask[j]]
    dl = _free_delta(design)
    dl_pos = [free.index(k) for k in dl]
    y = design.y[:, design.p :].ravel()

    u = _start_values(design, free)
    design.check_rank(_to_natural(u, design, free))

    def resid_jac(u):
        theta = _to_natural(u, design, free)
        r = y - design.eta(theta).ravel()
        J = design.jacobian(theta).reshape(-1, n_mean)[:, free]
        if dl_pos:
            d = theta[dl]
            J[:, dl_pos] *= d * (1.0 - d)
        return r, J

    r, J = resid_jac(u)
    ssr = float(r @ r)
    # exact fits stall at roundoff, where the scaled gradient is noise
    ssr_floor = (1e-12 * (np.linalg.norm(y) + 1.0)) ** 2
    trace = []
    converged = False
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        denom = np.linalg.norm(J) * np.linalg.norm(r)
        gnorm = float(np.linalg.norm(g) / denom) if denom > 0 else 0.0
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        lam = 1.0
        improved = False
        for _ in range(40):
            u_new = u + lam * step
            r_new, J_new = resid_jac(u_new)
            ssr_new = float(r_new @ r_new)
            if np.isfinite(ssr_new) and ssr_new <= ssr:
                improved = True
                break
            lam *= 0.5
        rel = lam * np.linalg.norm(step) / (np.linalg.norm(u) + xtol)
        trace.append((it, ssr, gnorm, lam))
        if not improved:
            # no descent left at machine precision
            converged = gnorm < gtol or ssr <= ssr_floor
            break
        u, r, J, ssr = u_new, r_new, J_new, ssr_new
        denom = np.linalg.norm(J) * np.linalg.norm(r)
        gnorm = float(np.linalg.norm(J.T @ r) / denom) if denom > 0 else 0.0
        if (rel < xtol and gnorm < gtol) or ssr <= ssr_floor:
            converged = True
            break
        if dl_pos and np.any(np.abs(u[dl_pos]) > 36):
            # delta pinned against 0 or 1; further logit steps are flat
            if rel < 1e-6 and gnorm < 1e-6:
                converged = True
                break
    theta = _to_natural(u, design, free)
    if not converged:
        raise ConvergenceError(
            f"Gauss-Newton did not converge in {it} iterations (scaled gradient {gnorm:.3g})",
            last=theta,
            grad_norm=gnorm,
            trace=trace,
        )

    n = y.size
    k = len(free)
    sigma2 = ssr / max(n - k, 1)
    Jn = design.jacobian(theta).reshape(-1, n_mean)[:, free]
    cov = np.zeros((n_mean, n_mean))
    try:
        cov_free = sigma2 * np.linalg.inv(Jn.T @ Jn)
        cov[np.ix_(free, free)] = (cov_free + cov_free.T) / 2
    except np.linalg.LinAlgError:
        cov = None
    boundary = tuple(design.names[j] for j in dl if theta[j] < 1e-6 or theta[j] > 1 - 1e-6)
    sigma_ml2 = ssr / n
    loglik = -0.5 * n * (np.log(2 * np.pi * sigma_ml2) + 1.0) if sigma_ml2 > 0 else np.inf
    return FitResult(
        names=design.names,
        estimates=theta,
        cov=cov,
        loglik=float(loglik),
        family=spec.family,
        n_obs=n,
        iterations=it,
        grad_norm=gnorm,
        converged=True,
        boundary=boundary,
        fixed=tuple(spec.fixed),
        meta={"sigma": float(np.sqrt(sigma2)), "ssr": ssr, "spec": spec.to_dict()},
    )
