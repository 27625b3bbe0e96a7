"""Maximum likelihood and adaptive-Metropolis fitting of the count models."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .design import ModelSpec
from .diagnostics import ess, split_rhat
from .effect_coding import EffectCoding
from .nb_models import NbObjective, NonFiniteMeanError
from .panel import PanelData
from .results import ConvergenceError, FitResult

log = logging.getLogger(__name__)


class _Transform:
    """Natural <-> working-scale mapping: logit for delta, log for phi, identity otherwise.

    ``delta_logit=False`` leaves delta on its natural scale; the caller
    must then reject values outside [0, 1].
    """

    def __init__(self, obj: NbObjective, fixed_mask, fixed_values, delta_logit: bool = True):
        d = obj.design
        self.n = obj.n_params
        self.fixed_mask = fixed_mask
        self.fixed_values = fixed_values
        self.free = np.flatnonzero(~fixed_mask)
        kind = np.zeros(self.n, dtype=int)
        if delta_logit:
            kind[1 : 1 + d.p] = 1
        kind[-1] = 2
        self.kind = kind[self.free]

    def to_natural(self, u):
        theta = self.fixed_values.copy()
        v = np.array(u, dtype=float)
        v[self.kind == 1] = expit(v[self.kind == 1])
        v[self.kind == 2] = np.exp(v[self.kind == 2])
        theta[self.free] = v
        return theta

    def to_free(self, theta):
        v = np.asarray(theta, dtype=float)[self.free].copy()
        v[self.kind == 1] = logit(np.clip(v[self.kind == 1], 1e-9, 1 - 1e-9))
        v[self.kind == 2] = np.log(v[self.kind == 2])
        return v

    def dnat_du(self, theta):
        """Elementwise derivative of the natural free parameters w.r.t. ``u``."""
        v = np.asarray(theta, dtype=float)[self.free]
        out = np.ones_like(v)
        out[self.kind == 1] = v[self.kind == 1] * (1 - v[self.kind == 1])
        out[self.kind == 2] = v[self.kind == 2]
        return out

    def log_jacobian(self, theta):
        return float(np.sum(np.log(self.dnat_du(theta))))


def _fixed(obj: NbObjective, extra: Optional[dict] = None):
    mask = obj.design.fixed_mask.copy()
    vals = obj.design.fixed_values.copy()
    for key, val in (extra or {}).items():
        j = obj.names.index(key)
        mask[j] = True
        vals[j] = float(val)
    return mask, vals


def start_values(obj: NbObjective, fixed_mask, fixed_values) -> np.ndarray:
    """Least-squares starts on the log-rate scale, then a moment estimate of phi."""
    d = obj.design
    p = d.p
    n_mean = d.n_mean
    theta = fixed_values.copy()
    free_mean = [j for j in range(n_mean) if not fixed_mask[j]]
    target = (d.L[:, p:] + d.offset[:, p:]).ravel()
    free_delta = [k for k in range(1, 1 + p) if not fixed_mask[k]]

    # lagged-rate regression with the policy and covariate terms at their (zero) probe values
    probe = theta.copy()
    probe[free_delta] = 0.0
    J0 = d.jacobian(probe[:n_mean]).reshape(-1, n_mean)
    resid = target - d.eta(probe[:n_mean]).ravel()
    coef, *_ = np.linalg.lstsq(J0[:, free_mean], resid, rcond=None)
    theta[free_mean] += coef
    theta[free_delta] = np.clip(theta[free_delta], 0.05, 0.95)

    if d.spec.debiased:
        # given delta the debiased log rate is linear in the remaining terms
        lin = [j for j in free_mean if j not in range(1, 1 + p)]
        probe = theta.copy()
        probe[lin] = fixed_values[lin]
        J = d.jacobian(probe[:n_mean]).reshape(-1, n_mean)
        resid = target - d.eta(probe[:n_mean]).ravel()
        coef, *_ = np.linalg.lstsq(J[:, lin], resid, rcond=None)
        theta[lin] = fixed_values[lin] + coef

    if not fixed_mask[-1]:
        mu = np.exp(d.eta(theta[:n_mean]))
        y = obj.y
        excess = np.sum((y - mu) ** 2 - mu)
        phi = np.sum(mu**2) / excess if excess > 0 else 1e4
        theta[-1] = float(np.clip(phi, 1.0, 1e4))
    return theta


def observed_information(obj: NbObjective, theta, free, rel_step=1e-5):
    """Central finite differences of the analytic score (natural scale)."""
    k = len(free)
    H = np.empty((k, k))
    for a, j in enumerate(free):
        h = rel_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, a] = -(obj.score(tp)[free] - obj.score(tm)[free]) / (2 * h)
    return (H + H.T) / 2


def fit_mle(
    panel: PanelData,
    spec: ModelSpec,
    start=None,
    fixed: Optional[dict] = None,
    gtol: float = 1e-6,
    max_iter: int = 2000,
    covariance: bool = True,
) -> FitResult:
    """Quasi-Newton maximum likelihood.

    BFGS runs on the unconstrained scale (logit delta, log phi) from an
    inverse-Fisher initial Hessian.  The covariance is the inverse observed
    information on the natural scale, from finite differences of the score;
    it is omitted (``meta["hessian_pd"] = False``) when that matrix is not
    positive definite.
    """
    obj = NbObjective(panel, spec)
    mask, vals = _fixed(obj, fixed)
    tr = _Transform(obj, mask, vals)
    theta0 = start_values(obj, mask, vals) if start is None else np.asarray(start, dtype=float)
    obj.design.check_rank(theta0[: obj.design.n_mean])
    u0 = tr.to_free(theta0)
    scale = obj.y.size

    def f(u):
        try:
            return -obj.loglik(tr.to_natural(u)) / scale
        except NonFiniteMeanError:
            return np.inf

    def g(u):
        theta = tr.to_natural(u)
        try:
            return -obj.score(theta)[tr.free] * tr.dnat_du(theta) / scale
        except NonFiniteMeanError:
            return np.full(len(u), np.nan)

    # inverse Fisher information on the free scale seeds the BFGS metric
    hess_inv0 = None
    try:
        n_mean = obj.design.n_mean
        F = np.zeros((obj.n_params, obj.n_params))
        F[:n_mean, :n_mean] = obj.fisher_mean(theta0)
        F[-1, -1] = max(abs(observed_information(obj, theta0, [obj.n_params - 1])[0, 0]), 1e-8)
        Ff = F[np.ix_(tr.free, tr.free)]
        jac = tr.dnat_du(theta0)
        Fu = Ff * np.outer(jac, jac) / scale
        hess_inv0 = np.linalg.inv(Fu + 1e-10 * np.eye(len(jac)) * np.trace(Fu) / len(jac))
        hess_inv0 = (hess_inv0 + hess_inv0.T) / 2
        np.linalg.cholesky(hess_inv0)
    except (np.linalg.LinAlgError, NonFiniteMeanError):
        hess_inv0 = None

    res = optimize.minimize(
        f, u0, jac=g, method="BFGS",
        options={"gtol": gtol, "maxiter": max_iter, "hess_inv0": hess_inv0},
    )
    theta = tr.to_natural(res.x)
    grad_norm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.nan
    if not res.success:
        # precision loss at the optimum is benign once the gradient is small
        if not (np.isfinite(res.fun) and grad_norm < 100 * gtol):
            raise ConvergenceError(
                f"BFGS failed: {res.message} (max |grad| {grad_norm:.3g})",
                last=theta,
                grad_norm=grad_norm,
                trace=[res.message],
            )

    free = list(tr.free)
    cov = None
    hessian_pd = False
    if covariance:
        H = observed_information(obj, theta, free)
        try:
            np.linalg.cholesky(H)
            cov_free = np.linalg.inv(H)
            cov = np.zeros((obj.n_params, obj.n_params))
            cov[np.ix_(free, free)] = (cov_free + cov_free.T) / 2
            hessian_pd = True
        except np.linalg.LinAlgError:
            log.warning("observed information not positive definite; covariance omitted")
    p = spec.p
    boundary = tuple(
        obj.names[k] for k in range(1, 1 + p) if not mask[k] and (theta[k] < 1e-6 or theta[k] > 1 - 1e-6)
    )
    return FitResult(
        names=obj.names,
        estimates=theta,
        cov=cov,
        loglik=obj.loglik(theta),
        family=spec.family,
        n_obs=obj.y.size,
        iterations=int(res.nit),
        grad_norm=grad_norm,
        converged=True,
        boundary=boundary,
        fixed=tuple(obj.names[j] for j in np.flatnonzero(mask)),
        meta={
            "hessian_pd": hessian_pd,
            "zero_lags": obj.design.zero_lags,
            "variance": "mu + mu^2/phi",
            "spec": spec.to_dict(),
            "message": str(res.message),
        },
    )


# --------------------------------------------------------------------------- Bayesian


@dataclass(frozen=True)
class Priors:
    """Normal priors use (mean, sd); the dispersion prior is log-normal on (meanlog, sdlog)."""

    alpha: tuple = (0.0, 10.0)
    beta: tuple = ((0.0, 10.0), (0.0, 10.0))
    gamma_sd: float = 10.0
    log_phi: tuple = (0.0, 10.0)

    def __post_init__(self):
        scales = [self.alpha[1], self.gamma_sd, self.log_phi[1]] + [b[1] for b in self.beta]
        if min(scales) <= 0:
            raise ValueError("prior scales must be positive")

    def log_density(self, obj: NbObjective, theta) -> float:
        """Log prior on the natural scale (up to a constant); -inf outside the support."""
        d = obj.design
        alpha, delta, beta, g1, g2 = d.split(theta[: d.n_mean])
        phi = theta[-1]
        if np.any(delta < 0) or np.any(delta > 1) or not phi > 0:
            return -np.inf
        lp = -0.5 * ((alpha - self.alpha[0]) / self.alpha[1]) ** 2
        for j, bj in enumerate(beta):
            c, s = self.beta[min(j, len(self.beta) - 1)]
            lp -= 0.5 * ((bj - c) / s) ** 2
        g = np.concatenate([g1, g2])
        lp -= 0.5 * np.sum((g / self.gamma_sd) ** 2)
        lp -= np.log(phi) + 0.5 * ((np.log(phi) - self.log_phi[0]) / self.log_phi[1]) ** 2
        return float(lp)

    def sample(self, obj: NbObjective, rng) -> np.ndarray:
        d = obj.design
        theta = np.empty(obj.n_params)
        theta[0] = rng.normal(*self.alpha)
        theta[1 : 1 + d.p] = rng.uniform(0, 1, d.p)
        for j in range(d.q):
            c, s = self.beta[min(j, len(self.beta) - 1)]
            theta[1 + d.p + j] = rng.normal(c, s)
        o = 1 + d.p + d.q
        theta[o : d.n_mean] = rng.normal(0, self.gamma_sd, d.n_mean - o)
        theta[-1] = np.exp(rng.normal(*self.log_phi))
        return theta


@dataclass(frozen=True)
class McmcOptions:
    """Sampler settings.

    ``iter`` counts sweeps, each updating every block once; ``warmup``
    defaults to half of them.  ``blocks`` groups parameter names; each
    name labels its coordinate in the whitened space, and parameters not
    listed form one final block.

    ``delta_scale`` picks the working scale for autoregressive
    coefficients.  The likelihood ridge along a fixed sum of lags is
    straight on the natural scale but curved on the logit scale, where
    straight-line proposals stall once ``p >= 2``; the natural scale
    enforces the uniform [0, 1] support by rejection.
    """

    chains: int = 4
    iter: int = 2000
    warmup: Optional[int] = None
    seed: int = 0
    blocks: Optional[Sequence[Sequence[str]]] = None
    init_scale: float = 2.0
    workers: int = 1
    rhat_threshold: float = 1.05
    delta_scale: str = "natural"

    def __post_init__(self):
        if self.delta_scale not in ("natural", "logit"):
            raise ValueError(f"delta_scale must be 'natural' or 'logit', got {self.delta_scale!r}")

    @property
    def n_warmup(self) -> int:
        return self.iter // 2 if self.warmup is None else self.warmup


@dataclass(frozen=True)
class Posterior:
    names: tuple
    draws: np.ndarray  # (chains, iterations, params), natural scale
    rhat: np.ndarray
    ess: np.ndarray
    acceptance: np.ndarray  # (chains, blocks)
    seed: int
    converged: bool
    flags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.index(name)].ravel()

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def median(self) -> np.ndarray:
        return np.median(self.flat(), axis=0)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "median": self.median().tolist(),
            "rhat": self.rhat.tolist(),
            "ess": self.ess.tolist(),
            "acceptance": self.acceptance.tolist(),
            "seed": self.seed,
            "converged": self.converged,
            "flags": self.flags,
            "meta": self.meta,
        }


def _block_indices(opts, names):
    """Coordinate blocks; the default updates each whitened coordinate on its own."""
    if opts.blocks is None:
        return [np.array([j]) for j in range(len(names))]
    seen = [n for b in opts.blocks for n in b]
    unknown = sorted(set(seen) - set(names))
    if unknown:
        raise ValueError(f"blocks name unknown or fixed parameters: {unknown}")
    rest = [n for n in names if n not in seen]
    blocks = [list(b) for b in opts.blocks if b] + ([rest] if rest else [])
    return [np.array([names.index(n) for n in b]) for b in blocks]


def _run_chain(args):
    (panel, spec, priors, opts, chain, theta_init, prop_cov_u, mask, vals, refresh) = args
    obj = NbObjective(panel, spec)
    tr = _Transform(obj, mask, vals, delta_logit=opts.delta_scale == "logit")
    free_names = [obj.names[j] for j in tr.free]
    d = len(free_names)
    # phi goes first so that, under a lower-triangular whitening map, only its
    # own coordinate moves it and the likelihood's phi terms stay cached
    order = np.array(([free_names.index("phi")] if "phi" in free_names else [])
                     + [j for j, n in enumerate(free_names) if n != "phi"])
    block_idx = _block_indices(opts, [free_names[j] for j in order])
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, chain]))
    n_warm, n_iter = opts.n_warmup, opts.iter

    def to_u(zz):
        u = np.empty(d)
        u[order] = center + L @ zz
        return u

    def log_post(u):
        theta = tr.to_natural(u)
        lp = priors.log_density(obj, theta)
        if not np.isfinite(lp):
            return -np.inf
        try:
            ll = obj.loglik(theta)
        except NonFiniteMeanError:
            return -np.inf
        return ll + lp + tr.log_jacobian(theta)

    # proposals act on z = L^{-1} (u[order] - center); L comes from the MLE covariance
    center = tr.to_free(theta_init)[order]
    C0 = prop_cov_u[np.ix_(order, order)]
    C0 = C0 + 1e-12 * np.eye(d) * max(np.trace(C0) / d, 1e-12)
    L = np.linalg.cholesky(C0)

    # overdispersed start around the mode
    z = np.zeros(d)
    cur = -np.inf
    for _ in range(100):
        cand = opts.init_scale * rng.standard_normal(d)
        cur = log_post(to_u(cand))
        if np.isfinite(cur):
            z = cand
            break
    if not np.isfinite(cur):
        cur = log_post(to_u(z))

    log_scale = [np.log(2.38 / np.sqrt(len(idx))) for idx in block_idx]
    targets = [0.44 if len(idx) == 1 else 0.234 for idx in block_idx]

    # without an MLE covariance, warmup draws from the second quarter replace the
    # placeholder whitening map at mid-warmup; a good Laplace covariance is kept
    collect = (n_warm // 4, n_warm // 2)
    window = []

    out = np.empty((n_iter - n_warm, d))
    accepted = np.zeros((2, len(block_idx)))  # [warmup, sampling]
    for it in range(n_iter):
        warm = it < n_warm
        for b, idx in enumerate(block_idx):
            prop = z.copy()
            prop[idx] += np.exp(log_scale[b]) * rng.standard_normal(len(idx))
            lp = log_post(to_u(prop))
            acc = np.log(rng.random()) < lp - cur
            if acc:
                z, cur = prop, lp
            accepted[0 if warm else 1, b] += acc
            if warm:
                # Robbins-Monro on each block's proposal scale
                log_scale[b] += (float(acc) - targets[b]) / (it + 1) ** 0.6
        u = to_u(z)
        if warm and collect[0] <= it < collect[1]:
            window.append(u[order])
        if refresh and warm and it == collect[1] - 1 and len(window) > 2 * d:
            W = np.asarray(window)
            C_emp = np.cov(W, rowvar=False)
            # shrink toward the MLE covariance; a short warmup window is noisy
            C_new = 0.5 * C_emp + 0.5 * C0
            try:
                L_new = np.linalg.cholesky(C_new)
            except np.linalg.LinAlgError:
                L_new = None
            if L_new is not None:
                center = W.mean(axis=0)
                L = L_new
                z = np.linalg.solve(L, u[order] - center)
        if not warm:
            out[it - n_warm] = u
    draws = np.array([tr.to_natural(x) for x in out])
    acc_rate = accepted[1] / max(n_iter - n_warm, 1)
    return draws, acc_rate


def fit_bayes(
    panel: PanelData,
    spec: ModelSpec,
    priors: Priors = Priors(),
    opts: McmcOptions = McmcOptions(),
    mle: Optional[FitResult] = None,
) -> Posterior:
    """Blockwise adaptive random-walk Metropolis on a working scale (log phi; delta per ``opts``).

    Proposals move coordinates whitened by the MLE covariance (or, when
    that is unavailable, by a covariance estimated once from warmup draws).
    Block scales follow a Robbins-Monro schedule during warmup; everything
    is frozen afterwards.  By default every whitened coordinate is its own
    block, so one iteration is a full sweep.  Each chain's generator is
    seeded from ``(seed, chain)``.
    """
    if opts.chains < 2:
        raise ValueError("at least two chains are required")
    if opts.n_warmup >= opts.iter:
        raise ValueError("warmup must be shorter than the run")
    obj = NbObjective(panel, spec)
    mask, vals = _fixed(obj)
    tr = _Transform(obj, mask, vals, delta_logit=opts.delta_scale == "logit")
    if mle is None:
        try:
            mle = fit_mle(panel, spec)
        except ConvergenceError as exc:
            log.warning("MLE for sampler initialization failed: %s", exc)
    if mle is not None and mle.cov is not None:
        theta_init = mle.estimates
        jac = tr.dnat_du(theta_init)
        C = mle.cov[np.ix_(tr.free, tr.free)] / np.outer(jac, jac)
        refresh = False
    else:
        theta_init = start_values(obj, mask, vals)
        C = np.eye(len(tr.free)) * 1e-3
        refresh = True
    args = [(panel, spec, priors, opts, c, theta_init, C, mask, vals, refresh) for c in range(opts.chains)]
    if opts.workers > 1:
        with ProcessPoolExecutor(max_workers=opts.workers) as ex:
            results = list(ex.map(_run_chain, args))
    else:
        results = [_run_chain(a) for a in args]
    draws = np.stack([r[0] for r in results])
    acceptance = np.stack([r[1] for r in results])
    free = list(tr.free)
    rhat = np.full(obj.n_params, np.nan)
    ess_ = np.full(obj.n_params, np.nan)
    for j in free:
        rhat[j] = split_rhat(draws[:, :, j])
        ess_[j] = ess(draws[:, :, j])
    flags = {}
    if spec.p >= 2:
        dsum = draws[:, :, 1 : 1 + spec.p].sum(axis=2)
        flags["nonstationary_fraction"] = float(np.mean(dsum >= 1.0))
    converged = bool(np.all(rhat[free] <= opts.rhat_threshold))
    if not converged:
        worst = obj.names[free[int(np.nanargmax(rhat[free]))]]
        log.warning("R-hat above %.2f (worst: %s)", opts.rhat_threshold, worst)
    return Posterior(
        names=obj.names,
        draws=draws,
        rhat=rhat,
        ess=ess_,
        acceptance=acceptance,
        seed=opts.seed,
        converged=converged,
        flags=flags,
        meta={"spec": spec.to_dict(), "iter": opts.iter, "warmup": opts.n_warmup, "chains": opts.chains},
    )


# --------------------------------------------------------------------------- summaries


def summarize_rr(result, coding: EffectCoding, t, level: float = 0.95):
    """Risk ratio at event time ``t``: ``(point, lo, hi)``.

    Posteriors give the median and equal-tailed quantiles of the draws;
    point fits give a Wald interval on the log scale.
    """
    from scipy.stats import norm

    w0, w1 = coding.weights(t)
    w0, w1 = float(w0), float(w1)
    if isinstance(result, Posterior):
        lr = w0 * result.param("beta0") + w1 * result.param("beta1")
        a = (1 - level) / 2
        q = np.quantile(lr, [0.5, a, 1 - a])
        return tuple(float(np.exp(v)) for v in q)
    i0, i1 = result.index("beta0"), result.index("beta1")
    w = np.array([w0, w1])
    est = float(w @ result.estimates[[i0, i1]])
    if result.cov is None:
        return float(np.exp(est)), np.nan, np.nan
    var = float(w @ result.cov[np.ix_([i0, i1], [i0, i1])] @ w)
    z = norm.ppf(0.5 + level / 2)
    se = np.sqrt(max(var, 0.0))
    return float(np.exp(est)), float(np.exp(est - z * se)), float(np.exp(est + z * se))


def format_rr(point, lo, hi, digits: int = 3) -> str:
    return f"{point:.{digits}f} ({lo:.{digits}f}–{hi:.{digits}f})"


def diagnostics(posterior: Posterior) -> dict:
    """Per-parameter split R-hat, ESS and per-chain block acceptance rates."""
    return {
        "rhat": dict(zip(posterior.names, posterior.rhat.tolist())),
        "ess": dict(zip(posterior.names, posterior.ess.tolist())),
        "acceptance": posterior.acceptance.tolist(),
    }
