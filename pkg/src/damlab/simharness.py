"""Empirical simulation study: inject hypothetical policy effects into a base panel.

One base panel is held fixed across replications.  Each replication picks
treated units and enactment dates, multiplies their post-enactment counts
by the phase-in risk ratio, refits every estimator and records the
estimated risk ratio at each horizon.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .design import ModelSpec
from .effect_coding import coding_integer_enactment, effect_design
from .inference import fit_mle, summarize_rr
from .nb_models import nb_draw
from .panel import PanelData, PolicySchedule, load_panel

log = logging.getLogger(__name__)

ESTIMATORS = {
    "effect-coded": dict(family="nb-adl-effect", p=1),
    "change-coded": dict(family="nb-adl-change", p=1),
    "nb-dam1": dict(family="nb-dam", p=1),
    "nb-dam2": dict(family="nb-dam", p=2),
}
REFERENCE_GRID = (0.9, 0.95, 0.99, 1.0, 1.01, 1.05, 1.1)
DESK_GRID = (0.95, 1.0, 1.05)


class CalibrationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- base data


@dataclass(frozen=True)
class BaseConfig:
    """Synthetic base panel generator settings.

    With ``process="observation"`` each unit follows a negative binomial
    autoregression on its own observed log rate: the mean at ``t`` is the
    unit level plus year and covariate terms plus ``rho`` times the recent
    deviations of the observed log rate from the unit level, with a share
    ``second_lag_share`` of the persistence on the second lag.
    ``process="latent"`` instead puts an AR(1) process under the log mean,
    which no finite-order model here nests.  ``rho`` is solved for so the
    pooled lag-1 autocorrelation hits ``target_autocorr``.

    Defaults give state-sized counts (tens to thousands per cell).
    """

    n_units: int = 50
    n_periods: int = 37
    target_autocorr: float = 0.82
    mean_rate: float = 1.2e-4
    unit_rate_sd: float = 0.02
    exposure_range: tuple = (5e5, 3.5e7)
    exposure_growth: float = 0.01
    innovation_sd: float = 0.07
    year_sd: float = 0.03
    n_covariates: int = 3
    covariate_effect: float = 0.05
    phi: float = 60.0
    process: str = "observation"
    second_lag_share: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.process not in ("observation", "latent"):
            raise ValueError(f"process must be 'observation' or 'latent', got {self.process!r}")
        if not 0.0 <= self.second_lag_share <= 1.0:
            raise ValueError("second_lag_share must lie in [0, 1]")


def pooled_autocorr(panel: PanelData) -> float:
    """Correlation of each log rate with its own lag, pooled over all units and periods."""
    L = np.log(np.maximum(panel.counts, 0.5) / panel.exposure)
    return float(np.corrcoef(L[:, 1:].ravel(), L[:, :-1].ravel())[0, 1])


def _draw_base(cfg: BaseConfig, rho: float, seed_seq, white_noise=False) -> PanelData:
    # the same seed for every rho keeps the calibration curve smooth
    rng = np.random.default_rng(seed_seq)
    N, T1 = cfg.n_units, cfg.n_periods
    log_rate = np.log(cfg.mean_rate) + cfg.unit_rate_sd * rng.standard_normal(N)
    size = np.exp(rng.uniform(np.log(cfg.exposure_range[0]), np.log(cfg.exposure_range[1]), N))
    exposure = size[:, None] * (1 + cfg.exposure_growth) ** np.arange(T1)[None, :]
    year = rng.normal(0, cfg.year_sd, T1)
    X = np.zeros((N, T1, cfg.n_covariates))
    e_x = rng.standard_normal((N, T1, cfg.n_covariates))
    X[:, 0] = e_x[:, 0]
    for t in range(1, T1):
        X[:, t] = 0.9 * X[:, t - 1] + np.sqrt(1 - 0.81) * e_x[:, t]
    gamma = cfg.covariate_effect * rng.choice([-1.0, 1.0], cfg.n_covariates)
    if white_noise:
        log_rate[:] = np.log(cfg.mean_rate)
        year[:] = 0.0
        gamma[:] = 0.0
    fixed_part = year[None, :] + X @ gamma + np.log(exposure)
    e = rng.standard_normal((N, T1))
    if cfg.process == "latent":
        u = np.zeros((N, T1))
        # start at the stationary spread, capped at 20 innovations' worth for rho near 1
        u[:, 0] = cfg.innovation_sd * np.sqrt(min(1.0 / (1.0 - rho**2), 20.0)) * e[:, 0]
        for t in range(1, T1):
            u[:, t] = rho * u[:, t - 1] + cfg.innovation_sd * e[:, t]
        counts = nb_draw(rng, np.exp(log_rate[:, None] + fixed_part + u), cfg.phi)
    else:
        # observation driven: recent observed log rates feed the mean, each unit
        # reverting to its own level; persistence rho is split over two lags
        r1, r2 = rho * (1 - cfg.second_lag_share), rho * cfg.second_lag_share
        counts = np.zeros((N, T1), dtype=np.int64)
        dev = np.zeros((N, T1))
        for t in range(T1):
            eta = log_rate + fixed_part[:, t] + cfg.innovation_sd * e[:, t]
            if t >= 1:
                eta = eta + r1 * dev[:, t - 1]
            if t >= 2:
                eta = eta + r2 * dev[:, t - 2]
            counts[:, t] = nb_draw(rng, np.exp(eta), cfg.phi)
            dev[:, t] = np.log(np.maximum(counts[:, t], 0.5) / exposure[:, t]) - log_rate
    width = max(2, len(str(N - 1)))
    return PanelData(
        units=tuple(f"u{i:0{width}d}" for i in range(N)),
        times=np.arange(T1),
        counts=counts,
        exposure=exposure,
        schedules=tuple(PolicySchedule() for _ in range(N)),
        covariates=X,
        covariate_names=tuple(f"x{k + 1}" for k in range(cfg.n_covariates)),
    )


def synth_base_panel(cfg: BaseConfig = BaseConfig(), tol: float = 0.05) -> PanelData:
    """Draw a base panel whose pooled log-rate autocorrelation is within ``tol`` of the target.

    The persistence ``rho`` is found by bisection with the random draws
    held fixed.  A target of zero drops unit, year and covariate structure
    and gives white-noise rates.
    """
    if not 0.0 <= cfg.target_autocorr < 1.0:
        raise ValueError("target autocorrelation must lie in [0, 1)")
    ss = np.random.SeedSequence([cfg.seed, 7919])
    if cfg.target_autocorr == 0.0:
        return _draw_base(cfg, 0.0, ss, white_noise=True)
    lo, hi = 0.0, 0.999
    best = None
    for _ in range(40):
        mid = (lo + hi) / 2
        panel = _draw_base(cfg, mid, ss)
        r = pooled_autocorr(panel)
        if best is None or abs(r - cfg.target_autocorr) < abs(best[1] - cfg.target_autocorr):
            best = (panel, r, mid)
        if abs(r - cfg.target_autocorr) < 1e-3:
            break
        if r < cfg.target_autocorr:
            lo = mid
        else:
            hi = mid
    panel, r, rho = best
    if abs(r - cfg.target_autocorr) > tol:
        raise CalibrationError(f"autocorrelation calibration reached {r:.3f} (target {cfg.target_autocorr})")
    log.info("base panel persistence %.4f gives pooled autocorrelation %.4f", rho, r)
    return panel


# --------------------------------------------------------------------------- treatment


def assign_treatment(rng, panel: PanelData, n_treated: int, window=(1, 27), months: int = 12):
    """Schedules with ``n_treated`` units drawn without replacement.

    Enactment periods are uniform over ``window`` (period indices,
    inclusive) and start fractions uniform over the ``months`` month starts.
    """
    if not 0 <= n_treated <= panel.n_units:
        raise ValueError(f"cannot treat {n_treated} of {panel.n_units} units")
    chosen = rng.choice(panel.n_units, size=n_treated, replace=False)
    periods = rng.integers(window[0], window[1] + 1, size=n_treated)
    fractions = rng.integers(0, months, size=n_treated) / months
    schedules = [PolicySchedule() for _ in range(panel.n_units)]
    for i, per, frac in zip(chosen, periods, fractions):
        schedules[i] = PolicySchedule(int(panel.times[0] + per), float(frac))
    return tuple(schedules)


def effect_multipliers(panel: PanelData, schedules, beta0: float, beta1: float, b: int) -> np.ndarray:
    """Risk ratio applied to each cell (1 for untreated cells)."""
    probe = panel.with_schedules(schedules)
    W = effect_design(probe.event_time(), probe.enact_fractions(), b, probe.treated_mask())
    return np.exp(W[:, :, 0] * beta0 + W[:, :, 1] * beta1)


def injected_values(panel: PanelData, schedules, beta0, beta1, b) -> np.ndarray:
    """Scaled counts before rounding."""
    return panel.counts * effect_multipliers(panel, schedules, beta0, beta1, b)


def inject_effect(panel: PanelData, schedules, beta0: float, beta1: float, b: int) -> PanelData:
    """Multiply treated post-enactment counts by the risk ratio and round half up."""
    scaled = injected_values(panel, schedules, beta0, beta1, b)
    counts = np.maximum(np.floor(scaled + 0.5), 0).astype(np.int64)
    return panel.with_schedules(schedules).with_counts(counts)


# --------------------------------------------------------------------------- study


@dataclass(frozen=True)
class StudyConfig:
    n_treated: int = 15
    window: tuple = (1, 27)
    b: int = 5
    grid_beta0: tuple = DESK_GRID
    grid_beta1: tuple = DESK_GRID
    cells: Optional[tuple] = None  # explicit (e^beta0, e^beta1) pairs override the grid product
    replications: int = 500
    estimators: tuple = tuple(ESTIMATORS)
    horizons: tuple = (0, 1, 2, 3, 4, 5)
    seed: int = 0
    base: BaseConfig = field(default_factory=BaseConfig)
    base_panel: Optional[str] = None
    year_effects: bool = True
    level: float = 0.95
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not self.grid_beta0 or not self.grid_beta1:
            raise ValueError("effect grids must be nonempty")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")

    def grid(self):
        if self.cells is not None:
            return [tuple(c) for c in self.cells]
        return [(a, b) for a in self.grid_beta0 for b in self.grid_beta1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cells"] = None if self.cells is None else [list(c) for c in self.cells]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        base = d.pop("base", None) or {}
        if isinstance(base, dict):
            base = BaseConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in base.items()})
        for key in ("window", "grid_beta0", "grid_beta1", "estimators", "horizons"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        if d.get("cells") is not None:
            d["cells"] = tuple(tuple(c) for c in d["cells"])
        return cls(base=base, **d)


PRESETS = {
    "reference-null": dict(cells=((1.0, 1.0),), replications=1000),
    "reference-effect": dict(cells=((0.95, 0.95),), replications=1000),
    "reference-full": dict(grid_beta0=REFERENCE_GRID, grid_beta1=REFERENCE_GRID, replications=1000),
    "desk": dict(grid_beta0=DESK_GRID, grid_beta1=DESK_GRID, replications=500),
}


def study_specs(config: StudyConfig, panel: PanelData):
    x2 = tuple(panel.covariate_names)
    return {
        name: ModelSpec(b=config.b, x2=x2, year_effects=config.year_effects, **ESTIMATORS[name])
        for name in config.estimators
    }


def base_panel_for(config: StudyConfig) -> PanelData:
    if config.base_panel:
        return load_panel(config.base_panel)
    return synth_base_panel(config.base)


def worker_count(requested: int) -> int:
    cap = os.environ.get("DAMLAB_THREADS")
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def run_replication(base: PanelData, config: StudyConfig, cell_index: int, rep: int) -> list:
    """Fit every estimator on one injected panel; returns one record per (estimator, horizon)."""
    eb0, eb1 = config.grid()[cell_index]
    beta0, beta1 = math.log(eb0), math.log(eb1)
    # assignments depend on (seed, rep) only, so every grid cell sees the same draws
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, rep]))
    schedules = assign_treatment(rng, base, config.n_treated, config.window)
    panel = inject_effect(base, schedules, beta0, beta1, config.b)
    ref = coding_integer_enactment(config.b, max(config.horizons) + 1)
    records = []
    for name, spec in study_specs(config, base).items():
        try:
            fit = fit_mle(panel, spec)
            failed = fit.cov is None
            error = "" if not failed else "covariance unavailable"
        except Exception as exc:  # noqa: BLE001 - any fit failure is recorded, not fatal
            fit, failed, error = None, True, f"{type(exc).__name__}: {exc}"
        for h in config.horizons:
            true_rr = float(np.exp(ref.log_rr(beta0, beta1, h)))
            rec = dict(
                exp_beta0=eb0, exp_beta1=eb1, rep=rep, estimator=name, horizon=h,
                true_rr=true_rr, est_rr=np.nan, lo=np.nan, hi=np.nan, reject=np.nan,
                failed=failed, error=error,
            )
            if not failed:
                est, lo, hi = summarize_rr(fit, ref, h, config.level)
                rec.update(est_rr=est, lo=lo, hi=hi, reject=float(lo > 1.0 or hi < 1.0))
            records.append(rec)
    return records


def _run_chunk(args):
    base, config, jobs = args
    out = []
    for cell_index, rep in jobs:
        out.extend(run_replication(base, config, cell_index, rep))
    return out


def aggregate(estimates: pd.DataFrame) -> pd.DataFrame:
    """Metrics per (cell, estimator, horizon); SD uses the population divisor so MSE = bias^2 + SD^2."""
    keys = ["exp_beta0", "exp_beta1", "estimator", "horizon"]
    est = estimates.sort_values(keys + ["rep"], kind="mergesort")
    rows = []
    for key, g in est.groupby(keys, sort=True):
        ok = g[~g["failed"].astype(bool)]
        true_rr = float(g["true_rr"].iloc[0])
        x = ok["est_rr"].to_numpy(dtype=float)
        if len(x):
            bias = float(np.mean(x) - true_rr)
            sd = float(np.std(x))
            mse = float(np.mean((x - true_rr) ** 2))
            rej = float(np.mean(ok["reject"].to_numpy(dtype=float)))
        else:
            bias = sd = mse = rej = np.nan
        rows.append(dict(zip(keys, key), true_rr=true_rr, bias=bias, sd=sd, mse=mse,
                         rejection=rej, n_ok=len(x), n_failed=int(len(g) - len(x))))
    out = pd.DataFrame(rows)
    order = {name: i for i, name in enumerate(ESTIMATORS)}
    out["_o"] = out["estimator"].map(order)
    out = out.sort_values(["exp_beta0", "exp_beta1", "horizon", "_o"], kind="mergesort").drop(columns="_o")
    return out.reset_index(drop=True)


@dataclass
class StudyResult:
    metrics: pd.DataFrame
    estimates: pd.DataFrame
    config: StudyConfig
    base_autocorr: float


def run_study(config: StudyConfig, reps: Optional[Sequence[int]] = None, base: Optional[PanelData] = None,
              progress=None) -> StudyResult:
    """Run every grid cell; ``reps`` restricts to a subset of replication indices."""
    base = base_panel_for(config) if base is None else base
    reps = list(range(config.replications)) if reps is None else list(reps)
    cells = config.grid()
    workers = worker_count(config.workers)
    records = []
    for ci, cell in enumerate(cells):
        jobs = [(ci, r) for r in reps]
        if workers > 1:
            chunks = [jobs[i::workers] for i in range(workers)]
            with ProcessPoolExecutor(max_workers=workers) as ex:
                for part in ex.map(_run_chunk, [(base, config, c) for c in chunks]):
                    records.extend(part)
        else:
            records.extend(_run_chunk((base, config, jobs)))
        if progress is not None:
            progress(ci, cell)
    estimates = pd.DataFrame.from_records(records)
    estimates = estimates.sort_values(["exp_beta0", "exp_beta1", "rep", "estimator", "horizon"], kind="mergesort")
    estimates = estimates.reset_index(drop=True)
    return StudyResult(aggregate(estimates), estimates, config, pooled_autocorr(base))


# --------------------------------------------------------------------------- figure data


def figure_data(metrics: pd.DataFrame, horizon: int = 5) -> dict:
    """Plot-ready tables: bias and max-MSE slices at ``horizon`` plus the full grids."""
    at = metrics[metrics["horizon"] == horizon]
    a = at[np.isclose(at["exp_beta1"], 1.0)].assign(panel="a", true_effect=lambda d: d["exp_beta0"])
    b = at[np.isclose(at["exp_beta0"], 1.0)].assign(panel="b", true_effect=lambda d: d["exp_beta1"])
    cols = ["panel", "true_effect", "estimator", "bias"]
    bias = pd.concat([a[cols], b[cols]], ignore_index=True)
    mse_a = at.groupby(["exp_beta0", "estimator"], sort=True)["mse"].max().reset_index()
    mse_a = mse_a.rename(columns={"exp_beta0": "true_effect"}).assign(panel="a")
    mse_b = at.groupby(["exp_beta1", "estimator"], sort=True)["mse"].max().reset_index()
    mse_b = mse_b.rename(columns={"exp_beta1": "true_effect"}).assign(panel="b")
    mse = pd.concat([mse_a, mse_b], ignore_index=True)[["panel", "true_effect", "estimator", "mse"]]
    grid_cols = ["exp_beta0", "exp_beta1", "horizon", "estimator"]
    return {
        "bias_slices.csv": bias,
        "max_mse_slices.csv": mse,
        "bias_grid.csv": metrics[grid_cols + ["bias"]],
        "mse_grid.csv": metrics[grid_cols + ["mse"]],
    }


def write_outputs(result: StudyResult, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    fmt = "%.10g"
    result.metrics.to_csv(os.path.join(outdir, "metrics.csv"), index=False, float_format=fmt)
    result.estimates.to_csv(os.path.join(outdir, "estimates.csv"), index=False, float_format=fmt)
    figdir = os.path.join(outdir, "figure_data")
    os.makedirs(figdir, exist_ok=True)
    for name, df in figure_data(result.metrics, horizon=result.config.b).items():
        df.to_csv(os.path.join(figdir, name), index=False, float_format=fmt)
