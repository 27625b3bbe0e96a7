"""Balanced unit x time count panels, CSV I/O and covariate reduction."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)


class PanelError(ValueError):
    """Raised for malformed or unbalanced panel input."""


@dataclass(frozen=True)
class PolicySchedule:
    """Enactment of a single permanent policy; ``enact_period=None`` means never treated."""

    enact_period: Optional[int] = None
    enact_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.enact_fraction < 1.0:
            raise PanelError(f"enactment fraction must lie in [0, 1), got {self.enact_fraction}")
        if self.enact_period is None and self.enact_fraction != 0.0:
            raise PanelError("untreated schedule cannot carry an enactment fraction")

    @classmethod
    def from_date(cls, date) -> "PolicySchedule":
        if date is None or (isinstance(date, float) and math.isnan(date)):
            return cls()
        period = math.floor(date)
        return cls(int(period), round(float(date) - period, 12))

    @property
    def treated(self) -> bool:
        return self.enact_period is not None

    @property
    def date(self) -> Optional[float]:
        if self.enact_period is None:
            return None
        return self.enact_period + self.enact_fraction

    def active(self, times) -> np.ndarray:
        times = np.asarray(times)
        if self.enact_period is None:
            return np.zeros(times.shape, dtype=int)
        return (times >= self.enact_period).astype(int)


@dataclass(frozen=True)
class PanelData:
    """Rectangular panel; arrays are indexed ``[unit, period]`` and frozen after construction.

    ``times`` holds the integer period labels (contiguous); enactment
    periods use the same labels.
    """

    units: tuple
    times: np.ndarray
    counts: np.ndarray
    exposure: np.ndarray
    schedules: tuple
    covariates: np.ndarray = None
    covariate_names: tuple = ()

    def __post_init__(self):
        n, t1 = len(self.units), len(self.times)
        counts = np.array(self.counts)
        exposure = np.array(self.exposure, dtype=float)
        times = np.array(self.times, dtype=int)
        cov = np.zeros((n, t1, 0)) if self.covariates is None else np.array(self.covariates, dtype=float)
        if counts.shape != (n, t1) or exposure.shape != (n, t1):
            raise PanelError(f"counts/exposure must have shape {(n, t1)}")
        bad = (counts < 0) | (counts != np.round(counts))
        if bad.any():
            i, t = np.argwhere(bad)[0]
            raise PanelError(f"count must be a nonnegative integer at ({self.units[i]}, {times[t]})")
        if np.any(~(exposure > 0)):
            i, t = np.argwhere(~(exposure > 0))[0]
            raise PanelError(f"exposure must be positive at ({self.units[i]}, {times[t]})")
        if len(self.schedules) != n:
            raise PanelError("one schedule per unit is required")
        if cov.shape != (n, t1, len(self.covariate_names)):
            raise PanelError("covariate array does not match covariate names")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise PanelError("duplicate covariate names")
        if t1 > 1 and np.any(np.diff(times) != 1):
            raise PanelError("time labels must be contiguous integers")
        counts = counts.astype(np.int64)
        for arr in (counts, exposure, cov, times):
            arr.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "counts", counts)
        set_(self, "exposure", exposure)
        set_(self, "covariates", cov)
        set_(self, "times", times)
        set_(self, "units", tuple(self.units))
        set_(self, "schedules", tuple(self.schedules))
        set_(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.times)

    @property
    def T(self) -> int:
        """Last period index (periods are ``0..T``)."""
        return len(self.times) - 1

    def policy_indicator(self) -> np.ndarray:
        """``A[i, t]``, monotone in ``t`` for each unit."""
        return np.stack([s.active(self.times) for s in self.schedules])

    def event_time(self) -> np.ndarray:
        """Periods since enactment; large negative for never-treated units."""
        out = np.full((self.n_units, self.n_periods), -(10**6), dtype=int)
        for i, s in enumerate(self.schedules):
            if s.treated:
                out[i] = self.times - s.enact_period
        return out

    def treated_mask(self) -> np.ndarray:
        return np.array([s.treated for s in self.schedules])

    def enact_fractions(self) -> np.ndarray:
        return np.array([s.enact_fraction for s in self.schedules])

    def covariate(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.covariate_names.index(n) for n in names]
        return self.covariates[:, :, idx]

    def with_counts(self, counts) -> "PanelData":
        return replace(self, counts=np.asarray(counts))

    def with_exposure(self, exposure) -> "PanelData":
        return replace(self, exposure=np.asarray(exposure, dtype=float))

    def with_schedules(self, schedules) -> "PanelData":
        return replace(self, schedules=tuple(schedules))

    def with_covariates(self, values, names, keep=True) -> "PanelData":
        """Append (or with ``keep=False`` replace) covariate columns."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if keep:
            values = np.concatenate([self.covariates, values], axis=2)
            names = tuple(self.covariate_names) + tuple(names)
        return replace(self, covariates=values, covariate_names=tuple(names))

    def subset_units(self, idx) -> "PanelData":
        idx = list(idx)
        return replace(
            self,
            units=tuple(self.units[i] for i in idx),
            counts=self.counts[idx],
            exposure=self.exposure[idx],
            schedules=tuple(self.schedules[i] for i in idx),
            covariates=self.covariates[idx],
        )

    def equals(self, other: "PanelData", atol: float = 1e-12) -> bool:
        if self.units != other.units or self.covariate_names != other.covariate_names:
            return False
        if not np.array_equal(self.times, other.times) or not np.array_equal(self.counts, other.counts):
            return False
        if not np.allclose(self.exposure, other.exposure, rtol=0, atol=atol):
            return False
        if not np.allclose(self.covariates, other.covariates, rtol=0, atol=atol):
            return False
        for a, b in zip(self.schedules, other.schedules):
            if a.enact_period != b.enact_period or abs(a.enact_fraction - b.enact_fraction) > atol:
                return False
        return True


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for CSV input; ``covariates=None`` takes every remaining column."""

    unit: str = "unit"
    time: str = "time"
    count: str = "count"
    exposure: str = "exposure"
    policy_date: str = "policy_date"
    covariates: Optional[Sequence[str]] = None


def load_panel(source, schema: PanelSchema = PanelSchema()) -> PanelData:
    """Read a long-format CSV (path, text or stream) into a balanced panel."""
    if isinstance(source, str) and "\n" in source:
        source = io.StringIO(source)
    df = pd.read_csv(source, dtype={schema.unit: str}, encoding="utf-8", float_precision="round_trip")
    for col in (schema.unit, schema.time, schema.count, schema.exposure):
        if col not in df.columns:
            raise PanelError(f"missing required column '{col}'")
    if df[schema.time].isna().any() or not np.all(df[schema.time] == np.round(df[schema.time])):
        raise PanelError("time column must hold integers")
    df[schema.time] = df[schema.time].astype(int)

    dup = df.duplicated([schema.unit, schema.time], keep="first")
    if dup.any():
        row = df[dup].iloc[0]
        raise PanelError(f"duplicate cell ({row[schema.unit]}, {row[schema.time]})")

    units = list(dict.fromkeys(df[schema.unit]))
    t_min, t_max = int(df[schema.time].min()), int(df[schema.time].max())
    times = np.arange(t_min, t_max + 1)
    present = set(zip(df[schema.unit], df[schema.time]))
    for u in units:
        for t in times:
            if (u, int(t)) not in present:
                raise PanelError(f"missing cell ({u}, {t})")

    rows = df.set_index([schema.unit, schema.time])
    idx = pd.MultiIndex.from_product([units, times])
    rows = rows.loc[idx]

    counts = rows[schema.count].to_numpy(dtype=float)
    exposure = rows[schema.exposure].to_numpy(dtype=float)
    n, t1 = len(units), len(times)
    for k, (c, e) in enumerate(zip(counts, exposure)):
        if not (c >= 0) or c != round(c):
            raise PanelError(f"invalid count {c} at ({idx[k][0]}, {idx[k][1]})")
        if not (e > 0):
            raise PanelError(f"nonpositive exposure {e} at ({idx[k][0]}, {idx[k][1]})")

    skip = {schema.unit, schema.time, schema.count, schema.exposure, schema.policy_date}
    cov_names = list(schema.covariates) if schema.covariates is not None else [c for c in df.columns if c not in skip]
    for c in cov_names:
        if c not in df.columns:
            raise PanelError(f"missing covariate column '{c}'")
        if rows[c].isna().any():
            k = int(np.flatnonzero(rows[c].isna().to_numpy())[0])
            raise PanelError(f"missing covariate '{c}' at ({idx[k][0]}, {idx[k][1]})")
    cov = rows[cov_names].to_numpy(dtype=float).reshape(n, t1, len(cov_names))

    schedules = []
    for u in units:
        if schema.policy_date in df.columns:
            dates = rows.loc[u][schema.policy_date].dropna().unique()
            if len(dates) > 1:
                raise PanelError(f"unit {u} has conflicting policy dates {sorted(dates)}")
            schedules.append(PolicySchedule.from_date(float(dates[0]) if len(dates) else None))
        else:
            schedules.append(PolicySchedule())

    return PanelData(
        units=tuple(units),
        times=times,
        counts=counts.reshape(n, t1).astype(np.int64),
        exposure=exposure.reshape(n, t1),
        schedules=tuple(schedules),
        covariates=cov,
        covariate_names=tuple(cov_names),
    )


def panel_to_frame(panel: PanelData) -> pd.DataFrame:
    n, t1 = panel.n_units, panel.n_periods
    data = {
        "unit": np.repeat(np.array(panel.units, dtype=object), t1),
        "time": np.tile(panel.times, n),
        "count": panel.counts.ravel(),
        "exposure": panel.exposure.ravel(),
        "policy_date": np.repeat([s.date if s.treated else np.nan for s in panel.schedules], t1),
    }
    for k, name in enumerate(panel.covariate_names):
        data[name] = panel.covariates[:, :, k].ravel()
    return pd.DataFrame(data)


def save_panel(panel: PanelData, dest) -> None:
    """Write the panel in the same CSV layout :func:`load_panel` reads."""
    panel_to_frame(panel).to_csv(dest, index=False, float_format="%.17g")


def year_fixed_effect_columns(panel: PanelData, reference=None):
    """Period indicators with ``reference`` (default the first period) omitted.

    Returns ``(values, names)`` with ``values`` of shape ``(N, T1, T1 - 1)``.
    """
    times = panel.times
    ref = times[0] if reference is None else reference
    keep = [t for t in times if t != ref]
    values = np.zeros((panel.n_units, panel.n_periods, len(keep)))
    for k, t in enumerate(keep):
        values[:, times == t, k] = 1.0
    return values, tuple(f"year_{t}" for t in keep)


def unit_fixed_effect_columns(panel: PanelData, reference=None):
    ref = panel.units[0] if reference is None else reference
    keep = [u for u in panel.units if u != ref]
    values = np.zeros((panel.n_units, panel.n_periods, len(keep)))
    for k, u in enumerate(keep):
        values[panel.units.index(u), :, k] = 1.0
    return values, tuple(f"unit_{u}" for u in keep)


@dataclass(frozen=True)
class CovariateReduction:
    """Correlation-form PCA fitted on stacked rows."""

    columns: tuple
    means: np.ndarray
    sds: np.ndarray
    loadings: np.ndarray
    explained: np.ndarray
    singular_values: np.ndarray
    dropped: tuple = field(default=())

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return ((X - self.means) / self.sds) @ self.loadings

    def inverse_transform(self, Z) -> np.ndarray:
        return (np.asarray(Z) @ self.loadings.T) * self.sds + self.means

    def to_json(self) -> str:
        return json.dumps(
            {
                "columns": list(self.columns),
                "means": self.means.tolist(),
                "sds": self.sds.tolist(),
                "loadings": self.loadings.tolist(),
                "explained": self.explained.tolist(),
                "singular_values": self.singular_values.tolist(),
                "dropped": list(self.dropped),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CovariateReduction":
        d = json.loads(text)
        k = len(d["explained"])
        loadings = np.array(d["loadings"], dtype=float).reshape(len(d["columns"]), k)
        return cls(
            columns=tuple(d["columns"]),
            means=np.array(d["means"]),
            sds=np.array(d["sds"]),
            loadings=loadings,
            explained=np.array(d["explained"]),
            singular_values=np.array(d["singular_values"]),
            dropped=tuple(d["dropped"]),
        )


def reduce_covariates(X, variance_threshold: float = 0.95, columns=None) -> CovariateReduction:
    """Standardize, then keep the fewest components reaching ``variance_threshold``."""
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError("variance_threshold must lie in (0, 1]")
    X = np.asarray(X, dtype=float)
    columns = tuple(columns) if columns is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    sds = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
    const = ~(sds > 0)
    dropped = tuple(c for c, z in zip(columns, const) if z)
    if dropped:
        log.warning("dropping zero-variance covariates: %s", ", ".join(dropped))
    keep = ~const
    X, sds = X[:, keep], sds[keep]
    columns = tuple(c for c, z in zip(columns, keep) if z)
    means = X.mean(axis=0)
    Z = (X - means) / sds
    _, s, vt = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * s.max())) if s.size else 0
    frac = s**2 / np.sum(s**2)
    cum = np.cumsum(frac)
    # cumulative fractions can land an ulp under 1.0
    k = int(np.searchsorted(cum, variance_threshold - 1e-12) + 1)
    k = min(k, rank)
    V = vt[:k].T
    # sign convention: largest-magnitude loading of each component is positive
    signs = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(k)])
    V = V * signs
    return CovariateReduction(
        columns=columns,
        means=means,
        sds=sds,
        loadings=V,
        explained=frac[:k],
        singular_values=s,
        dropped=dropped,
    )


def reduce_panel_covariates(panel: PanelData, names=None, variance_threshold=0.95, prefix="pc"):
    """Replace ``names`` (default all) by their principal components, pooled over all rows."""
    names = list(panel.covariate_names if names is None else names)
    X = panel.covariate(names).reshape(-1, len(names))
    red = reduce_covariates(X, variance_threshold, columns=names)
    used = [panel.covariate_names.index(c) for c in red.columns]
    Z = red.transform(panel.covariates[:, :, used].reshape(-1, len(used)))
    Z = Z.reshape(panel.n_units, panel.n_periods, red.k)
    others = [n for n in panel.covariate_names if n not in names]
    out = panel.with_covariates(panel.covariate(others), others, keep=False)
    out = out.with_covariates(Z, [f"{prefix}{j + 1}" for j in range(red.k)])
    return out, red
