"""Model specification and the shared linear-predictor machinery.

Every family fitted here has a linear predictor of the form

    eta_t = alpha + sum_k delta_k * (L_{t-k} - d * M_{t-k}) + M_t + X2_t @ gamma2 + offset_t
    M_t   = Z_t @ theta + X1_t @ gamma1

where ``L`` is the lagged outcome on the model scale (``y`` for linear
models, the floored log rate for count models), ``Z`` holds the policy
columns and ``d`` is 1 for debiased families and 0 otherwise.  Rows with
``t < p`` only serve as conditioning values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .effect_coding import distributed_lag_row, effect_design
from .panel import PanelData, unit_fixed_effect_columns

FAMILIES = ("linear-ar", "linear-dam", "nb-adl-effect", "nb-adl-change", "nb-dam")
NB_FAMILIES = ("nb-adl-effect", "nb-adl-change", "nb-dam")
ZERO_FLOOR = 0.5


class DesignError(ValueError):
    pass


class RankDeficiencyError(DesignError):
    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(f"design is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class ModelSpec:
    """Model family, autoregressive order, policy coding and covariate partition.

    ``policy="phase-in"`` codes the policy as (instant, phase-in) weights over
    ``b`` periods; ``policy="distributed-lag"`` uses ``A_t, ..., A_{t-b}``
    (linear families only).  ``fixed`` pins parameters by name, e.g.
    ``{"delta1": 1.0}``.
    """

    family: str = "nb-dam"
    p: int = 1
    b: int = 5
    x1: tuple = ()
    x2: tuple = ()
    year_effects: bool = True
    unit_effects: bool = False
    policy: str = "phase-in"
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DesignError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.p < 0 or int(self.p) != self.p:
            raise DesignError("p must be a nonnegative integer")
        if self.b < 1:
            raise DesignError("phase-in length b must be positive")
        if set(self.x1) & set(self.x2):
            raise DesignError(f"covariates in both X1 and X2: {sorted(set(self.x1) & set(self.x2))}")
        if self.policy not in ("phase-in", "distributed-lag"):
            raise DesignError(f"unknown policy coding {self.policy!r}")
        if self.policy == "distributed-lag" and self.family in NB_FAMILIES:
            raise DesignError("distributed-lag coding is only offered for linear families")
        object.__setattr__(self, "x1", tuple(self.x1))
        object.__setattr__(self, "x2", tuple(self.x2))
        object.__setattr__(self, "fixed", dict(self.fixed))

    @property
    def debiased(self) -> bool:
        return self.family in ("linear-dam", "nb-dam")

    @property
    def count_model(self) -> bool:
        return self.family in NB_FAMILIES

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "p": self.p,
            "b": self.b,
            "x1": list(self.x1),
            "x2": list(self.x2),
            "year_effects": self.year_effects,
            "unit_effects": self.unit_effects,
            "policy": self.policy,
            "fixed": dict(self.fixed),
        }


def policy_columns(panel: PanelData, spec: ModelSpec):
    """Policy design ``Z`` of shape ``(N, T1, q)`` and its column names."""
    if spec.policy == "distributed-lag":
        A = panel.policy_indicator()
        Z = np.zeros((panel.n_units, panel.n_periods, spec.b + 1))
        for i in range(panel.n_units):
            for t in range(panel.n_periods):
                Z[i, t] = distributed_lag_row(A[i, : t + 1], spec.b)
        return Z, tuple(f"theta{j}" for j in range(spec.b + 1))
    Z = effect_design(panel.event_time(), panel.enact_fractions(), spec.b, panel.treated_mask())
    if spec.family == "nb-adl-change":
        Z = change_code(Z)
    return Z, ("beta0", "beta1")


def change_code(Z: np.ndarray) -> np.ndarray:
    """First differences along time; the first period differences against zero."""
    out = Z.copy()
    out[:, 1:] -= Z[:, :-1]
    return out


def lag_outcome(panel: PanelData, spec: ModelSpec, outcome=None):
    """Model-scale outcome used in lags, plus the count of floored zero cells."""
    if not spec.count_model:
        return (panel.counts.astype(float) if outcome is None else np.asarray(outcome, dtype=float)), 0
    y = panel.counts.astype(float)
    zeros = int(np.sum(y[:, : max(panel.n_periods - 1, 0)] == 0)) if spec.p > 0 else 0
    return np.log(np.maximum(y, ZERO_FLOOR) / panel.exposure), zeros


@dataclass
class Design:
    """Arrays for one (panel, spec) pair, fitted rows ``t >= p``."""

    spec: ModelSpec
    y: np.ndarray          # (N, T1) outcome
    L: np.ndarray          # (N, T1) lag-scale outcome
    Z: np.ndarray          # (N, T1, q)
    X1: np.ndarray         # (N, T1, k1)
    X2: np.ndarray         # (N, T1, k2)
    offset: np.ndarray     # (N, T1)
    names: tuple
    zero_lags: int = 0
    fixed_mask: Optional[np.ndarray] = None
    fixed_values: Optional[np.ndarray] = None

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def q(self) -> int:
        return self.Z.shape[2]

    @property
    def k1(self) -> int:
        return self.X1.shape[2]

    @property
    def k2(self) -> int:
        return self.X2.shape[2]

    @property
    def n_mean(self) -> int:
        return 1 + self.p + self.q + self.k1 + self.k2

    @property
    def n_obs(self) -> int:
        return self.y.shape[0] * (self.y.shape[1] - self.p)

    def split(self, theta):
        p, q, k1 = self.p, self.q, self.k1
        alpha = theta[0]
        delta = theta[1 : 1 + p]
        beta = theta[1 + p : 1 + p + q]
        g1 = theta[1 + p + q : 1 + p + q + k1]
        g2 = theta[1 + p + q + k1 : self.n_mean]
        return alpha, delta, beta, g1, g2

    def systematic(self, beta, g1):
        """``M`` over all periods, shape ``(N, T1)``."""
        M = self.Z @ beta
        if self.k1:
            M = M + self.X1 @ g1
        return M

    def eta(self, theta):
        """Linear predictor on fitted rows, shape ``(N, T1 - p)``."""
        alpha, delta, beta, g1, g2 = self.split(theta)
        p, T1 = self.p, self.y.shape[1]
        M = self.systematic(beta, g1)
        eta = alpha + M[:, p:] + self.offset[:, p:]
        if self.k2:
            eta = eta + self.X2[:, p:] @ g2
        d = 1.0 if self.spec.debiased else 0.0
        for k in range(1, p + 1):
            eta = eta + delta[k - 1] * (self.L[:, p - k : T1 - k] - d * M[:, p - k : T1 - k])
        return eta

    def jacobian(self, theta):
        """``d eta / d theta`` on fitted rows, shape ``(N, T1 - p, n_mean)``."""
        alpha, delta, beta, g1, g2 = self.split(theta)
        p, T1 = self.p, self.y.shape[1]
        d = 1.0 if self.spec.debiased else 0.0
        M = self.systematic(beta, g1)
        n, tf = self.y.shape[0], T1 - p
        J = np.empty((n, tf, self.n_mean))
        J[:, :, 0] = 1.0
        Zj = self.Z[:, p:].copy()
        X1j = self.X1[:, p:].copy()
        for k in range(1, p + 1):
            J[:, :, k] = self.L[:, p - k : T1 - k] - d * M[:, p - k : T1 - k]
            if d:
                Zj -= delta[k - 1] * self.Z[:, p - k : T1 - k]
                X1j -= delta[k - 1] * self.X1[:, p - k : T1 - k]
        o = 1 + p
        J[:, :, o : o + self.q] = Zj
        o += self.q
        J[:, :, o : o + self.k1] = X1j
        o += self.k1
        J[:, :, o : o + self.k2] = self.X2[:, p:]
        return J

    def check_rank(self, theta, tol=1e-10):
        """Raise :class:`RankDeficiencyError` if the free Jacobian columns are collinear."""
        from scipy.linalg import qr

        free = ~self.fixed_mask[: self.n_mean]
        J = self.jacobian(theta).reshape(-1, self.n_mean)[:, free]
        names = [n for n, f in zip(self.names, free) if f]
        if J.shape[1] == 0:
            return
        scale = np.linalg.norm(J, axis=0)
        scale[scale == 0] = 1.0
        _, R, piv = qr(J / scale, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > tol * max(diag.max(), 1.0) * max(J.shape)))
        if rank < J.shape[1]:
            raise RankDeficiencyError([names[j] for j in piv[rank:]])


def build_design(panel: PanelData, spec: ModelSpec, extra_names=(), outcome=None) -> Design:
    """Assemble design arrays.

    ``extra_names`` are appended parameter names (dispersion or scale);
    ``outcome`` replaces the panel counts with a real-valued response,
    which only linear families accept.
    """
    if outcome is not None:
        if spec.count_model:
            raise DesignError("count families model the panel counts; outcome override is linear-only")
        outcome = np.asarray(outcome, dtype=float)
        if outcome.shape != panel.counts.shape:
            raise DesignError(f"outcome must have shape {panel.counts.shape}")
    if panel.n_periods <= spec.p:
        raise DesignError(f"need more than p={spec.p} periods, panel has {panel.n_periods}")
    for name in spec.x1 + spec.x2:
        if name not in panel.covariate_names:
            raise DesignError(f"unknown covariate {name!r}")
    Z, znames = policy_columns(panel, spec)
    L, zeros = lag_outcome(panel, spec, outcome)
    X1 = panel.covariate(spec.x1)
    X2 = panel.covariate(spec.x2)
    x2names = list(spec.x2)
    if spec.year_effects:
        # reference is the first fitted period so the indicators stay independent of the intercept
        times = panel.times[spec.p + 1 :]
        fe = np.zeros((panel.n_units, panel.n_periods, len(times)))
        for k, t in enumerate(times):
            fe[:, panel.times == t, k] = 1.0
        X2 = np.concatenate([X2, fe], axis=2)
        x2names += [f"year_{t}" for t in times]
    if spec.unit_effects:
        fe, fnames = unit_fixed_effect_columns(panel)
        X2 = np.concatenate([X2, fe], axis=2)
        x2names += list(fnames)
    names = (
        ("alpha",)
        + tuple(f"delta{k}" for k in range(1, spec.p + 1))
        + znames
        + tuple(f"x1:{n}" for n in spec.x1)
        + tuple(x2names)
        + tuple(extra_names)
    )
    offset = np.log(panel.exposure) if spec.count_model else np.zeros(panel.counts.shape)
    fixed_mask = np.zeros(len(names), dtype=bool)
    fixed_values = np.zeros(len(names))
    for key, val in spec.fixed.items():
        if key not in names:
            raise DesignError(f"cannot fix unknown parameter {key!r}")
        j = names.index(key)
        fixed_mask[j] = True
        fixed_values[j] = float(val)
    return Design(
        spec=spec,
        y=panel.counts.astype(float) if outcome is None else outcome,
        L=L,
        Z=Z,
        X1=X1,
        X2=X2,
        offset=offset,
        names=names,
        zero_lags=zeros,
        fixed_mask=fixed_mask,
        fixed_values=fixed_values,
    )
