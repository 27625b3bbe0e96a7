"""Instant + linear phase-in policy coding.

A policy effect on the log rate is represented through two weight sequences
indexed by periods since enactment: ``w0`` multiplies the instant effect
``beta0`` and ``w1`` multiplies the phase-in effect ``beta1``, so the
cumulative log rate ratio is ``f_t = w0_t * beta0 + w1_t * beta1``.
Weights rather than ``f_t`` are the primitive so that one coding serves the
linear models, the log-link models and the simulation harness alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EffectCoding:
    """Weights on (beta0, beta1) for periods ``0..horizon`` after enactment."""

    b: int
    w0: np.ndarray
    w1: np.ndarray
    t_e: float = 0.0

    def __post_init__(self):
        if len(self.w0) != len(self.w1):
            raise ValueError("w0 and w1 must have equal length")
        self.w0.setflags(write=False)
        self.w1.setflags(write=False)

    @property
    def horizon(self) -> int:
        return len(self.w0) - 1

    def weights(self, t):
        """Weights at event time(s) ``t``; zero before enactment, constant past the horizon."""
        t = np.asarray(t)
        idx = np.clip(t, 0, self.horizon).astype(int)
        pre = t < 0
        w0 = np.where(pre, 0.0, self.w0[idx])
        w1 = np.where(pre, 0.0, self.w1[idx])
        return w0, w1

    def log_rr(self, beta0: float, beta1: float, t) -> np.ndarray:
        w0, w1 = self.weights(t)
        return w0 * beta0 + w1 * beta1


@dataclass(frozen=True)
class EffectCurve:
    t: np.ndarray
    log_rr: np.ndarray

    @property
    def rr(self) -> np.ndarray:
        return np.exp(self.log_rr)


def _check_b(b):
    if int(b) != b or b < 1:
        raise ValueError(f"phase-in length b must be a positive integer, got {b!r}")
    return int(b)


def coding_integer_enactment(b: int, horizon: int) -> EffectCoding:
    """Recursive coding for a policy active from the start of period 0.

    The phase-in weight grows by ``1/(2b)`` in period 0, by ``1/b`` in
    each of periods ``1..b-1`` and by ``1/(2b)`` in period ``b``, after
    which it stays at one.
    """
    b = _check_b(b)
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    t = np.arange(horizon + 1)
    inc = np.where(t == 0, 1.0 / (2 * b), np.where(t < b, 1.0 / b, np.where(t == b, 1.0 / (2 * b), 0.0)))
    w1 = np.cumsum(inc)
    # cumulative sums drift by an ulp; the total is exactly one once phase-in ends
    w1[t >= b] = 1.0
    return EffectCoding(b=b, w0=np.ones(horizon + 1), w1=w1, t_e=0.0)


def coding_partial_year(t_e: float, b: int, horizon: int) -> EffectCoding:
    """Period-averaged coding for a policy starting a fraction ``t_e`` into period 0.

    The continuous-time log effect is ``beta0`` from ``t_e`` onward plus a
    ramp ``min(max(s - t_e, 0) / b, 1) * beta1``; each weight is the
    average of that function over one period.
    """
    b = _check_b(b)
    if not 0.0 <= t_e < 1.0:
        raise ValueError(f"enactment fraction must lie in [0, 1), got {t_e!r}")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if t_e == 0.0:
        return coding_integer_enactment(b, horizon)
    t = np.arange(horizon + 1, dtype=float)
    w0 = np.ones(horizon + 1)
    w0[0] = 1.0 - t_e
    w1 = np.empty(horizon + 1)
    for i, ti in enumerate(t):
        if ti == 0:
            w1[i] = (1.0 - t_e) ** 2 / (2 * b)
        elif ti < b:
            w1[i] = (ti + 0.5 - t_e) / b
        elif ti == b:
            w1[i] = 1.0 - t_e**2 / (2 * b)
        else:
            w1[i] = 1.0
    return EffectCoding(b=b, w0=w0, w1=w1, t_e=float(t_e))


def effect_curve(beta0: float, beta1: float, coding: EffectCoding, t=None) -> EffectCurve:
    """Log and ratio-scale effect at event times ``t`` (default ``0..horizon``)."""
    if t is None:
        t = np.arange(coding.horizon + 1)
    t = np.asarray(t)
    return EffectCurve(t=t, log_rr=coding.log_rr(beta0, beta1, t))


def distributed_lag_row(a_history, order: int) -> np.ndarray:
    """Design row ``(A_t, A_{t-1}, ..., A_{t-order})`` for the last element of ``a_history``."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    a = np.asarray(a_history, dtype=float)
    t = len(a) - 1
    row = np.zeros(order + 1)
    for j in range(order + 1):
        if t - j >= 0:
            row[j] = a[t - j]
    return row


def effect_design(event_time: np.ndarray, t_e: np.ndarray, b: int, treated: np.ndarray) -> np.ndarray:
    """Stack ``(w0, w1)`` columns for a unit x time grid.

    Parameters
    ----------
    event_time : (N, T1) int array
        Period index minus the unit's enactment period.
    t_e : (N,) array
        Enactment fractions.
    b : int
        Phase-in length.
    treated : (N,) bool array
        Units with a policy; others get zero weights everywhere.

    Returns
    -------
    (N, T1, 2) array
    """
    event_time = np.asarray(event_time)
    n, t1 = event_time.shape
    out = np.zeros((n, t1, 2))
    horizon = max(b + 1, int(event_time.max(initial=0)))
    cache = {}
    for i in range(n):
        if not treated[i]:
            continue
        key = float(t_e[i])
        if key not in cache:
            cache[key] = coding_partial_year(key, b, horizon)
        w0, w1 = cache[key].weights(event_time[i])
        out[i, :, 0] = w0
        out[i, :, 1] = w1
    return out
