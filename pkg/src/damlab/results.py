"""Fit results shared by the least-squares and likelihood fitters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ConvergenceError(RuntimeError):
    """Optimizer stopped without meeting its tolerances."""

    def __init__(self, message, last=None, grad_norm=None, trace=None):
        super().__init__(message)
        self.last = last
        self.grad_norm = grad_norm
        self.trace = trace or []


@dataclass(frozen=True)
class FitResult:
    names: tuple
    estimates: np.ndarray
    cov: Optional[np.ndarray]
    loglik: float
    family: str
    n_obs: int
    iterations: int
    grad_norm: float
    converged: bool = True
    boundary: tuple = ()
    fixed: tuple = ()
    meta: dict = field(default_factory=dict)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __getitem__(self, name: str) -> float:
        return float(self.estimates[self.index(name)])

    @property
    def se(self) -> np.ndarray:
        if self.cov is None:
            return np.full(len(self.names), np.nan)
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "names": list(self.names),
            "estimates": self.estimates.tolist(),
            "std_errors": self.se.tolist(),
            "covariance": None if self.cov is None else self.cov.tolist(),
            "loglik": self.loglik,
            "n_obs": self.n_obs,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "grad_norm": self.grad_norm,
                "boundary": list(self.boundary),
            },
            "fixed": list(self.fixed),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)
