"""Ridge-penalized linear regression plugin.

Closed-form fits make this the reference model for exercising the engine:
the debias step applied to a ridge solution with full spectrum retention
must land exactly on ordinary least squares.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from ..engine import AdditiveNoiseModel, ParameterPoint, SolverFailure

__all__ = ["LinearDataset", "LinearModel"]


class LinearDataset:
    """Design matrix and responses with cached solve operators."""

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(
                f"y shape {self.y.shape} does not match {self.X.shape[0]} rows of X"
            )
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("X and y must be finite")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @cached_property
    def xtx(self):
        return self.X.T @ self.X

    @cached_property
    def pinv(self):
        return np.linalg.pinv(self.X)


class LinearModel(AdditiveNoiseModel):
    """G(X, theta) = X @ theta with penalty lam * ||theta||^2."""

    def responses(self, data):
        return data.y

    def noise_support(self, data):
        return data.n

    def predict(self, data, theta):
        return data.X @ theta.flat

    def fit(self, data, u_star, lam, solver_cfg, stream):
        v = data.y - u_star
        if lam == 0.0:
            theta = data.pinv @ v
        else:
            try:
                theta = np.linalg.solve(
                    data.xtx + lam * np.eye(data.p), data.X.T @ v
                )
            except np.linalg.LinAlgError as exc:
                raise SolverFailure(str(exc)) from exc
        return ParameterPoint(theta, np.ones(data.p, dtype=bool))

    def penalty_gradient(self, theta, lam):
        return lam * theta.flat

    def predict_gradient(self, data, theta):
        return data.X[:, theta.active]

    def estimate_sigma(self, data, cfg, stream):
        theta = self.fit(data, np.zeros(data.n), cfg.lam_value(), cfg.solver_cfg, stream)
        r = data.y - data.X @ theta.flat
        return float(np.sqrt(r @ r / data.n))
