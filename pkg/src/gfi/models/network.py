"""Regression with network cohesion.

Y = X beta + alpha + U on the nodes of a graph, with the individual effects
alpha smoothed by the cohesion penalty lam * alpha' L alpha (L = D - A the
combinatorial Laplacian).  The fit is a closed-form block elimination on
the exact normal equations, reusing one eigendecomposition of L across all
draws.  Debiasing happens in the transformed coordinates eta = L^{1/2}
alpha, where the penalty is quadratic (lam * ||eta||^2) and the curvature
of the fit criterion is L^+, so the correction has a spectral form: each
retained eigendirection is rescaled by (1 + lam * w_i).  The null-space
part of alpha (per-component levels) carries no penalty and passes through
untouched.  The noise scale comes from 10-fold node cross-validation with
Laplacian interpolation of held-out effects.
"""
from __future__ import annotations

import numbers
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.csgraph import connected_components

from ..engine import AdditiveNoiseModel, EngineError, ParameterPoint, SolverFailure
from ..numerics import RandomStream

__all__ = [
    "NetworkDataset",
    "NetworkModel",
    "RncParams",
    "laplacian",
    "mspe_sigma",
    "nr_debias",
    "rnc_fit",
]

_COND_LIMIT = 1e12


def laplacian(adjacency) -> np.ndarray:
    """Combinatorial Laplacian D - A of a simple undirected graph."""
    A = np.asarray(adjacency, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    if not np.all((A == 0) | (A == 1)):
        raise ValueError("adjacency entries must be 0 or 1")
    return np.diag(A.sum(axis=1)) - A


@dataclass
class RncParams:
    """Fixed effects beta (p) and individual effects alpha (n)."""

    beta: np.ndarray
    alpha: np.ndarray


class NetworkDataset:
    """Graph, centered covariates and responses, with cached spectral data."""

    def __init__(self, adjacency, X, y):
        self.adjacency = np.asarray(adjacency, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.L = laplacian(self.adjacency)
        n = self.L.shape[0]
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise ValueError(
                f"X must have one row per node, got {self.X.shape} for {n} nodes"
            )
        if self.y.shape != (n,):
            raise ValueError(f"y shape {self.y.shape} does not match {n} nodes")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("X and y must be finite")
        if self.p:
            if np.abs(self.X.mean(axis=0)).max() >= 1e-8:
                raise ValueError("columns of X must be centered")
            if np.linalg.matrix_rank(self.X) < self.p:
                raise ValueError("X must have full column rank")

    @property
    def n(self):
        return self.L.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @cached_property
    def eig(self):
        """Eigendecomposition (w, V) of L, shared immutably across draws."""
        w, V = np.linalg.eigh(self.L)
        w = np.maximum(w, 0.0)  # PSD by construction; clip eigh round-off
        w.flags.writeable = False
        V.flags.writeable = False
        return w, V

    @cached_property
    def range_mask(self):
        w, _ = self.eig
        return w > 1e-10 * max(w.max(), 1e-300)

    @cached_property
    def xtx(self):
        return self.X.T @ self.X

    @cached_property
    def XtV(self):
        return self.X.T @ self.eig[1]


def rnc_fit(data: NetworkDataset, u_star, lam, cfg=None) -> RncParams:
    """Minimize ||v - X beta - alpha||^2 + lam alpha' L alpha, v = y - u*.

    Block elimination on the stationarity system: with S = (I + lam L)^-1,
    beta solves X'(I-S)X beta = X'(I-S)v and alpha = S(v - X beta).
    """
    if not (isinstance(lam, numbers.Real) and lam > 0):
        raise ValueError(f"cohesion weight lam must be > 0, got {lam!r}")
    v = data.y - np.asarray(u_star, dtype=float)
    w, V = data.eig
    s = 1.0 / (1.0 + lam * w)
    vt = V.T @ v
    if data.p:
        g = 1.0 - s
        M = (data.XtV * g) @ data.XtV.T
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise ValueError(
                "cohesion system is singular: the network carries no "
                "information separating alpha from the span of X"
            )
        beta = np.linalg.solve(M, data.XtV @ (g * vt))
    else:
        beta = np.zeros(0)
    alpha = V @ (s * (vt - data.XtV.T @ beta))
    return RncParams(beta=beta, alpha=alpha)


def nr_debias(data: NetworkDataset, u_star, theta_star: RncParams, lam, c,
              beta_refit: str = "observed_range") -> RncParams:
    """Spectral debias of eta = L^{1/2} alpha, then refit beta.

    In eta coordinates the penalty gradient is lam*eta and the curvature of
    the fit criterion is L^+, so the one-step correction multiplies each
    retained eigencoordinate by (1 + lam w_i).  Retention keeps directions
    whose L^+ eigenvalue 1/w_i clears the usual truncation rule.  The
    debiased alpha keeps its null-space part and rebuilds the range part
    from eta; beta is then refit by least squares, either against the
    observed responses minus the debiased cohesion part (the default) or
    against the perturbed responses minus all of alpha ("perturbed_full").
    """
    if beta_refit not in ("observed_range", "perturbed_full"):
        raise ValueError(f"unknown beta_refit mode {beta_refit!r}")
    w, V = data.eig
    pos = data.range_mask
    alpha_t = V.T @ theta_star.alpha
    alpha_de_t = alpha_t.copy()
    if pos.any():
        wp = w[pos]
        inv_eigs = 1.0 / wp
        zeta1 = inv_eigs.max()
        cutoff = c * zeta1 if c > 0 else zeta1 * 1e-12 * data.n
        keep = inv_eigs >= cutoff
        factor = np.ones(wp.size)
        factor[keep] = 1.0 + lam * wp[keep]
        # eta_t = sqrt(w)*alpha_t; eta_de_t = factor*eta_t; alpha back-map
        # divides by sqrt(w), so the net effect on alpha_t is just factor
        alpha_de_t[pos] = alpha_t[pos] * factor
    alpha_de = V @ alpha_de_t
    if data.p == 0:
        beta_de = np.zeros(0)
    elif beta_refit == "observed_range":
        cohesion = V[:, pos] @ alpha_de_t[pos]
        beta_de = np.linalg.solve(data.xtx, data.X.T @ (data.y - cohesion))
    else:
        v = data.y - np.asarray(u_star, dtype=float)
        beta_de = np.linalg.solve(data.xtx, data.X.T @ (v - alpha_de))
    return RncParams(beta=beta_de, alpha=alpha_de)


def _solve_rnc(L, X, v, lam):
    """Direct elimination for one training fold (no caching)."""
    n = L.shape[0]
    chol = cho_factor(np.eye(n) + lam * L)
    Sv = cho_solve(chol, v)
    if X.shape[1]:
        SX = cho_solve(chol, X)
        M = X.T @ (X - SX)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise ValueError("cohesion system is singular on a training fold")
        beta = np.linalg.solve(M, X.T @ (v - Sv))
    else:
        beta = np.zeros(0)
    alpha = cho_solve(chol, v - X @ beta)
    return beta, alpha


def _interpolate_alpha(data: NetworkDataset, train, val, alpha_train):
    """Predict held-out effects by minimizing the cohesion form.

    Solves (L alpha)_val = 0 given the training coordinates, one connected
    component of the validation subgraph at a time; a component with no
    edge into the training set falls back to the training mean.
    """
    A = data.adjacency
    out = np.empty(val.size)
    ncomp, labels = connected_components(A[np.ix_(val, val)], directed=False)
    mean_train = float(alpha_train.mean()) if alpha_train.size else 0.0
    for comp in range(ncomp):
        local = labels == comp
        C = val[local]
        if A[np.ix_(C, train)].sum() == 0:
            warnings.warn(
                "validation component has no edge into the training nodes; "
                "predicting its effects by the training mean"
            )
            out[local] = mean_train
        else:
            L_CC = data.L[np.ix_(C, C)]
            rhs = -data.L[np.ix_(C, train)] @ alpha_train
            out[local] = np.linalg.solve(L_CC, rhs)
    return out


def mspe_sigma(data: NetworkDataset, lam, cfg=None, stream: RandomStream = None,
               folds: int = 10) -> float:
    """Noise scale from k-fold (default 10) node cross-validation.

    Each fold fits the cohesion model on the training subgraph, predicts
    the held-out responses (held-out alpha via Laplacian interpolation),
    and sigma^2 is the mean of the per-fold mean squared prediction errors.
    """
    n = data.n
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if n < 2 * folds:
        raise ValueError(f"need at least {2 * folds} nodes for {folds}-fold validation, got {n}")
    if stream is None:
        stream = RandomStream(getattr(cfg, "seed", 0), 0)
    perm = stream.generator().permutation(n)
    mspe = []
    for val in np.array_split(perm, folds):
        val = np.sort(val)
        train = np.setdiff1d(perm, val)
        A_tt = data.adjacency[np.ix_(train, train)]
        L_tt = np.diag(A_tt.sum(axis=1)) - A_tt
        beta, alpha_train = _solve_rnc(L_tt, data.X[train], data.y[train], lam)
        alpha_val = _interpolate_alpha(data, train, val, alpha_train)
        pred = data.X[val] @ beta + alpha_val
        mspe.append(np.mean((data.y[val] - pred) ** 2))
    return float(np.sqrt(np.mean(mspe)))


class NetworkModel(AdditiveNoiseModel):
    """Engine adapter; flat parameter layout is [beta (p), alpha (n)]."""

    def responses(self, data):
        return data.y

    def noise_support(self, data):
        return data.n

    def _pack(self, data, params: RncParams) -> ParameterPoint:
        flat = np.concatenate([params.beta, params.alpha])
        return ParameterPoint(flat, np.ones(flat.size, dtype=bool), ("rnc", data))

    def _unpack(self, data, theta: ParameterPoint) -> RncParams:
        return RncParams(beta=theta.flat[: data.p], alpha=theta.flat[data.p :])

    def predict(self, data, theta):
        return data.X @ theta.flat[: data.p] + theta.flat[data.p :]

    def fit(self, data, u_star, lam, solver_cfg, stream):
        if not (isinstance(lam, numbers.Real) and lam > 0):
            raise EngineError(f"network cohesion requires lam > 0, got {lam!r}")
        try:
            return self._pack(data, rnc_fit(data, u_star, lam))
        except ValueError as exc:
            raise SolverFailure(str(exc)) from exc

    def penalty_gradient(self, theta, lam):
        _, data = theta.structure_tag
        xi = np.zeros(theta.flat.size)
        xi[data.p :] = lam * (data.L @ theta.flat[data.p :])
        return xi

    def predict_gradient(self, data, theta):
        J = np.hstack([data.X, np.eye(data.n)])
        return J[:, theta.active]

    def estimate_sigma(self, data, cfg, stream):
        return mspe_sigma(data, cfg.lam_value(), cfg, stream)

    def debias(self, data, u_star, theta_star, cfg):
        mode = cfg.solver_cfg.get("beta_refit", "observed_range")
        de = nr_debias(
            data, u_star, self._unpack(data, theta_star),
            lam=cfg.lam_value(), c=cfg.c, beta_refit=mode,
        )
        return self._pack(data, de)
