"""Tensor regression with a rank-R CP coefficient and an l1 penalty.

The coefficient tensor is B = sum_r beta_1^(r) o ... o beta_D^(r) and
responses are Y_i = <X_i, B> + U_i.  The penalized fit cycles over modes:
holding the other modes fixed, the mode-d subproblem is a lasso in the R
stacked rank vectors of that mode, solved by coordinate descent with
soft-thresholding to exact zeros.  Zeroed coordinates are inactive
downstream, so the one-step correction never resurrects them.
"""
import warnings
from dataclasses import dataclass

import numpy as np

from .._kernels import ccd_lasso
from ..engine import AdditiveNoiseModel, ParameterPoint, SolverFailure
from ..numerics import RandomStream

__all__ = [
    "CpFactors",
    "TensorDataset",
    "TensorModel",
    "block_relaxation_fit",
    "cp_compose",
    "factors_from_flat",
    "sigma_mle",
    "tr_predict",
]


@dataclass(frozen=True)
class CpFactors:
    """Per-mode factor matrices; column r of mode d is beta_d^(r)."""

    factors: tuple

    def __post_init__(self):
        fac = tuple(np.asarray(F, dtype=float) for F in self.factors)
        if not fac:
            raise ValueError("need at least one mode")
        for F in fac:
            if F.ndim != 2:
                raise ValueError("each factor must be a p_d x R matrix")
            if not np.all(np.isfinite(F)):
                raise ValueError("factor entries must be finite")
        R = fac[0].shape[1]
        if R < 1:
            raise ValueError(f"rank must be >= 1, got {R}")
        if any(F.shape[1] != R for F in fac):
            raise ValueError("all modes must share one rank")
        object.__setattr__(self, "factors", fac)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def dims(self) -> tuple:
        return tuple(F.shape[0] for F in self.factors)

    def compose(self) -> np.ndarray:
        return cp_compose(self)


@dataclass(frozen=True)
class TensorDataset:
    """n tensor predictors sharing one shape, plus scalar responses."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim < 2:
            raise ValueError("X must have shape (n, p_1, ..., p_D)")
        if X.shape[0] < 1:
            raise ValueError("need at least one observation")
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("X and y must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dims(self) -> tuple:
        return self.X.shape[1:]

    @property
    def order(self) -> int:
        return self.X.ndim - 1


def factors_from_flat(flat, dims, R: int) -> CpFactors:
    """Rebuild per-mode factor matrices from a concatenated parameter vector.

    Inverse of the packing used by :class:`TensorModel`: mode d occupies the
    next ``R * p_d`` slots, raveled column-major so each rank vector is a
    contiguous run.
    """
    flat = np.asarray(flat, dtype=float)
    out = []
    pos = 0
    for p in dims:
        out.append(flat[pos:pos + R * p].reshape(R, p).T)
        pos += R * p
    if pos != flat.size:
        raise ValueError(
            f"flat length {flat.size} does not match dims {tuple(dims)} at rank {R}"
        )
    return CpFactors(tuple(out))


def cp_compose(f: CpFactors) -> np.ndarray:
    """Materialize B = sum_r beta_1^(r) o ... o beta_D^(r)."""
    B = np.zeros(f.dims)
    for r in range(f.rank):
        term = f.factors[0][:, r]
        for F in f.factors[1:]:
            term = np.multiply.outer(term, F[:, r])
        B = B + term
    return B


def tr_predict(X, f: CpFactors) -> float:
    """<X, B> by contracting one mode vector at a time, B never materialized."""
    X = np.asarray(X, dtype=float)
    if X.shape != f.dims:
        raise ValueError(f"X has shape {X.shape}, factors compose to {f.dims}")
    total = 0.0
    for r in range(f.rank):
        s = X
        for F in f.factors:
            s = np.tensordot(s, F[:, r], axes=([0], [0]))
        total += float(s)
    return total


def _contract_other_modes(X, factors, d):
    """T[i, j, r] = dG_i/d beta_d^(r)[j]: X_i contracted with every other mode.

    This is both the gradient of the predictions in mode d and the design of
    the mode-d lasso subproblem.
    """
    D = len(factors)
    if D == 1:
        R = factors[0].shape[1]
        return np.broadcast_to(X[:, :, None], X.shape + (R,))
    if D == 2:
        # batched matmul keeps the common 2-D case in BLAS
        if d == 0:
            return np.matmul(X, factors[1])
        return np.matmul(X.transpose(0, 2, 1), factors[0])
    R = factors[0].shape[1]
    out = np.empty((X.shape[0], factors[d].shape[0], R))
    for r in range(R):
        T = X
        left = list(range(D))
        for dd in range(D):
            if dd == d:
                continue
            T = np.tensordot(T, factors[dd][:, r], axes=([1 + left.index(dd)], [0]))
            left.remove(dd)
        out[:, :, r] = T
    return out


def _predict_all(X, factors):
    T = _contract_other_modes(X, factors, 0)
    return np.einsum("ijr,jr->i", T, factors[0])


def _objective(X, v, factors, lam):
    """Half-scale penalized objective 0.5*||v - G||^2 + 0.5*lam*sum|coeffs|."""
    factors = list(factors)
    resid = v - _predict_all(X, factors)
    pen = sum(float(np.abs(F).sum()) for F in factors)
    return 0.5 * float(resid @ resid) + 0.5 * lam * pen


def block_relaxation_fit(data: TensorDataset, u_star, R: int, lam: float,
                         cfg=None, stream: RandomStream = None) -> CpFactors:
    """Cyclic mode-wise lasso for the perturbed penalized objective.

    Factors start i.i.d. N(0, 1/sqrt(p_d * R)) from ``stream`` (one generator
    shared across modes, mode order 1..D).  Each mode subproblem goes through
    the coordinate-descent kernel in Gram form with threshold lam/2; cycles
    stop when the relative objective decrease falls below ``tol`` (default
    1e-8) or at ``max_cycles`` (default 200, with a warning).
    """
    cfg = dict(cfg or {})
    tol = float(cfg.get("tol", 1e-8))
    max_cycles = int(cfg.get("max_cycles", 200))
    ccd_tol = float(cfg.get("ccd_tol", 1e-10))
    ccd_max_cycles = int(cfg.get("ccd_max_cycles", 200))
    if R < 1:
        raise ValueError(f"rank must be >= 1, got {R}")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    n = data.n
    u = np.asarray(u_star, dtype=float)
    if u.shape != (n,):
        raise ValueError(f"u_star has shape {u.shape}, expected ({n},)")
    v = data.y - u
    if stream is None:
        stream = RandomStream(0, 0)
    g = stream.generator()
    dims = data.dims
    factors = [g.normal(0.0, (p * R) ** -0.25, (p, R)) for p in dims]
    t = lam / 2.0

    obj = _objective(data.X, v, factors, lam)
    if not np.isfinite(obj):
        raise ValueError("objective is not finite")
    pen = [float(np.abs(F).sum()) for F in factors]
    for _cycle in range(1, max_cycles + 1):
        start = obj
        for d in range(len(dims)):
            T = _contract_other_modes(data.X, factors, d)
            W = T.transpose(0, 2, 1).reshape(n, -1)
            b, _ = ccd_lasso(W.T @ W, W.T @ v, t, factors[d].ravel(order="F"),
                             tol=ccd_tol, max_cycles=ccd_max_cycles)
            factors[d] = b.reshape(R, dims[d]).T.copy()
            pen[d] = float(np.abs(b).sum())
            resid = v - W @ b
            new_obj = 0.5 * float(resid @ resid) + 0.5 * lam * sum(pen)
            if not np.isfinite(new_obj):
                raise ValueError("objective is not finite")
            assert new_obj <= obj + 1e-9 * (1.0 + abs(obj)), "objective increased"
            obj = new_obj
        if start - obj <= tol * max(start, 1e-300):
            break
    else:
        warnings.warn(
            f"block relaxation did not converge in {max_cycles} cycles; "
            "returning the last iterate"
        )
    return CpFactors(tuple(factors))


def sigma_mle(data: TensorDataset, R: int, lam: float, cfg=None,
              stream: RandomStream = None) -> float:
    """sqrt(RSS/n) from one unperturbed fit; exact interpolation floors at eps."""
    if data.n < 2:
        raise ValueError(f"need n > 1 to estimate sigma, got n={data.n}")
    fit = block_relaxation_fit(data, np.zeros(data.n), R, lam, cfg=cfg,
                               stream=stream)
    resid = data.y - _predict_all(data.X, fit.factors)
    rss = float(resid @ resid)
    if rss == 0.0:
        warnings.warn("zero residual in the noise-scale fit; returning the "
                      "machine-epsilon floor")
        return float(np.finfo(float).eps)
    return float(np.sqrt(rss / data.n))


def _curvature_full(X, factors, residual):
    """C = sum_i r_i * (second derivative of G_i) over all coordinates.

    Within-mode blocks vanish; the (d, r) x (d', r) block is the residual-
    weighted data tensor contracted with the remaining modes' rank-r vectors.
    """
    D = len(factors)
    R = factors[0].shape[1]
    dims = [F.shape[0] for F in factors]
    offs = np.concatenate(([0], np.cumsum([R * p for p in dims])))
    C = np.zeros((offs[-1], offs[-1]))
    M = np.tensordot(residual, X, axes=([0], [0]))
    for r in range(R):
        for d in range(D):
            for d2 in range(d + 1, D):
                T = M
                left = list(range(D))
                for dd in range(D):
                    if dd in (d, d2):
                        continue
                    T = np.tensordot(T, factors[dd][:, r],
                                     axes=([left.index(dd)], [0]))
                    left.remove(dd)
                i0 = offs[d] + r * dims[d]
                j0 = offs[d2] + r * dims[d2]
                C[i0:i0 + dims[d], j0:j0 + dims[d2]] = T
    return C + C.T


class TensorModel(AdditiveNoiseModel):
    """Engine plugin for the CP-factor parameterization.

    ``theta.flat`` concatenates the modes, each factor matrix raveled
    column-major so the R rank vectors of a mode sit in contiguous runs;
    only nonzero coordinates are active.
    """

    def __init__(self, rank: int):
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.rank = int(rank)

    def _factors(self, theta: ParameterPoint) -> tuple:
        _, dims, R = theta.structure_tag
        return factors_from_flat(theta.flat, dims, R).factors

    def responses(self, data):
        return data.y

    def noise_support(self, data):
        return data.n

    def predict(self, data, theta):
        return _predict_all(data.X, self._factors(theta))

    def fit(self, data, u_star, lam, solver_cfg, stream):
        try:
            fit = block_relaxation_fit(data, u_star, self.rank, lam,
                                       cfg=solver_cfg, stream=stream)
        except ValueError as exc:
            raise SolverFailure(str(exc)) from exc
        flat = np.concatenate([F.ravel(order="F") for F in fit.factors])
        return ParameterPoint(flat, flat != 0.0,
                              ("tr", tuple(data.dims), self.rank))

    def penalty_gradient(self, theta, lam):
        return 0.5 * lam * np.sign(theta.flat)

    def predict_gradient(self, data, theta):
        factors = self._factors(theta)
        n = data.n
        cols = [
            _contract_other_modes(data.X, factors, d)
            .transpose(0, 2, 1).reshape(n, -1)
            for d in range(len(factors))
        ]
        return np.concatenate(cols, axis=1)[:, theta.active]

    def curvature_contraction(self, data, theta, residual):
        factors = self._factors(theta)
        if len(factors) == 1:
            return None  # single-mode predictions are linear in theta
        C = _curvature_full(data.X, factors, np.asarray(residual, dtype=float))
        idx = np.flatnonzero(theta.active)
        return C[np.ix_(idx, idx)]

    def estimate_sigma(self, data, cfg, stream):
        return sigma_mle(data, self.rank, cfg.lam_value(), cfg=cfg.solver_cfg,
                         stream=stream)
