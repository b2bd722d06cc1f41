"""Model-agnostic fiducial sampling engine.

One draw of the perturb-optimize-debias loop, for an additive-noise model
``Y = G(X, theta) + U`` with ``U ~ N(0, sigma^2)`` on the noise support:

1. perturb: draw a synthetic noise vector ``U*`` from the known distribution;
2. optimize: ``theta* = argmin 0.5*||Y - G(theta) - U*||^2 + 0.5*penalty``
   (the half-scale internal objective; minimizers coincide with the
   conventionally written ``||.||^2 + penalty`` objectives, and the penalty
   gradient used below is ``xi = 0.5 * grad(penalty)``);
3. debias: ``theta_de = theta* + truncated_pinv(H(theta*), c) @ xi(theta*)``
   on the active coordinates, where ``H`` is the curvature of the fit
   criterion (no penalty term) at ``theta*``.

After ``m`` draws the per-draw losses ``||Y - G(theta_de) - U*||^2`` (stored
as the plain sum of squares, no 1/2; the accept rule is scale-equivariant) pass
through a Tukey-fence acceptance filter, and the surviving draws form the
fiducial sample used for point estimates and percentile intervals.

Draw ``i`` consumes the reproducible stream ``(cfg.seed, stream_id=i)``;
substream 0 supplies the noise vector and substream 1 seeds the solver.
Stream id 0 is reserved for pre-loop work such as scale estimation, so
results are bit-identical however draws are scheduled.
"""
from __future__ import annotations

import abc
import numbers
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import RandomStream, gaussian, quantile, truncated_pinv_apply

__all__ = [
    "AdditiveNoiseModel",
    "EngineError",
    "FiducialDraw",
    "FiducialSample",
    "GfiConfig",
    "ParameterPoint",
    "SolverFailure",
    "SummaryReport",
    "acceptance_filter",
    "debias",
    "hessian_default",
    "run_fiducial",
    "summarize",
]


class SolverFailure(RuntimeError):
    """A model fit failed on one draw; the draw is recorded and skipped."""


class EngineError(RuntimeError):
    """The sampling run as a whole cannot produce a valid sample."""


@dataclass
class ParameterPoint:
    """Flat parameter vector with an active-coordinate mask.

    ``active`` marks coordinates eligible for debiasing; l1 solvers leave
    exact zeros inactive, quadratic penalties mark everything active.
    ``structure_tag`` carries the model-specific layout (factor shapes etc.)
    needed to reshape ``flat``.
    """

    flat: np.ndarray
    active: np.ndarray
    structure_tag: object = None

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        self.active = np.asarray(self.active, dtype=bool)
        if self.flat.shape != self.active.shape:
            raise ValueError("flat and active must have identical shapes")

    def replace_flat(self, flat: np.ndarray) -> "ParameterPoint":
        return ParameterPoint(flat, self.active.copy(), self.structure_tag)


@dataclass
class FiducialDraw:
    """One (U*, theta*, theta_de, loss, accepted) record."""

    u_star: np.ndarray
    theta_star: Optional[ParameterPoint]
    theta_de: Optional[ParameterPoint]
    loss: float
    accepted: bool
    failed: bool = False


@dataclass
class FiducialSample:
    """All draws of one run plus the acceptance threshold epsilon."""

    draws: list
    epsilon: float
    sigma_used: float

    def accepted_draws(self) -> list:
        return [d for d in self.draws if d.accepted]

    def theta_de_matrix(self) -> np.ndarray:
        """Accepted debiased parameter vectors, one row per draw."""
        acc = self.accepted_draws()
        if not acc:
            raise ValueError("sample has no accepted draws")
        return np.stack([d.theta_de.flat for d in acc])

    def summary(self, levels=(0.90, 0.95, 0.99)) -> "SummaryReport":
        return summarize(self, levels)


@dataclass
class GfiConfig:
    """Sampler hyperparameters.

    ``lam`` is the penalty weight on the conventional ``||Y - G||^2 +
    lam * pen`` objective; the string ``"cv"`` marks a weight that the caller must
    resolve by cross-validation before running.  ``sigma`` is either a known
    positive value or ``None``/an estimator tag, in which case the model's
    estimator runs once before the loop.  ``gauss_newton_only`` drops the
    residual-weighted curvature term from H (useful when the full term is
    expensive); the default keeps it.
    """

    m: int
    c: float = 0.05
    lam: object = 0.0
    sigma: object = None
    solver_cfg: dict = field(default_factory=dict)
    seed: int = 0
    gauss_newton_only: bool = False

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"m must be >= 2, got {self.m}")
        if self.c < 0:
            raise ValueError(f"c must be >= 0, got {self.c}")
        if isinstance(self.lam, numbers.Real) and self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")

    def lam_value(self) -> float:
        if not isinstance(self.lam, numbers.Real):
            raise EngineError(
                f"penalty weight {self.lam!r} must be resolved (e.g. by "
                "cross-validation) before sampling"
            )
        return float(self.lam)


@dataclass
class SummaryReport:
    """Per-coordinate point estimates and percentile intervals."""

    point_mean: np.ndarray
    point_median: np.ndarray
    intervals: dict


class AdditiveNoiseModel(abc.ABC):
    """Capability contract a model plugin must satisfy.

    All methods must be deterministic functions of their arguments (any
    randomness comes in through the ``stream`` parameters) and reentrant, so
    draws can run on any worker in any order.
    """

    @abc.abstractmethod
    def responses(self, data) -> np.ndarray:
        """Observed responses as a vector aligned with ``predict``."""

    @abc.abstractmethod
    def noise_support(self, data) -> int:
        """Number of noise slots; indexes align with ``responses``."""

    @abc.abstractmethod
    def predict(self, data, theta: ParameterPoint) -> np.ndarray:
        """Fitted responses G(X_i, theta) for all observation slots."""

    @abc.abstractmethod
    def fit(self, data, u_star, lam, solver_cfg, stream: RandomStream) -> ParameterPoint:
        """Minimize the penalized perturbed objective."""

    @abc.abstractmethod
    def penalty_gradient(self, theta: ParameterPoint, lam: float) -> np.ndarray:
        """xi(theta) = half the gradient of ``lam * pen(theta)``, full length."""

    @abc.abstractmethod
    def estimate_sigma(self, data, cfg: GfiConfig, stream: RandomStream) -> float:
        """Model-specific noise-scale estimate from the observed data."""

    def active_mask(self, theta: ParameterPoint) -> np.ndarray:
        return theta.active

    def predict_gradient(self, data, theta: ParameterPoint) -> np.ndarray:
        """Per-observation gradient of G on active coordinates (n_obs x k)."""
        raise NotImplementedError(
            f"{type(self).__name__} supplies neither predict_gradient nor hessian"
        )

    def curvature_contraction(self, data, theta: ParameterPoint, residual) -> Optional[np.ndarray]:
        """sum_i residual_i * (second derivative of G_i), active coords.

        ``None`` (the default) declares G linear in theta, i.e. zero
        curvature.
        """
        return None

    def hessian(self, data, u_star, theta: ParameterPoint, gauss_newton_only: bool = False):
        return hessian_default(self, data, u_star, theta, gauss_newton_only)

    def debias(self, data, u_star, theta_star: ParameterPoint, cfg: GfiConfig) -> ParameterPoint:
        return debias(
            self, data, u_star, theta_star,
            c=cfg.c, lam=cfg.lam_value(), gauss_newton_only=cfg.gauss_newton_only,
        )


def hessian_default(model, data, u_star, theta, gauss_newton_only: bool = False) -> np.ndarray:
    """Curvature of the fit criterion on active coordinates.

    H = sum_i [ grad G_i grad G_i^T - r_i * hess G_i ] with residual
    r_i = Y_i - G_i - U*_i; ``gauss_newton_only`` keeps just the first term.
    """
    J = np.asarray(model.predict_gradient(data, theta), dtype=float)
    H = J.T @ J
    if not gauss_newton_only:
        residual = model.responses(data) - model.predict(data, theta) - u_star
        C = model.curvature_contraction(data, theta, residual)
        if C is not None:
            H = H - C
    return H


def debias(model, data, u_star, theta_star: ParameterPoint, c: float, lam: float,
           gauss_newton_only: bool = False) -> ParameterPoint:
    """One-step correction theta* + truncated_pinv(H, c) @ xi on active coords.

    Inactive coordinates keep their fitted values (exact zeros stay zero).
    The step removes penalty-induced shrinkage: for a quadratic objective it
    lands exactly on the unpenalized minimizer restricted to the retained
    singular subspace.
    """
    mask_fn = getattr(model, "active_mask", None)
    active = np.asarray(
        mask_fn(theta_star) if mask_fn is not None else theta_star.active, dtype=bool
    )
    if active.shape != theta_star.flat.shape:
        raise EngineError("active mask and parameter vector sizes disagree")
    xi = np.asarray(model.penalty_gradient(theta_star, lam), dtype=float)
    if xi.shape != theta_star.flat.shape:
        raise EngineError("penalty gradient and parameter vector sizes disagree")
    xi_act = xi[active]
    if lam == 0.0 or not np.any(xi_act):
        return theta_star
    H = np.asarray(model.hessian(data, u_star, theta_star, gauss_newton_only), dtype=float)
    k = int(active.sum())
    if H.shape != (k, k):
        raise EngineError(f"hessian shape {H.shape} does not match {k} active coordinates")
    if not np.all(np.isfinite(H)):
        raise EngineError("hessian contains non-finite entries")
    flat = theta_star.flat.copy()
    flat[active] += truncated_pinv_apply(H, c, xi_act)
    return theta_star.replace_flat(flat)


def acceptance_filter(losses) -> tuple:
    """Tukey fence on the losses: epsilon = Q3 + 1.5*(Q3 - Q1).

    Returns (epsilon, accept flags); draw i is accepted iff loss_i <= epsilon.
    """
    arr = np.asarray(losses, dtype=float)
    if arr.size < 2:
        raise ValueError(f"acceptance filter needs >= 2 losses, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("acceptance filter losses must all be finite")
    q1 = quantile(arr, 0.25)
    q3 = quantile(arr, 0.75)
    epsilon = q3 + 1.5 * (q3 - q1)
    return epsilon, arr <= epsilon


def summarize(sample, levels) -> SummaryReport:
    """Element-wise mean/median and percentile intervals over accepted draws."""
    acc = [d for d in sample.draws if d.accepted]
    if len(acc) < 2:
        raise ValueError(f"summarize needs >= 2 accepted draws, got {len(acc)}")
    mat = np.stack([d.theta_de.flat for d in acc])
    intervals = {}
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"interval level must lie in (0, 1), got {level}")
        alpha = 1.0 - level
        lo, hi = np.quantile(mat, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        intervals[level] = (lo, hi)
    return SummaryReport(
        point_mean=mat.mean(axis=0),
        point_median=np.quantile(mat, 0.5, axis=0),
        intervals=intervals,
    )


def run_fiducial(model: AdditiveNoiseModel, data, cfg: GfiConfig) -> FiducialSample:
    """Run the full perturb-optimize-debias-filter loop.

    Returns every draw (rejected ones keep ``accepted=False``); raises
    :class:`EngineError` if more than 20% of draws fail to solve or no draw
    survives the filter.
    """
    lam = cfg.lam_value()
    y = np.asarray(model.responses(data), dtype=float)
    n_noise = model.noise_support(data)
    if n_noise != y.size:
        raise EngineError("noise support does not match the response layout")

    if isinstance(cfg.sigma, numbers.Real):
        sigma = float(cfg.sigma)
    else:
        sigma = float(model.estimate_sigma(data, cfg, RandomStream(cfg.seed, 0)))
    if not sigma > 0:
        raise EngineError(f"noise scale must be positive, got {sigma}")

    draws = []
    n_failed = 0
    for i in range(1, cfg.m + 1):
        stream = RandomStream(cfg.seed, i)
        u = gaussian(stream.substream(0), n_noise, sigma)
        try:
            theta_star = model.fit(data, u, lam, cfg.solver_cfg, stream.substream(1))
            theta_de = model.debias(data, u, theta_star, cfg)
            r = y - model.predict(data, theta_de) - u
            loss = float(r @ r)
            if not np.isfinite(loss):
                raise SolverFailure("non-finite loss")
            draws.append(FiducialDraw(u, theta_star, theta_de, loss, accepted=False))
        except SolverFailure:
            n_failed += 1
            draws.append(FiducialDraw(u, None, None, float("nan"), False, failed=True))

    if n_failed > 0.2 * cfg.m:
        raise EngineError(
            f"{n_failed} of {cfg.m} draws failed to solve; the acceptance "
            "threshold would be meaningless"
        )
    ok = [d for d in draws if not d.failed]
    if len(ok) < 2:
        raise EngineError("fewer than 2 solvable draws")
    epsilon, flags = acceptance_filter([d.loss for d in ok])
    for d, flag in zip(ok, flags):
        d.accepted = bool(flag)
    if not any(d.accepted for d in draws):
        raise EngineError("no draw passed the acceptance filter")
    return FiducialSample(draws=draws, epsilon=float(epsilon), sigma_used=sigma)
