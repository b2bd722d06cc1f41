"""Configuration-driven Monte Carlo coverage experiments.

``run_experiment`` generates one synthetic dataset per replicate, runs the
fiducial sampler on it, and pools the per-target interval checks into a
:class:`CoverageReport`.  Coverage at a level is the fraction of pooled
(replicate x target) pairs whose interval contains the truth; bias and rMSE
pool the same pairs on the point means.  Targets are grouped per scenario:
``beta`` coordinates for the linear and network models (the network study
adds a classical ``ols_beta`` baseline), per-missing-entry predictions
(``missing``) for matrix completion, and coefficient pixels split into
``zero``/``nonzero`` by exact zero of the truth for tensor regression.

Replicates are pure jobs safe to dispatch to a worker pool; results are
identical for any worker count.  Randomness is budgeted so nothing collides:

* quantities held fixed across replicates (network graph/covariates/truth,
  tensor coefficient, linear coefficients) come from stream ``(seed, 0)``
  at path indices 2-4;
* per-replicate data (designs, noise, observation masks) comes from stream
  ``(seed, r)`` at path indices 5-7, and cross-validation folds at 8;
* each replicate's sampler runs under its own derived master seed (spawn
  key ``(r, 9)``), so draw streams never overlap data streams.

The matrix-completion mask draws one uniform per entry and thresholds it at
the observation rate, so masks for the same seed nest as the rate grows.
"""
from __future__ import annotations

import json
import numbers
import os
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np
from scipy.stats import norm

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .engine import GfiConfig, run_fiducial
from .models.completion import McModel, ObservedMatrix, mc_complete, two_stage_fit
from .models.linear import LinearDataset, LinearModel
from .models.network import NetworkDataset, NetworkModel, mspe_sigma
from .models.tensor import (
    TensorDataset,
    TensorModel,
    block_relaxation_fit,
    cp_compose,
    factors_from_flat,
)
from .numerics import RandomStream, gaussian
from .simulate import (
    SbmSpec,
    gen_nr_truth,
    gen_orthonormal_factors,
    gen_sbm,
    gen_tensor_coefficient,
)

__all__ = [
    "CoverageReport",
    "ExperimentConfig",
    "GroupStats",
    "OlsSummary",
    "TargetRow",
    "cv_lambda",
    "default_cv_grid",
    "ols_baseline",
    "run_experiment",
]

_MODELS = ("linear", "network", "mc", "tensor")
_PINNED_LEVELS = (0.90, 0.95, 0.99)
_ENGINE_TAG = 9  # spawn-key slot reserved for deriving per-replicate engine seeds

_REQUIRED_SCENARIO = {
    "linear": ("n", "p", "sigma"),
    "network": ("n", "p", "p_w", "p_b", "s", "sigma"),
    "mc": ("n", "R", "p", "sigma"),
    "tensor": ("n", "p", "R", "sigma", "kind"),
}
_GFI_KEYS = {"c", "lam", "sigma", "gauss_newton_only", "solver_cfg", "cv_grid", "cv_folds"}


def _lvl_key(level: float) -> str:
    """Interval level as a short string key ("0.9"), stable under JSON."""
    return format(float(level), "g")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs: scenario, sampler settings, budget."""

    model: str
    scenario: dict
    replicates: int
    draws: int
    levels: tuple = (0.90, 0.95, 0.99)
    gfi: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.model not in _MODELS:
            raise ValueError(f"model must be one of {_MODELS}, got {self.model!r}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.draws < 2:
            raise ValueError(f"draws must be >= 2, got {self.draws}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        levels = tuple(float(l) for l in self.levels)
        if not levels:
            raise ValueError("levels must be non-empty")
        if len(set(levels)) != len(levels):
            raise ValueError(f"levels contain duplicates: {levels}")
        for l in levels:
            if not 0.0 < l < 1.0:
                raise ValueError(f"interval level must lie in (0, 1), got {l}")
        object.__setattr__(self, "levels", levels)
        missing = [k for k in _REQUIRED_SCENARIO[self.model] if k not in self.scenario]
        if missing:
            raise ValueError(f"scenario for {self.model!r} is missing keys {missing}")
        unknown = set(self.gfi) - _GFI_KEYS
        if unknown:
            raise ValueError(f"unknown [gfi] keys {sorted(unknown)}")
        lam = self.gfi.get("lam", 0.0)
        if not (lam == "cv" or (isinstance(lam, numbers.Real) and lam >= 0)):
            raise ValueError(f'gfi lam must be a weight >= 0 or "cv", got {lam!r}')
        if self.model == "network":
            if "lam" not in self.gfi:
                raise ValueError('network cohesion needs an explicit gfi lam (positive or "cv")')
            if isinstance(lam, numbers.Real) and lam <= 0:
                raise ValueError(f"network cohesion weight must be > 0, got {lam}")
        sig = self.gfi.get("sigma")
        if not (sig is None or sig == "true" or (isinstance(sig, numbers.Real) and sig > 0)):
            raise ValueError(f'gfi sigma must be a positive value or "true", got {sig!r}')
        folds = self.gfi.get("cv_folds", 10)
        if folds < 2:
            raise ValueError(f"cv_folds must be >= 2, got {folds}")
        grid = self.gfi.get("cv_grid")
        if grid is not None and len(grid) == 0:
            raise ValueError("cv_grid must be non-empty when given")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Build from ``{"experiment": ..., "gfi": ..., "scenario": ...}``."""
        unknown = set(raw) - {"experiment", "gfi", "scenario"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        exp = dict(raw.get("experiment", {}))
        kwargs = {}
        for key in ("model", "replicates", "draws", "seed", "workers"):
            if key in exp:
                kwargs[key] = exp.pop(key)
        if "levels" in exp:
            kwargs["levels"] = tuple(exp.pop("levels"))
        if exp:
            raise ValueError(f"unknown [experiment] keys {sorted(exp)}")
        if "model" not in kwargs:
            raise ValueError("[experiment] must set model")
        return cls(
            scenario=dict(raw.get("scenario", {})),
            gfi=dict(raw.get("gfi", {})),
            **kwargs,
        )

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


@dataclass
class TargetRow:
    """One target in one replicate: truth, point estimates, intervals."""

    replicate: int
    target_id: str
    group: str
    truth: float
    point_mean: float
    point_median: float
    intervals: dict  # level key ("0.9") -> (lo, hi)
    in_estimates: bool = True  # baseline rows stay out of estimates.csv


@dataclass
class GroupStats:
    """Pooled interval and point-estimate quality for one target group."""

    coverage: dict  # level key -> fraction of intervals containing the truth
    mean_width: dict
    bias: float
    rmse: float
    count: int  # pooled (replicate x target) pairs


@dataclass
class CoverageReport:
    """Aggregate over completed replicates, plus the abort log."""

    groups: dict  # group name -> GroupStats
    completed: int
    aborted: list  # [replicate, "ErrType: message"] pairs

    def to_dict(self) -> dict:
        return {
            "groups": {
                name: {
                    "coverage": dict(st.coverage),
                    "mean_width": dict(st.mean_width),
                    "bias": st.bias,
                    "rmse": st.rmse,
                    "count": st.count,
                }
                for name, st in self.groups.items()
            },
            "completed": self.completed,
            "aborted": [[r, msg] for r, msg in self.aborted],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageReport":
        groups = {
            name: GroupStats(
                coverage={k: float(v) for k, v in st["coverage"].items()},
                mean_width={k: float(v) for k, v in st["mean_width"].items()},
                bias=float(st["bias"]),
                rmse=float(st["rmse"]),
                count=int(st["count"]),
            )
            for name, st in d["groups"].items()
        }
        return cls(
            groups=groups,
            completed=int(d["completed"]),
            aborted=[[int(r), str(msg)] for r, msg in d["aborted"]],
        )


@dataclass
class OlsSummary:
    """Classical least-squares point estimate and normal-theory intervals."""

    beta_hat: np.ndarray
    intervals: dict  # level (float) -> (lo, hi) arrays


def ols_baseline(data, sigma: float, levels) -> OlsSummary:
    """Plain least squares with known-sigma z intervals, no network term.

    ``data`` needs ``X`` and ``y`` attributes.  The intervals are
    ``beta_hat_j +/- z_{(1+level)/2} * sigma * sqrt((X'X)^-1_jj)``; with an
    identity design the half-width is exactly the z quantile times sigma.
    """
    X = np.asarray(data.X, dtype=float)
    y = np.asarray(data.y, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError(f"X must be 2-D with at least one column, got shape {X.shape}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("X must have full column rank for the least-squares baseline")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xtx = X.T @ X
    beta_hat = np.linalg.solve(xtx, X.T @ y)
    se = sigma * np.sqrt(np.diag(np.linalg.inv(xtx)))
    intervals = {}
    for level in levels:
        level = float(level)
        if not 0.0 < level < 1.0:
            raise ValueError(f"interval level must lie in (0, 1), got {level}")
        z = norm.ppf(0.5 + level / 2.0)
        intervals[level] = (beta_hat - z * se, beta_hat + z * se)
    return OlsSummary(beta_hat=beta_hat, intervals=intervals)


# ------------------------------------------------------------------ CV for lam


def default_cv_grid(model_name: str, data) -> tuple:
    """8-point log-spaced penalty grid anchored on the data scale.

    Matrix completion anchors on the spectral norm of the zero-filled
    observed matrix (the largest weight with a nonzero stage-1 fit is of
    that order); the l1/ridge models anchor on ``2 * ||X'y||_inf``, the
    zero-solution threshold scale; the network grid brackets the cohesion
    weights that matter for a Laplacian with O(1) eigenvalues.
    """
    if model_name == "network":
        return tuple(np.geomspace(1e-2, 1e2, 8))
    if model_name == "mc":
        lam0 = float(np.linalg.norm(data.dense(), 2))
        lam0 = max(lam0, 1e-8)
        return tuple(np.geomspace(1e-4 * lam0, lam0, 8))
    if model_name == "tensor":
        corr = np.tensordot(data.y, data.X, axes=([0], [0]))
        hi = max(2.0 * float(np.abs(corr).max()), 1e-8)
        return tuple(np.geomspace(1e-3 * hi, hi, 8))
    if model_name == "linear":
        hi = max(float(np.abs(data.X.T @ data.y).max()), 1e-8)
        return tuple(np.geomspace(1e-4 * hi, hi, 8))
    raise ValueError(f"no default grid for model {model_name!r}")


def _fold_indices(n: int, folds: int, stream: RandomStream):
    perm = stream.generator().permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds) if part.size]


def _cv_errors_linear(model, data, grid, folds, stream):
    parts = _fold_indices(data.n, folds, stream)
    errs = np.zeros(len(grid))
    for val in parts:
        train = np.setdiff1d(np.arange(data.n), val)
        sub = LinearDataset(data.X[train], data.y[train])
        for i, lam in enumerate(grid):
            theta = model.fit(sub, np.zeros(train.size), lam, {}, None)
            pred = data.X[val] @ theta.flat
            errs[i] += np.mean((data.y[val] - pred) ** 2)
    return errs / len(parts)


def _cv_errors_tensor(model, data, grid, folds, stream, solver_cfg):
    parts = _fold_indices(data.n, folds, stream)
    axes = tuple(range(1, data.X.ndim))
    errs = np.zeros(len(grid))
    for k, val in enumerate(parts):
        train = np.setdiff1d(np.arange(data.n), val)
        sub = TensorDataset(data.X[train], data.y[train])
        for i, lam in enumerate(grid):
            fit = block_relaxation_fit(
                sub, np.zeros(train.size), model.rank, lam,
                cfg=solver_cfg, stream=stream.substream(k),
            )
            B_hat = cp_compose(fit)
            pred = np.tensordot(data.X[val], B_hat, axes=(axes, tuple(range(B_hat.ndim))))
            errs[i] += np.mean((data.y[val] - pred) ** 2)
    return errs / len(parts)


def _cv_errors_mc(model, data, grid, folds, stream, solver_cfg):
    parts = _fold_indices(data.k, folds, stream)
    coords = np.stack([data.rows, data.cols], axis=1)
    errs = np.zeros(len(grid))
    for val in parts:
        train = np.setdiff1d(np.arange(data.k), val)
        sub = ObservedMatrix(data.shape, coords[train], data.values[train])
        for i, lam in enumerate(grid):
            pair = two_stage_fit(sub, np.zeros(train.size), model.rank, lam, solver_cfg)
            pred = np.einsum(
                "kr,kr->k", pair.A[data.rows[val]], pair.B[data.cols[val]]
            )
            errs[i] += np.mean((data.values[val] - pred) ** 2)
    return errs / len(parts)


def cv_lambda(model, data, grid, folds, stream: RandomStream, solver_cfg=None) -> float:
    """Grid penalty weight minimizing mean held-out squared prediction error.

    Folds come from one permutation of ``stream``, shared by every grid
    point; ties break toward the larger weight.  Linear and tensor models
    fold over observations, matrix completion over observed entries, and
    the network model over nodes (holding out responses, with held-out
    cohesion values interpolated through the graph).
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if isinstance(model, NetworkModel):
        errs = [mspe_sigma(data, lam, stream=stream, folds=folds) ** 2 for lam in grid]
    elif isinstance(model, LinearModel):
        errs = _cv_errors_linear(model, data, grid, folds, stream)
    elif isinstance(model, TensorModel):
        errs = _cv_errors_tensor(model, data, grid, folds, stream, solver_cfg)
    elif isinstance(model, McModel):
        errs = _cv_errors_mc(model, data, grid, folds, stream, solver_cfg)
    else:
        raise TypeError(f"no cross-validation routine for {type(model).__name__}")
    best_lam, best_err = grid[0], float("inf")
    for lam, err in zip(grid, errs):
        if err <= best_err:  # ascending grid, so <= prefers the larger weight
            best_lam, best_err = lam, float(err)
    return best_lam


# ------------------------------------------------------------- replicate jobs


def _engine_seed(master_seed: int, r: int) -> int:
    """Per-replicate sampler seed, disjoint from every data stream."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(r, _ENGINE_TAG))
    return int(ss.generate_state(1)[0])


def _all_levels(cfg: ExperimentConfig) -> tuple:
    """Config levels plus the pinned 90/95/99 columns of estimates.csv."""
    return tuple(sorted(set(cfg.levels) | set(_PINNED_LEVELS)))


def _resolve_lam(cfg, model, data, r: int):
    raw = cfg.gfi.get("lam", 0.0)
    if raw != "cv":
        return float(raw)
    grid = cfg.gfi.get("cv_grid")
    if grid is None:
        grid = default_cv_grid(cfg.model, data)
    return cv_lambda(
        model, data, grid, int(cfg.gfi.get("cv_folds", 10)),
        RandomStream(cfg.seed, r, (8,)), solver_cfg=cfg.gfi.get("solver_cfg"),
    )


def _gfi_config(cfg: ExperimentConfig, lam, r: int) -> GfiConfig:
    raw_sigma = cfg.gfi.get("sigma")
    if raw_sigma == "true":
        sigma = float(cfg.scenario["sigma"])
    elif isinstance(raw_sigma, numbers.Real):
        sigma = float(raw_sigma)
    else:
        sigma = None  # the model's own estimator runs before the loop
    return GfiConfig(
        m=cfg.draws,
        c=float(cfg.gfi.get("c", 0.05)),
        lam=lam,
        sigma=sigma,
        solver_cfg=dict(cfg.gfi.get("solver_cfg", {})),
        seed=_engine_seed(cfg.seed, r),
        gauss_newton_only=bool(cfg.gfi.get("gauss_newton_only", False)),
    )


def _target_rows(r, mat, ids, groups, truths, levels, in_estimates=True):
    """Rows for one replicate from a (draws x targets) value matrix."""
    mean = mat.mean(axis=0)
    median = np.quantile(mat, 0.5, axis=0)
    bounds = {}
    for level in levels:
        alpha = 1.0 - level
        lo, hi = np.quantile(mat, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        bounds[_lvl_key(level)] = (lo, hi)
    rows = []
    for j, tid in enumerate(ids):
        ivs = {key: (float(lo[j]), float(hi[j])) for key, (lo, hi) in bounds.items()}
        rows.append(TargetRow(
            replicate=r,
            target_id=tid,
            group=groups[j] if isinstance(groups, (list, tuple, np.ndarray)) else groups,
            truth=float(truths[j]),
            point_mean=float(mean[j]),
            point_median=float(median[j]),
            intervals=ivs,
            in_estimates=in_estimates,
        ))
    return rows


def _job_linear(cfg: ExperimentConfig, r: int):
    sc = cfg.scenario
    n, p, sigma = int(sc["n"]), int(sc["p"]), float(sc["sigma"])
    beta = RandomStream(cfg.seed, 0, (2,)).generator().normal(0.0, 1.0, p)
    X = RandomStream(cfg.seed, r, (5,)).generator().standard_normal((n, p))
    u = gaussian(RandomStream(cfg.seed, r, (6,)), n, sigma)
    data = LinearDataset(X, X @ beta + u)
    model = LinearModel()
    lam = _resolve_lam(cfg, model, data, r)
    sample = run_fiducial(model, data, _gfi_config(cfg, lam, r))
    mat = sample.theta_de_matrix()
    ids = [f"beta_{j}" for j in range(p)]
    return _target_rows(r, mat, ids, "beta", beta, _all_levels(cfg))


def _job_network(cfg: ExperimentConfig, r: int):
    sc = cfg.scenario
    n, p, sigma = int(sc["n"]), int(sc["p"]), float(sc["sigma"])
    eta = tuple(sc.get("eta_means", (-1.0, 0.0, 1.0)))
    base = RandomStream(cfg.seed, 0)
    A = gen_sbm(SbmSpec(n, float(sc["p_w"]), float(sc["p_b"])), base.substream(2))
    X = base.substream(3).generator().standard_normal((n, p))
    X = X - X.mean(axis=0)
    alpha, beta = gen_nr_truth(n, p, float(sc["s"]), eta, base.substream(4))
    u = gaussian(RandomStream(cfg.seed, r, (5,)), n, sigma)
    data = NetworkDataset(A, X, alpha + X @ beta + u)
    model = NetworkModel()
    lam = _resolve_lam(cfg, model, data, r)
    sample = run_fiducial(model, data, _gfi_config(cfg, lam, r))
    levels = _all_levels(cfg)
    mat = sample.theta_de_matrix()[:, :p]
    ids = [f"beta_{j}" for j in range(p)]
    rows = _target_rows(r, mat, ids, "beta", beta, levels)
    ols = ols_baseline(data, sigma, levels)  # baseline always uses the true scale
    for j in range(p):
        ivs = {
            _lvl_key(lv): (float(lo[j]), float(hi[j]))
            for lv, (lo, hi) in ols.intervals.items()
        }
        rows.append(TargetRow(
            replicate=r, target_id=f"ols_beta_{j}", group="ols_beta",
            truth=float(beta[j]), point_mean=float(ols.beta_hat[j]),
            point_median=float(ols.beta_hat[j]), intervals=ivs, in_estimates=False,
        ))
    return rows


def _job_mc(cfg: ExperimentConfig, r: int):
    sc = cfg.scenario
    n, R = int(sc["n"]), int(sc["R"])
    p_obs, sigma = float(sc["p"]), float(sc["sigma"])
    pair = gen_orthonormal_factors(n, R, RandomStream(cfg.seed, r, (5,)))
    M = pair.A @ pair.B.T
    U = RandomStream(cfg.seed, r, (6,)).generator().normal(0.0, sigma, (n, n))
    unif = RandomStream(cfg.seed, r, (7,)).generator().uniform(size=(n, n))
    mask = unif < p_obs
    omega = np.argwhere(mask)
    data = ObservedMatrix((n, n), omega, (M + U)[mask])
    model = McModel(R)
    lam = _resolve_lam(cfg, model, data, r)
    sample = run_fiducial(model, data, _gfi_config(cfg, lam, r))
    levels = _all_levels(cfg)
    rep = mc_complete(sample, (n, n), omega, levels)
    rows = []
    for j, (i, jj) in enumerate(rep.indices):
        ivs = {
            _lvl_key(lv): (float(lo[j]), float(hi[j]))
            for lv, (lo, hi) in rep.intervals.items()
        }
        rows.append(TargetRow(
            replicate=r, target_id=f"m_{i}_{jj}", group="missing",
            truth=float(M[i, jj]), point_mean=float(rep.point_mean[j]),
            point_median=float(rep.point_median[j]), intervals=ivs,
        ))
    return rows


def _job_tensor(cfg: ExperimentConfig, r: int):
    sc = cfg.scenario
    n, side, sigma = int(sc["n"]), int(sc["p"]), float(sc["sigma"])
    shape = (side, side)
    B, _ = gen_tensor_coefficient(
        str(sc["kind"]), shape, RandomStream(cfg.seed, 0, (2,)),
        n_shapes=int(sc.get("n_shapes", 3)),
    )
    X = RandomStream(cfg.seed, r, (5,)).generator().standard_normal((n,) + shape)
    u = gaussian(RandomStream(cfg.seed, r, (6,)), n, sigma)
    y = np.tensordot(X, B, axes=([1, 2], [0, 1])) + u
    data = TensorDataset(X, y)
    model = TensorModel(int(sc["R"]))
    lam = _resolve_lam(cfg, model, data, r)
    sample = run_fiducial(model, data, _gfi_config(cfg, lam, r))
    mat = np.stack([
        cp_compose(factors_from_flat(d.theta_de.flat, shape, model.rank)).ravel()
        for d in sample.accepted_draws()
    ])
    truths = B.ravel()
    groups = ["zero" if t == 0.0 else "nonzero" for t in truths]
    ids = [f"px_{i}_{j}" for i in range(side) for j in range(side)]
    return _target_rows(r, mat, ids, groups, truths, _all_levels(cfg))


_JOBS = {"linear": _job_linear, "network": _job_network, "mc": _job_mc, "tensor": _job_tensor}


def _replicate_job(args):
    cfg, r = args
    try:
        return r, True, _JOBS[cfg.model](cfg, r)
    except Exception as exc:
        return r, False, f"{type(exc).__name__}: {exc}"


# -------------------------------------------------------- aggregation and IO


def _aggregate(cfg: ExperimentConfig, rows, aborted) -> CoverageReport:
    groups = {}
    for name in sorted({row.group for row in rows}):
        grp = [row for row in rows if row.group == name]
        truths = np.array([row.truth for row in grp])
        means = np.array([row.point_mean for row in grp])
        coverage, mean_width = {}, {}
        for level in cfg.levels:
            key = _lvl_key(level)
            lo = np.array([row.intervals[key][0] for row in grp])
            hi = np.array([row.intervals[key][1] for row in grp])
            coverage[key] = float(np.mean((truths >= lo) & (truths <= hi)))
            mean_width[key] = float(np.mean(hi - lo))
        groups[name] = GroupStats(
            coverage=coverage,
            mean_width=mean_width,
            bias=float(np.mean(means - truths)),
            rmse=float(np.sqrt(np.mean((means - truths) ** 2))),
            count=len(grp),
        )
    return CoverageReport(
        groups=groups,
        completed=cfg.replicates - len(aborted),
        aborted=[[r, msg] for r, msg in aborted],
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_outputs(out_dir, cfg: ExperimentConfig, report: CoverageReport, rows):
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["group,level,coverage,mean_width"]
    for name in sorted(report.groups):
        st = report.groups[name]
        for key in sorted(st.coverage, key=float):
            lines.append(f"{name},{key},{_fmt(st.coverage[key])},{_fmt(st.mean_width[key])}")
    with open(os.path.join(out_dir, "coverage.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

    lines = ["replicate,target_id,truth,point_mean,point_median,lo90,hi90,lo95,hi95,lo99,hi99"]
    for row in rows:
        if not row.in_estimates:
            continue
        cells = [str(row.replicate), row.target_id, _fmt(row.truth),
                 _fmt(row.point_mean), _fmt(row.point_median)]
        for level in _PINNED_LEVELS:
            lo, hi = row.intervals[_lvl_key(level)]
            cells.append(_fmt(lo))
            cells.append(_fmt(hi))
        lines.append(",".join(cells))
    with open(os.path.join(out_dir, "estimates.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> CoverageReport:
    """Run every replicate, pool the targets, optionally write result files.

    Replicate r regenerates its dataset from streams keyed by r, runs the
    sampler, and emits one row per target.  An aborting replicate (solver
    breakdown, degenerate data) is logged and excluded; more than 10%
    aborts fails the whole run.  With ``out_dir`` set, writes
    ``summary.json``, ``coverage.csv`` and ``estimates.csv`` (UTF-8, LF,
    17 significant digits).  Results do not depend on ``workers``.
    """
    jobs = [(cfg, r) for r in range(cfg.replicates)]
    if cfg.workers == 1:
        results = [_replicate_job(job) for job in jobs]
    else:
        with get_context("fork").Pool(processes=cfg.workers) as pool:
            results = pool.map(_replicate_job, jobs)
    rows, aborted = [], []
    for r, ok, payload in results:
        if ok:
            rows.extend(payload)
        else:
            aborted.append((r, payload))
    if len(aborted) > 0.1 * cfg.replicates:
        detail = "; ".join(f"replicate {r}: {msg}" for r, msg in aborted[:3])
        raise RuntimeError(
            f"{len(aborted)} of {cfg.replicates} replicates aborted (>10%): {detail}"
        )
    report = _aggregate(cfg, rows, aborted)
    if out_dir is not None:
        _write_outputs(out_dir, cfg, report, rows)
    return report
