"""Generalized fiducial inference for additive-noise models.

The engine draws fiducial samples by repeatedly perturbing the observed
responses with synthetic noise, refitting a penalized model, debiasing the
fit with a truncated pseudo-inverse correction, and filtering the draws with
a Tukey-fence rule on their losses.  Built-in model plugins cover linear
regression, CP tensor regression, low-rank matrix completion, and regression
with network cohesion; ``gfi.harness`` runs replicated coverage studies and
``gfi`` on the command line drives it from a TOML config.
"""

# Pin BLAS thread pools before numpy initializes them: replicate-level
# multiprocessing supplies the parallelism, and oversubscription both slows
# the harness down and is the one thing that could make results depend on
# machine load.  setdefault so an explicit user setting wins.
import os as _os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, "1")
del _os, _var

from .engine import (  # noqa: E402
    AdditiveNoiseModel,
    EngineError,
    FiducialDraw,
    FiducialSample,
    GfiConfig,
    ParameterPoint,
    SolverFailure,
    SummaryReport,
    acceptance_filter,
    debias,
    run_fiducial,
    summarize,
)
from ._kernels import KERNEL_BACKEND  # noqa: E402
from .numerics import RandomStream  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AdditiveNoiseModel",
    "KERNEL_BACKEND",
    "EngineError",
    "FiducialDraw",
    "FiducialSample",
    "GfiConfig",
    "ParameterPoint",
    "RandomStream",
    "SolverFailure",
    "SummaryReport",
    "acceptance_filter",
    "debias",
    "run_fiducial",
    "summarize",
    "__version__",
]
