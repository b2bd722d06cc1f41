"""Shared numerical kernels: truncated pseudo-inverse, symmetric square
roots, order-statistic quantiles, and reproducible splittable random streams.

All functions are pure; nothing here holds mutable state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RandomStream",
    "gaussian",
    "matrix_sqrt_and_pinv_sqrt",
    "quantile",
    "truncated_pinv",
    "truncated_pinv_apply",
]

#: relative eigenvalue cutoff for Laplacian square roots
_SQRT_EIG_TOL = 1e-10
#: absolute symmetry tolerance (scaled by max(1, max|H|))
_SYM_TOL = 1e-8


def _check_symmetric(H: np.ndarray, name: str) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {H.shape}")
    scale = max(1.0, float(np.abs(H).max(initial=0.0)))
    if float(np.abs(H - H.T).max(initial=0.0)) > _SYM_TOL * scale:
        raise ValueError(f"{name} must be symmetric to tolerance {_SYM_TOL}")
    return H


def truncated_pinv(H: np.ndarray, c: float) -> np.ndarray:
    """Pseudo-inverse of a symmetric matrix with small singular values zeroed.

    Singular values below ``c * zeta1`` (``zeta1`` the largest singular value)
    are treated as exactly zero.  With ``c = 0`` only values below the
    machine-scale cutoff ``zeta1 * 1e-12 * max(rows, cols)`` are dropped.

    For symmetric input the singular values are the absolute eigenvalues, so
    the factorization is computed with ``eigh`` (identical result, cheaper
    than a full SVD on the per-draw path).
    """
    H = _check_symmetric(H, "H")
    if c < 0:
        raise ValueError(f"threshold constant c must be >= 0, got {c}")
    w, V = np.linalg.eigh(H)
    mags = np.abs(w)
    zeta1 = float(mags.max(initial=0.0))
    if zeta1 == 0.0:
        return np.zeros_like(H)
    cutoff = c * zeta1 if c > 0 else zeta1 * 1e-12 * max(H.shape)
    inv = np.where(mags >= cutoff, np.divide(1.0, w, where=mags > 0), 0.0)
    return (V * inv) @ V.T


def truncated_pinv_apply(H: np.ndarray, c: float, vec: np.ndarray) -> np.ndarray:
    """``truncated_pinv(H, c) @ vec`` without forming the inverse matrix.

    Identical result; O(dim^2) after the eigendecomposition instead of the
    O(dim^3) reconstruction, which matters on the per-draw debias path.
    """
    H = _check_symmetric(H, "H")
    if c < 0:
        raise ValueError(f"threshold constant c must be >= 0, got {c}")
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (H.shape[0],):
        raise ValueError(f"vec length {vec.shape} does not match H {H.shape}")
    w, V = np.linalg.eigh(H)
    mags = np.abs(w)
    zeta1 = float(mags.max(initial=0.0))
    if zeta1 == 0.0:
        return np.zeros_like(vec)
    cutoff = c * zeta1 if c > 0 else zeta1 * 1e-12 * max(H.shape)
    inv = np.where(mags >= cutoff, np.divide(1.0, w, where=mags > 0), 0.0)
    return V @ (inv * (V.T @ vec))


def matrix_sqrt_and_pinv_sqrt(L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric PSD square root and its pseudo-inverse, via eigendecomposition.

    Eigenvalues in ``[-1e-10, 1e-10 * lambda_max]`` are treated as zero; an
    eigenvalue below ``-1e-10`` violates the PSD precondition.
    """
    L = _check_symmetric(L, "L")
    w, V = np.linalg.eigh(L)
    if w.size and w[0] < -_SQRT_EIG_TOL:
        raise ValueError(f"matrix has negative eigenvalue {w[0]}, not PSD")
    wmax = float(w.max(initial=0.0))
    w = np.where(w > _SQRT_EIG_TOL * max(wmax, 1e-300), w, 0.0)
    root = np.sqrt(w)
    inv_root = np.divide(1.0, root, where=root > 0)
    inv_root[root == 0] = 0.0
    return (V * root) @ V.T, (V * inv_root) @ V.T


def quantile(values, q: float) -> float:
    """Order-statistic quantile with linear interpolation at h = (n-1)q + 1."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty collection")
    if np.isnan(v).any():
        raise ValueError("quantile input contains NaN")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    v = np.sort(v)
    h = (v.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


@dataclass(frozen=True)
class RandomStream:
    """Immutable descriptor of one reproducible random stream.

    The stream is realized lazily by a counter-based Philox generator keyed on
    ``(master_seed, stream_id, *path)``, so per-stream output depends only on
    the descriptor and never on which worker, thread, or enumeration order
    touches it.  ``substream`` derives statistically independent children.
    """

    master_seed: int
    stream_id: int
    path: tuple = field(default=())

    def __post_init__(self):
        if self.master_seed < 0:
            raise ValueError("master_seed must be a non-negative integer")

    def substream(self, *indices: int) -> "RandomStream":
        return RandomStream(self.master_seed, self.stream_id, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        key = (self.stream_id, *self.path)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(seq))


def gaussian(stream: RandomStream, n: int, sigma: float) -> np.ndarray:
    """``n`` i.i.d. N(0, sigma^2) draws, a pure function of the stream."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    return stream.generator().normal(0.0, sigma, n)
