"""Synthetic data generators for the three simulation studies.

Every generator is a pure function of its arguments and a RandomStream, so
replicated datasets are reproducible no matter which worker builds them.
"""
from dataclasses import dataclass

import numpy as np

from .models.completion import FactorPair
from .models.tensor import CpFactors, cp_compose
from .numerics import RandomStream

__all__ = [
    "SbmSpec",
    "gen_nr_truth",
    "gen_orthonormal_factors",
    "gen_sbm",
    "gen_tensor_coefficient",
]


@dataclass(frozen=True)
class SbmSpec:
    """Three equal blocks with within/between edge probabilities."""

    n: int
    p_w: float
    p_b: float

    def __post_init__(self):
        if self.n < 3 or self.n % 3:
            raise ValueError(f"n must be a positive multiple of 3, got {self.n}")
        if not 0.0 <= self.p_b <= self.p_w <= 1.0:
            raise ValueError(
                f"need 0 <= p_b <= p_w <= 1, got p_w={self.p_w}, p_b={self.p_b}"
            )

    @property
    def block_size(self) -> int:
        return self.n // 3


def gen_sbm(spec: SbmSpec, stream: RandomStream) -> np.ndarray:
    """Symmetric hollow Bernoulli adjacency with blockwise edge probabilities.

    Nodes are assigned to the three blocks in consecutive runs of n/3, so the
    probability matrix is the 3x3 block pattern expanded by an all-ones block.
    """
    g = stream.generator()
    ids = np.repeat(np.arange(3), spec.block_size)
    P = np.where(ids[:, None] == ids[None, :], spec.p_w, spec.p_b)
    iu = np.triu_indices(spec.n, 1)
    A = np.zeros((spec.n, spec.n))
    A[iu] = (g.uniform(size=iu[0].size) < P[iu]).astype(float)
    return A + A.T


def gen_orthonormal_factors(n: int, R: int, stream: RandomStream) -> FactorPair:
    """Two independent n x R matrices with orthonormal columns (QR of Gaussians)."""
    if not 1 <= R <= n:
        raise ValueError(f"need 1 <= R <= n, got R={R}, n={n}")
    g = stream.generator()
    qa, _ = np.linalg.qr(g.standard_normal((n, R)))
    qb, _ = np.linalg.qr(g.standard_normal((n, R)))
    return FactorPair(qa, qb)


def gen_tensor_coefficient(kind: str, shape, stream: RandomStream,
                           n_shapes: int = 3):
    """A 2-D coefficient image plus its nonzero fraction.

    ``rank_exact`` composes three sparse rank-one terms; ``shapes`` paints
    ``n_shapes`` piecewise-constant pieces (a disk plus axis-aligned
    rectangles); ``dense_image`` sums smooth Gaussian bumps, leaving
    essentially no exact zeros.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2 or min(shape) < 2:
        raise ValueError(f"shape must be 2-D with sides >= 2, got {shape}")
    g = stream.generator()
    if kind == "rank_exact":
        factors = []
        for p in shape:
            F = np.zeros((p, 3))
            width = max(1, round(0.4 * p))
            for r in range(3):
                lo = int(g.integers(0, p - width + 1))
                F[lo:lo + width, r] = g.standard_normal(width)
            factors.append(F)
        B = cp_compose(CpFactors(tuple(factors)))
    elif kind == "shapes":
        B = np.zeros(shape)
        rows = np.arange(shape[0])[:, None]
        cols = np.arange(shape[1])[None, :]
        for k in range(n_shapes):
            value = g.choice([-1.0, 1.0]) * g.uniform(0.5, 2.0)
            if k == 0:
                ci = g.uniform(0.2, 0.8) * shape[0]
                cj = g.uniform(0.2, 0.8) * shape[1]
                radius = g.uniform(0.12, 0.3) * min(shape)
                mask = (rows - ci) ** 2 + (cols - cj) ** 2 <= radius**2
                B[mask] = value
            else:
                h = int(g.integers(max(1, shape[0] // 5), max(2, shape[0] // 2)))
                w = int(g.integers(max(1, shape[1] // 5), max(2, shape[1] // 2)))
                i0 = int(g.integers(0, shape[0] - h + 1))
                j0 = int(g.integers(0, shape[1] - w + 1))
                B[i0:i0 + h, j0:j0 + w] = value
    elif kind == "dense_image":
        B = np.zeros(shape)
        rows = np.arange(shape[0])[:, None]
        cols = np.arange(shape[1])[None, :]
        for _ in range(4):
            amp = g.choice([-1.0, 1.0]) * g.uniform(0.5, 2.0)
            ci = g.uniform(0.0, shape[0])
            cj = g.uniform(0.0, shape[1])
            width = g.uniform(0.15, 0.35) * min(shape)
            B = B + amp * np.exp(
                -((rows - ci) ** 2 + (cols - cj) ** 2) / (2.0 * width**2)
            )
    else:
        raise ValueError(f"unknown coefficient kind {kind!r}")
    return B, np.count_nonzero(B) / B.size


def gen_nr_truth(n: int, p: int, s: float, eta_means, stream: RandomStream):
    """Cohesion vector and regression coefficients for the network study.

    beta ~ N(1, I_p); alpha_i ~ N(eta_block(i), s^2) over three consecutive
    blocks of n/3 nodes, exactly blockwise constant when s = 0.
    """
    if n < 3 or n % 3:
        raise ValueError(f"n must be a positive multiple of 3, got {n}")
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    eta = np.asarray(eta_means, dtype=float)
    if eta.shape != (3,):
        raise ValueError(f"eta_means must have three entries, got {eta.shape}")
    g = stream.generator()
    beta = g.normal(1.0, 1.0, p)
    base = np.repeat(eta, n // 3)
    alpha = base if s == 0 else base + g.normal(0.0, s, n)
    return alpha, beta
