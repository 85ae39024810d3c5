"""Block-permuted dependent-data generating process.

Domain layout: B unit cells tile a near-square ceil(sqrt(B))-column grid
in row-major order; each cell owns K consecutive indices, so block b holds
indices [b*K, (b+1)*K).  The same within-block permutations are repeated
across all blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import covkernel, permops
from .covkernel import CovarianceParams


@dataclass(frozen=True)
class SimConfig:
    K: int
    B: int
    beta: float
    cov: CovarianceParams
    hX: int = 0
    hS: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")


@dataclass
class Truth:
    beta: float
    piX: np.ndarray
    piS: np.ndarray
    W: Optional[np.ndarray] = None


@dataclass
class Dataset:
    points: np.ndarray  # (n, 2)
    X: np.ndarray
    Y: np.ndarray
    K: int
    B: int
    truth: Optional[Truth] = None

    @property
    def n(self) -> int:
        return self.K * self.B

    def blocks(self):
        """Index ranges of the B consecutive blocks."""
        for b in range(self.B):
            yield slice(b * self.K, (b + 1) * self.K)


def generate_domain(B: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """K uniform points in each of B unit cells tiled on a near-square grid."""
    cols = math.isqrt(B)
    if cols * cols < B:
        cols += 1
    points = np.empty((B * K, 2))
    for b in range(B):
        row, col = divmod(b, cols)
        u = rng.uniform(size=(K, 2))
        points[b * K : (b + 1) * K] = u + np.array([col, row])
    return points


def simulate(
    config: SimConfig,
    piX: Optional[np.ndarray] = None,
    piS: Optional[np.ndarray] = None,
) -> Dataset:
    """Draw one dataset: Y = Pi_X X beta + Pi_S W + eps, block-permuted.

    Pass explicit piX/piS to freeze the permutations across replicates;
    by default they are redrawn at the configured Hamming distances.
    """
    rng = np.random.default_rng(config.seed)
    K, B = config.K, config.B
    n = K * B
    points = generate_domain(B, K, rng)

    X = rng.standard_normal(n)
    R = covkernel.exp_correlation(points, config.cov.phi)
    L = covkernel.chol_factor(config.cov.sigma2 * R + 1e-12 * np.eye(n))
    W = L @ rng.standard_normal(n)
    eps = math.sqrt(config.cov.tau2) * rng.standard_normal(n)

    if piX is None:
        piX = permops.random_perm_with_hamming(K, config.hX, rng)
    else:
        piX = np.asarray(piX, dtype=int)
    if piS is None:
        piS = permops.random_perm_with_hamming(K, config.hS, rng)
    else:
        piS = np.asarray(piS, dtype=int)
    PiX = permops.block_expand(piX, B)
    PiS = permops.block_expand(piS, B)

    Y = permops.apply_perm(PiX, X) * config.beta + permops.apply_perm(PiS, W) + eps
    return Dataset(
        points=points,
        X=X,
        Y=Y,
        K=K,
        B=B,
        truth=Truth(beta=config.beta, piX=piX, piS=piS, W=W),
    )


def shuffle_within_blocks(data: Dataset, piX: np.ndarray, piS: np.ndarray) -> Dataset:
    """Permute X and the coordinate rows within each block; Y is untouched.

    Used for the real-data workflow, where the doubly-unlinked structure is
    induced on linked data: afterwards Y = Pi_X' X' beta + ... holds with
    Pi_X' the inverse of the applied shuffle.
    """
    if len(piX) != data.K or len(piS) != data.K:
        raise ValueError("permutations must have size K")
    PiX = permops.block_expand(np.asarray(piX, dtype=int), data.B)
    PiS = permops.block_expand(np.asarray(piS, dtype=int), data.B)
    X = permops.apply_perm(PiX, data.X)
    points = data.points[PiS]
    # observed X was moved by piX, so the generating model sees its inverse
    truth = Truth(
        beta=data.truth.beta if data.truth else float("nan"),
        piX=permops.invert_perm(np.asarray(piX, dtype=int)),
        piS=permops.invert_perm(np.asarray(piS, dtype=int)),
        W=data.truth.W if data.truth else None,
    )
    return replace(data, X=X, points=points, truth=truth)
