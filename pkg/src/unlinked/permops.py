"""Permutation machinery: Sinkhorn-Knopp projection, Hungarian rounding,
and the temperature-relaxed permutation sampler with its density.

Matrix convention: a permutation with index mapping m has matrix form
P[i, m[i]] = 1, so (P v)[i] = v[m[i]].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

SINKHORN_MAX_ITERS = 200
SINKHORN_TOL = 1e-6

_LOG_2PI = float(np.log(2.0 * np.pi))


class SinkhornError(RuntimeError):
    pass


def perm_matrix(mapping: np.ndarray) -> np.ndarray:
    """Dense 0/1 matrix form of an index mapping."""
    mapping = np.asarray(mapping, dtype=int)
    K = mapping.size
    P = np.zeros((K, K))
    P[np.arange(K), mapping] = 1.0
    return P


def matrix_to_mapping(P: np.ndarray) -> np.ndarray:
    return np.argmax(P, axis=1)


def is_permutation(mapping: np.ndarray) -> bool:
    mapping = np.asarray(mapping)
    return mapping.ndim == 1 and np.array_equal(np.sort(mapping), np.arange(mapping.size))


def apply_perm(mapping: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(P v) for the matrix P of `mapping` (rows select v[mapping[i]])."""
    return np.asarray(v)[np.asarray(mapping, dtype=int)]


def invert_perm(mapping: np.ndarray) -> np.ndarray:
    mapping = np.asarray(mapping, dtype=int)
    inv = np.empty_like(mapping)
    inv[mapping] = np.arange(mapping.size)
    return inv


def compose(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mapping of P_p @ P_q (apply q first in matrix-action order)."""
    return np.asarray(q, dtype=int)[np.asarray(p, dtype=int)]


@dataclass
class RelaxedPermParams:
    """Mean/scale matrices and temperature of one relaxed-permutation factor."""

    M: np.ndarray
    V: np.ndarray
    temperature: float

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        if np.any(self.V <= 0):
            raise ValueError("V entries must be strictly positive")
        if not 0.0 < self.temperature <= 1.0:
            raise ValueError(f"temperature must be in (0,1], got {self.temperature}")


@dataclass
class RelaxedPermutation:
    """A relaxed permutation matrix together with the noise that generated it."""

    matrix: np.ndarray
    noise: np.ndarray


def positivity(M: np.ndarray) -> np.ndarray:
    """Elementwise exp(M - max(M)): strictly positive, Sinkhorn-invariant shift."""
    M = np.asarray(M, dtype=float)
    return np.exp(M - M.max())


def sinkhorn_knopp(
    M: np.ndarray,
    max_iters: int = SINKHORN_MAX_ITERS,
    tol: float = SINKHORN_TOL,
) -> np.ndarray:
    """Alternating row/column normalization to a doubly stochastic matrix."""
    A = np.asarray(M, dtype=float).copy()
    if np.any(A < 0):
        raise SinkhornError("input must be nonnegative")
    if np.any(A.sum(axis=1) == 0) or np.any(A.sum(axis=0) == 0):
        raise SinkhornError("structurally infeasible: zero row or column")
    for _ in range(max_iters):
        A /= A.sum(axis=1, keepdims=True)
        A /= A.sum(axis=0, keepdims=True)
        dev = max(
            np.abs(A.sum(axis=1) - 1.0).max(),
            np.abs(A.sum(axis=0) - 1.0).max(),
        )
        if dev <= tol:
            break
    return A


def sinkhorn_knopp_with_grad(M, max_iters=SINKHORN_MAX_ITERS, tol=SINKHORN_TOL):
    """Sinkhorn forward pass that also returns a VJP closure.

    The closure maps a cotangent w.r.t. the doubly stochastic output back to
    a cotangent w.r.t. the raw (nonnegative) input, by unrolling the
    row/column normalizations.
    """
    A = np.asarray(M, dtype=float).copy()
    if np.any(A.sum(axis=1) == 0) or np.any(A.sum(axis=0) == 0):
        raise SinkhornError("structurally infeasible: zero row or column")
    trace = []  # (post-row-norm matrix, post-col-norm matrix) per iteration
    for _ in range(max_iters):
        r = A.sum(axis=1, keepdims=True)
        Ar = A / r
        c = Ar.sum(axis=0, keepdims=True)
        Ac = Ar / c
        trace.append((r, Ar, c, Ac))
        A = Ac
        dev = max(np.abs(A.sum(axis=1) - 1.0).max(), np.abs(A.sum(axis=0) - 1.0).max())
        if dev <= tol:
            break

    def vjp(G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, dtype=float)
        for r, Ar, c, Ac in reversed(trace):
            # column normalization: Ac = Ar / c, c_j = sum_i Ar_ij
            G = (G - (G * Ac).sum(axis=0, keepdims=True)) / c
            # row normalization: Ar = A / r, r_i = sum_j A_ij
            G = (G - (G * Ar).sum(axis=1, keepdims=True)) / r
        return G

    return A, vjp


def hungarian_round(Psi: np.ndarray) -> np.ndarray:
    """Mapping of the permutation maximizing sum_i Psi[i, mapping[i]].

    Exact weight ties are broken toward the lexicographically smallest
    mapping via a tiny row-prioritized perturbation.
    """
    Psi = np.asarray(Psi, dtype=float)
    if not np.all(np.isfinite(Psi)):
        raise ValueError("non-finite entries")
    K = Psi.shape[0]
    scale = max(1.0, np.abs(Psi).max())
    # perturbation: strictly prefers smaller columns, earlier rows dominating
    weight = (K - np.arange(K))[None, :] / (K + 1.0) ** np.arange(K)[:, None]
    tie_break = 1e-9 * scale / (K + 1.0) * weight
    rows, cols = linear_sum_assignment(Psi + tie_break, maximize=True)
    mapping = np.empty(K, dtype=int)
    mapping[rows] = cols
    return mapping


def sample_relaxed(params: RelaxedPermParams, rng: np.random.Generator) -> RelaxedPermutation:
    """Draw pi* = tau * Psi + (1 - tau) * round(Psi), Psi = sinkhorn(pos(M)) + V*Z."""
    Mtil = sinkhorn_knopp(positivity(params.M))
    Z = rng.standard_normal(params.M.shape)
    Psi = Mtil + params.V * Z
    rounded = perm_matrix(hungarian_round(Psi))
    tau = params.temperature
    return RelaxedPermutation(matrix=tau * Psi + (1.0 - tau) * rounded, noise=Z)


def relaxed_log_density(pi_star: RelaxedPermutation, params: RelaxedPermParams) -> float:
    """Log density of a self-generated relaxed permutation.

    Evaluated through the retained noise: standard-normal log density of each
    Z entry plus the change-of-variables factor -log(tau * v) per entry.
    """
    Z = pi_star.noise
    tau = params.temperature
    log_norm = -0.5 * (Z**2) - 0.5 * _LOG_2PI
    return float(np.sum(log_norm) - np.sum(np.log(tau * params.V)))


def sample_relaxed_batch(params: RelaxedPermParams, n_samples: int, rng: np.random.Generator):
    """Stack of n_samples relaxed permutations, plus the generating noise."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    Mtil = sinkhorn_knopp(positivity(params.M))
    Z = rng.standard_normal((n_samples,) + params.M.shape)
    Psi = Mtil[None] + params.V[None] * Z
    rounded = np.stack([perm_matrix(hungarian_round(p)) for p in Psi])
    tau = params.temperature
    return tau * Psi + (1.0 - tau) * rounded, Z


def perm_moments(params: RelaxedPermParams, n_samples: int, rng: np.random.Generator):
    """Monte-Carlo estimates of E[pi*] and E[pi*^T pi*]."""
    pis, _ = sample_relaxed_batch(params, n_samples, rng)
    Mstar = pis.mean(axis=0)
    Vstar = np.einsum("ski,skj->ij", pis, pis) / n_samples
    Vstar = 0.5 * (Vstar + Vstar.T)
    return Mstar, Vstar


def hamming(p: np.ndarray, q: np.ndarray) -> int:
    p = np.asarray(p, dtype=int)
    q = np.asarray(q, dtype=int)
    if p.size != q.size:
        raise ValueError("size mismatch")
    return int(np.sum(p != q))


def random_perm_with_hamming(K: int, target_h: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation at exact Hamming distance target_h from the identity.

    target_h = 1 is infeasible (a single displaced index has nowhere to go);
    the feasible set is {0} union {2, ..., K}.
    """
    if target_h == 0:
        return np.arange(K)
    if target_h == 1 or target_h > K or target_h < 0:
        raise ValueError(f"infeasible Hamming target {target_h} for K={K}")
    idx = rng.choice(K, size=target_h, replace=False)
    while True:
        sub = rng.permutation(target_h)
        if np.all(sub != np.arange(target_h)):  # derangement of the chosen slots
            break
    mapping = np.arange(K)
    mapping[idx] = idx[sub]
    return mapping


def block_expand(pi: np.ndarray, B: int) -> np.ndarray:
    """Mapping of bdiag(pi, ..., pi) over B consecutive size-K blocks."""
    pi = np.asarray(pi, dtype=int)
    K = pi.size
    offsets = np.arange(B)[:, None] * K
    return (pi[None, :] + offsets).ravel()
