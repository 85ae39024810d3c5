"""Permutation machinery tests: Sinkhorn, Hungarian, relaxed sampler."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlinked import permops
from unlinked.permops import RelaxedPermParams


def brute_assignment(Psi):
    """Exhaustive argmax over all K! mappings (oracle for hungarian_round)."""
    K = Psi.shape[0]
    best, best_p = -np.inf, None
    for p in itertools.permutations(range(K)):
        s = sum(Psi[i, p[i]] for i in range(K))
        if s > best + 1e-15:
            best, best_p = s, p
    return np.array(best_p)


# --- mapping/matrix plumbing ------------------------------------------------


def test_perm_matrix_convention():
    P = permops.perm_matrix([1, 0, 2])
    v = np.array([10.0, 20.0, 30.0])
    assert np.allclose(P @ v, [20.0, 10.0, 30.0])
    assert np.array_equal(permops.matrix_to_mapping(P), [1, 0, 2])


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.permutation(5), rng.permutation(5)
        lhs = permops.perm_matrix(a) @ permops.perm_matrix(b)
        assert np.array_equal(lhs, permops.perm_matrix(permops.compose(a, b)))


def test_invert_perm_round_trip():
    rng = np.random.default_rng(1)
    p = rng.permutation(7)
    assert np.array_equal(permops.compose(p, permops.invert_perm(p)), np.arange(7))


# --- sinkhorn ---------------------------------------------------------------


def test_sinkhorn_fixed_points():
    assert np.allclose(permops.sinkhorn_knopp(np.eye(3)), np.eye(3))
    P = permops.perm_matrix([2, 0, 1])
    assert np.allclose(permops.sinkhorn_knopp(P), P)
    assert np.allclose(permops.sinkhorn_knopp(np.ones((2, 2))), 0.5 * np.ones((2, 2)))


def test_sinkhorn_rejects_infeasible():
    with pytest.raises(permops.SinkhornError):
        permops.sinkhorn_knopp(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(permops.SinkhornError):
        permops.sinkhorn_knopp(-np.ones((2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=8), st.integers(0, 2**32 - 1))
def test_sinkhorn_row_col_sums(K, seed):
    M = np.random.default_rng(seed).uniform(0.05, 1.0, size=(K, K))
    A = permops.sinkhorn_knopp(M)
    assert np.abs(A.sum(axis=0) - 1.0).max() < 1e-6
    assert np.abs(A.sum(axis=1) - 1.0).max() < 1e-6
    assert np.all(A >= 0)


def test_sinkhorn_with_grad_matches_plain():
    M = np.random.default_rng(3).uniform(0.1, 1.0, size=(5, 5))
    A1 = permops.sinkhorn_knopp(M)
    A2, _ = permops.sinkhorn_knopp_with_grad(M)
    assert np.allclose(A1, A2)


def test_sinkhorn_vjp_matches_finite_differences():
    rng = np.random.default_rng(4)
    M = rng.uniform(0.2, 1.0, size=(4, 4))
    G = rng.standard_normal((4, 4))
    # tight tolerance so the finite-difference probe sees a converged map
    A, vjp = permops.sinkhorn_knopp_with_grad(M, max_iters=3000, tol=1e-14)
    grad = vjp(G)
    h = 1e-6
    for idx in [(0, 0), (1, 3), (2, 2), (3, 1)]:
        Mp, Mm = M.copy(), M.copy()
        Mp[idx] += h
        Mm[idx] -= h
        fp = np.sum(G * permops.sinkhorn_knopp(Mp, max_iters=3000, tol=1e-14))
        fm = np.sum(G * permops.sinkhorn_knopp(Mm, max_iters=3000, tol=1e-14))
        fd = (fp - fm) / (2 * h)
        assert abs(fd - grad[idx]) < 1e-5 * max(1.0, abs(fd))


# --- hungarian --------------------------------------------------------------


def test_hungarian_simple_cases():
    K = 4
    rng = np.random.default_rng(5)
    Psi = np.eye(K) + 0.01 * rng.uniform(-0.4, 0.4, size=(K, K))
    assert np.array_equal(permops.hungarian_round(Psi), np.arange(K))
    assert np.array_equal(permops.hungarian_round(np.array([[0.1, 0.9], [0.9, 0.1]])), [1, 0])


def test_hungarian_matches_enumeration():
    rng = np.random.default_rng(6)
    for _ in range(50):
        Psi = rng.standard_normal((5, 5))
        assert np.array_equal(permops.hungarian_round(Psi), brute_assignment(Psi))


def test_hungarian_tie_break_lexicographic():
    # all-equal scores: every mapping ties; identity is lexicographically first
    assert np.array_equal(permops.hungarian_round(np.ones((4, 4))), np.arange(4))


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError):
        permops.hungarian_round(np.array([[np.nan, 1.0], [1.0, 0.0]]))


# --- relaxed sampler --------------------------------------------------------


def test_sample_relaxed_cold_noiseless_limit():
    P = permops.perm_matrix([1, 2, 0])
    params = RelaxedPermParams(M=20.0 * P, V=np.full((3, 3), 1e-12), temperature=1e-9)
    pi = permops.sample_relaxed(params, np.random.default_rng(0)).matrix
    assert np.allclose(pi, P, atol=1e-6)


def test_sample_relaxed_hot_limit_is_psi():
    params = RelaxedPermParams(M=np.eye(3), V=np.full((3, 3), 0.2), temperature=1.0)
    rng = np.random.default_rng(1)
    out = permops.sample_relaxed(params, rng)
    Mtil = permops.sinkhorn_knopp(permops.positivity(params.M))
    assert np.allclose(out.matrix, Mtil + params.V * out.noise)


def test_sample_relaxed_mean_matches_sinkhorn():
    params = RelaxedPermParams(M=np.eye(4), V=np.full((4, 4), 0.05), temperature=1.0)
    pis, _ = permops.sample_relaxed_batch(params, 10_000, np.random.default_rng(2))
    Mtil = permops.sinkhorn_knopp(permops.positivity(params.M))
    se = 0.05 / np.sqrt(10_000)
    assert np.abs(pis.mean(axis=0) - Mtil).max() < 3 * se + 1e-12


def test_relaxed_log_density_closed_forms():
    K = 3
    params = RelaxedPermParams(M=np.eye(K), V=np.ones((K, K)), temperature=1.0)
    pi = permops.RelaxedPermutation(matrix=np.eye(K), noise=np.zeros((K, K)))
    ld = permops.relaxed_log_density(pi, params)
    assert abs(ld - (-(K * K) * 0.5 * np.log(2 * np.pi))) < 1e-12
    doubled = RelaxedPermParams(M=np.eye(K), V=2.0 * np.ones((K, K)), temperature=1.0)
    assert abs(permops.relaxed_log_density(pi, doubled) - (ld - K * K * np.log(2.0))) < 1e-12


def test_perm_moments_degenerate_and_psd():
    P = permops.perm_matrix([2, 0, 1])
    params = RelaxedPermParams(M=25.0 * P, V=np.full((3, 3), 1e-12), temperature=1e-9)
    Mstar, Vstar = permops.perm_moments(params, 64, np.random.default_rng(3))
    assert np.allclose(Mstar, P, atol=1e-6)
    assert np.allclose(Vstar, np.eye(3), atol=1e-6)
    lam = np.linalg.eigvalsh(Vstar)
    assert lam[0] > -1e-10


def test_perm_moments_stable_across_seeds():
    params = RelaxedPermParams(M=np.eye(3), V=np.full((3, 3), 0.1), temperature=0.5)
    m1, _ = permops.perm_moments(params, 4000, np.random.default_rng(10))
    m2, _ = permops.perm_moments(params, 4000, np.random.default_rng(11))
    assert np.abs(m1 - m2).max() < 3 * 0.3 / np.sqrt(4000)


# --- hamming and friends ----------------------------------------------------


def test_hamming_basic():
    assert permops.hamming([0, 1, 2], [0, 1, 2]) == 0
    assert permops.hamming([1, 0, 2], [0, 1, 2]) == 2
    assert permops.hamming([1, 2, 0], [0, 1, 2]) == 3


def test_random_perm_with_hamming_targets():
    rng = np.random.default_rng(7)
    assert np.array_equal(permops.random_perm_with_hamming(5, 0, rng), np.arange(5))
    for target in (2, 3, 5):
        p = permops.random_perm_with_hamming(5, target, rng)
        assert permops.hamming(p, np.arange(5)) == target
    with pytest.raises(ValueError):
        permops.random_perm_with_hamming(5, 1, rng)
    with pytest.raises(ValueError):
        permops.random_perm_with_hamming(5, 6, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=8), st.data())
def test_random_perm_hamming_property(K, data):
    target = data.draw(st.sampled_from([0] + list(range(2, K + 1))))
    seed = data.draw(st.integers(0, 2**32 - 1))
    p = permops.random_perm_with_hamming(K, target, np.random.default_rng(seed))
    assert permops.is_permutation(p)
    assert permops.hamming(p, np.arange(K)) == target


def test_block_expand_layout():
    assert np.array_equal(permops.block_expand(np.array([1, 0]), 2), [1, 0, 3, 2])
    assert np.array_equal(permops.block_expand(np.arange(3), 4), np.arange(12))


def test_block_expand_hamming_scaling():
    rng = np.random.default_rng(8)
    for B in range(1, 6):
        p = permops.random_perm_with_hamming(4, 3, rng)
        full = permops.block_expand(p, B)
        assert permops.hamming(full, np.arange(4 * B)) == 3 * B
