import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pd, random_psd
from zslmap.errors import DefinitenessError, DimensionError
from zslmap.linalg import (
    factor_sylvester,
    ridge_solve,
    solve_special_sylvester,
    sylvester_kron_oracle,
    sym_eigen,
)


def test_identity_eigenvalues():
    assert np.allclose(sym_eigen(np.eye(3)).eigenvalues, 1.0)


def test_diagonal_eigenvalues():
    assert np.allclose(sym_eigen(np.diag([2.0, 0.0, 5.0])).eigenvalues, [0.0, 2.0, 5.0])


def test_random_symmetric_reconstruction(rng):
    B = rng.standard_normal((20, 20))
    M = B + B.T
    eig = sym_eigen(M)
    assert np.linalg.norm(eig.basis.T @ eig.basis - np.eye(20)) < 1e-8
    assert np.linalg.norm(eig.reconstruct() - M) / np.linalg.norm(M) < 1e-8


def test_sym_eigen_rejects_asymmetric_and_nonsquare():
    with pytest.raises(DimensionError):
        sym_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        sym_eigen(np.ones((2, 3)))


def test_zero_L_gives_N_over_mu(rng):
    N = rng.standard_normal((3, 2))
    assert np.allclose(solve_special_sylvester(np.zeros((3, 3)), np.eye(2), N, 1.0), N)


def test_identity_case_halves_N(rng):
    N = rng.standard_normal((3, 2))
    assert np.allclose(solve_special_sylvester(np.eye(3), np.eye(2), N, 1.0), N / 2)


def test_matches_kron_oracle(rng):
    L, T, N = random_psd(rng, 8, rank=4), random_pd(rng, 5), rng.standard_normal((8, 5))
    W = solve_special_sylvester(L, T, N, 0.3)
    assert np.max(np.abs(W - sylvester_kron_oracle(L, T, N, 0.3))) < 1e-8


@given(st.integers(1, 10), st.integers(1, 10), st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_residual_bound(n, m, mu, seed):
    r = np.random.default_rng(seed)
    L, T, N = random_psd(r, n), random_pd(r, m), r.standard_normal((n, m))
    W = solve_special_sylvester(L, T, N, mu)
    res = np.linalg.norm(L @ W @ T + mu * W - N)
    assert res <= 1e-8 * max(1.0, np.linalg.norm(N))


def test_cached_factor_matches_direct_solve(rng):
    L, T = random_psd(rng, 6), random_pd(rng, 4)
    f = factor_sylvester(L, T)
    for _ in range(3):
        N = rng.standard_normal((6, 4))
        assert np.allclose(f.solve(N, 0.7), solve_special_sylvester(L, T, N, 0.7))


def test_definiteness_errors(rng):
    N = np.ones((2, 2))
    with pytest.raises(DefinitenessError):
        solve_special_sylvester(-np.eye(2), np.eye(2), N, 1.0)
    with pytest.raises(DefinitenessError):
        solve_special_sylvester(np.eye(2), np.diag([1.0, 0.0]), N, 1.0)
    with pytest.raises(DefinitenessError):
        solve_special_sylvester(np.eye(2), np.eye(2), N, 0.0)
    with pytest.raises(DimensionError):
        solve_special_sylvester(np.eye(2), np.eye(3), N, 1.0)


def test_tiny_negative_L_eigenvalue_is_clamped():
    L = np.diag([1.0, -1e-13])
    W = solve_special_sylvester(L, np.eye(1), np.ones((2, 1)), 1.0)
    assert np.allclose(W, [[0.5], [1.0]])


def test_ridge_identity_and_scaling(rng):
    B = rng.standard_normal((4, 3))
    assert np.allclose(ridge_solve(np.eye(4), B), B)
    assert np.allclose(ridge_solve(2 * np.eye(4), B), B / 2)


def test_ridge_residual(rng):
    G, B = random_pd(rng, 10), rng.standard_normal((10, 3))
    X = ridge_solve(G, B)
    assert np.linalg.norm(G @ X - B) <= 1e-8 * np.linalg.norm(B)


def test_ridge_rejects_indefinite():
    with pytest.raises(DefinitenessError):
        ridge_solve(np.diag([1.0, -1.0]), np.ones((2, 1)))
