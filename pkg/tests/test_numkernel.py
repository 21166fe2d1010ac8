import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from cemgmsdg.numkernel import (LowRankSPDSolver, SolverError, SPDFactor, apply_sign_convention,
                                generalized_eig_sym, pivoted_cholesky_select, residual_floor,
                                solve_spd)


def _random_spd(n, seed, cond=1e3):
    r = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(r.standard_normal((n, n)))
    w = np.logspace(0, np.log10(cond), n)
    return (Q * w) @ Q.T


def test_identity_solve():
    b = np.random.default_rng(0).standard_normal(17)
    assert np.array_equal(solve_spd(sp.identity(17), b), b)


def test_two_by_two():
    x = solve_spd(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), np.array([3.0, 3.0]))
    assert np.allclose(x, [1.0, 1.0], atol=1e-15)


def test_random_spd_against_dense_oracle():
    M = _random_spd(50, 1)
    b = np.random.default_rng(2).standard_normal(50)
    x = solve_spd(sp.csr_matrix(M), b)
    ref = sla.cho_solve(sla.cho_factor(M), b)
    assert np.allclose(x, ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())
    assert np.linalg.norm(M @ x - b) / np.linalg.norm(b) <= 1e-10


def test_zero_rhs_and_multiple_rhs():
    M = sp.csr_matrix(_random_spd(12, 3))
    assert np.all(solve_spd(M, np.zeros(12)) == 0)
    B = np.random.default_rng(4).standard_normal((12, 3))
    X = SPDFactor(M).solve(B)
    assert np.allclose(M @ X, B, atol=1e-10)


def test_indefinite_rejected():
    M = sp.csr_matrix(np.diag([1.0, -1.0, 2.0]) + 0.0)
    with pytest.raises(SolverError, match="positive definite"):
        solve_spd(M, np.ones(3), context="probe")
    M = sp.csr_matrix([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(SolverError):
        SPDFactor(M)


def test_iterative_path_reaches_tolerance():
    n = 40
    T = sp.diags([-1, 2.0001, -1], [-1, 0, 1], shape=(n, n))
    M = sp.csr_matrix(sp.kron(T, sp.identity(n)) + sp.kron(sp.identity(n), T))
    b = np.random.default_rng(5).standard_normal(n * n)
    x = solve_spd(M, b, direct_max=10)
    assert np.linalg.norm(M @ x - b) / np.linalg.norm(b) <= 1e-10


def test_residual_floor_scales_with_contrast():
    M = sp.diags([1.0, 1e8])
    x = np.array([1.0, 1.0])
    b = M @ x
    assert residual_floor(M, x, b) == pytest.approx(10 * np.finfo(float).eps, rel=1e-12)


def test_low_rank_solver_matches_dense():
    r = np.random.default_rng(6)
    A = _random_spd(30, 7)
    U = r.standard_normal((30, 4)) * (r.random((30, 4)) < 0.4)
    sol = LowRankSPDSolver(sp.csr_matrix(A), sp.csc_matrix(U))
    b = r.standard_normal(30)
    x = sol.solve(b)
    assert np.allclose((A + U @ U.T) @ x, b, atol=1e-10)
    B = r.standard_normal((30, 2))
    assert np.allclose((A + U @ U.T) @ sol.solve(B), B, atol=1e-10)
    assert np.allclose(sol.matvec(b), (A + U @ U.T) @ b)


def test_low_rank_solver_detects_indefinite():
    A = np.diag([1.0, 2.0, -5.0])
    U = np.array([[1.0], [0.0], [1.0]])  # A + UU^T still indefinite
    with pytest.raises(SolverError):
        LowRankSPDSolver(sp.csr_matrix(A), sp.csc_matrix(U))


def test_eig_zero_operator():
    B = _random_spd(8, 8, cond=10)
    ep = generalized_eig_sym(np.zeros((8, 8)), B, 3)
    assert np.all(np.abs(ep.values) <= 1e-12)
    assert np.allclose(ep.vectors.T @ B @ ep.vectors, np.eye(3), atol=1e-12)


def test_eig_identical_pencil():
    B = _random_spd(9, 9, cond=10)
    ep = generalized_eig_sym(B, B, 4)
    assert np.allclose(ep.values, 1.0, atol=1e-12)


def test_eig_against_cholesky_reduction_oracle():
    r = np.random.default_rng(10)
    X = r.standard_normal((30, 30))
    A = X @ X.T
    B = _random_spd(30, 11, cond=50)
    ep = generalized_eig_sym(A, B, 6)
    # oracle: B = L L^T, eigenvalues of L^-1 A L^-T
    L = np.linalg.cholesky(B)
    C = np.linalg.solve(L, np.linalg.solve(L, A).T).T
    ref = np.sort(np.linalg.eigvalsh(0.5 * (C + C.T)))[:6]
    assert np.allclose(ep.values, ref, rtol=1e-9, atol=1e-9 * ref.max())
    assert np.all(np.diff(ep.values) >= 0)
    V = ep.vectors
    assert np.allclose(V.T @ B @ V, np.eye(6), atol=1e-10)
    rq = np.einsum("ij,ij->j", V, A @ V) / np.einsum("ij,ij->j", V, B @ V)
    assert np.allclose(rq, ep.values, rtol=1e-10, atol=1e-12)
    for j in range(6):
        first = V[np.flatnonzero(np.abs(V[:, j]) > 1e-12)[0], j]
        assert first > 0


def test_eig_errors():
    with pytest.raises(SolverError):
        generalized_eig_sym(np.eye(3), -np.eye(3), 1)
    with pytest.raises(ValueError):
        generalized_eig_sym(np.eye(3), np.eye(3), 4)


def test_sign_convention_skips_tiny_entries():
    V = np.array([[1e-14, 0.0], [-2.0, 0.5], [1.0, -1.0]])
    W = apply_sign_convention(V)
    assert np.array_equal(W[:, 0], -V[:, 0])
    assert np.array_equal(W[:, 1], V[:, 1])


def test_pivoted_cholesky_drops_dependent_columns():
    r = np.random.default_rng(12)
    X = r.standard_normal((20, 5))
    X = np.column_stack([X, X[:, 1] + 2 * X[:, 3]])  # column 5 dependent
    keep = pivoted_cholesky_select(X.T @ X)
    assert len(keep) == 5 and np.all(np.diff(keep) > 0)
    assert np.linalg.matrix_rank(X[:, keep]) == 5
    assert list(pivoted_cholesky_select(np.eye(4))) == [0, 1, 2, 3]
    assert pivoted_cholesky_select(np.zeros((3, 3))).size == 0


def test_solves_deterministic():
    M = sp.csr_matrix(_random_spd(40, 13))
    b = np.random.default_rng(14).standard_normal(40)
    assert solve_spd(M, b).tobytes() == solve_spd(M, b).tobytes()
