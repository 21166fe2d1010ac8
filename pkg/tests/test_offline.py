import numpy as np
import pytest

from cemgmsdg.driver import ExperimentConfig, build_problem, decay_study, solve_fine_reference
from cemgmsdg.offline import (EmptySpaceError, MultiscaleBasis, MultiscaleSpace, build_auxiliary_space,
                              build_cem_basis, build_global_basis, build_offline_space,
                              full_space, project_pi, solve_coarse)


@pytest.fixture(scope="module")
def prob(small_problem):
    return small_problem


@pytest.fixture(scope="module")
def aux(prob):
    return build_auxiliary_space(prob.forms, 2)


@pytest.fixture(scope="module")
def u_h(prob):
    return solve_fine_reference(prob.forms)


def _a(v, forms):
    return float(np.sqrt(max(v @ (forms.A @ v), 0.0)))


def test_interior_block_has_constant_kernel(prob, aux):
    g = prob.grid
    for i in range(g.n_elements):
        bx, by = g.element_ij(i)
        if 0 < bx < g.nx - 1 and 0 < by < g.ny - 1:
            p = aux.pairs[i]
            assert abs(p.values[0]) <= 1e-10
            phi = p.vectors[:, 0]
            assert np.ptp(phi) <= 1e-8 * np.abs(phi).max()


def test_auxiliary_pairs_against_dense_oracle(prob, aux):
    f = prob.forms
    for i in range(prob.grid.n_elements):
        a, s = f.block_a(i), f.block_s(i)
        L = np.linalg.cholesky(s)
        C = np.linalg.solve(L, np.linalg.solve(L, a).T).T
        ref = np.linalg.eigvalsh(0.5 * (C + C.T))[:3]
        p = aux.pairs[i]
        assert np.allclose(p.values, ref, rtol=1e-9, atol=1e-9 * max(1.0, ref.max()))
        V = p.vectors
        assert np.allclose(V.T @ s @ V, np.eye(3), atol=1e-7)


def test_lambda_values(aux):
    lam = [p.values[2] for p in aux.pairs]
    assert aux.Lambda == min(lam) > 0
    assert aux.lambda_max == max(p.values[1] for p in aux.pairs)


def test_overrides_and_errors(prob):
    a = build_auxiliary_space(prob.forms, 2, overrides={3: 4})
    assert a.counts[3] == 4 and a.W.shape[1] == 2 * (prob.grid.n_elements - 1) + 4
    with pytest.raises(ValueError):
        build_auxiliary_space(prob.forms, 0)
    with pytest.raises(ValueError):
        build_auxiliary_space(prob.forms, 10_000)


def test_projection_properties(prob, aux):
    rng = np.random.default_rng(0)
    n = prob.grid.total_dofs
    for _ in range(5):
        v = rng.standard_normal(n)
        _, pv = project_pi(v, aux)
        _, ppv = project_pi(pv, aux)
        assert np.max(np.abs(ppv - pv)) <= 1e-12 * np.abs(pv).max()
    phi = aux.phi(5, 1)
    c, pphi = project_pi(phi, aux)
    assert np.allclose(pphi, phi, atol=1e-12)
    assert np.allclose(c, np.eye(aux.W.shape[1])[aux.col_offsets[5] + 1], atol=1e-12)
    w = rng.standard_normal(n)
    w = w - project_pi(w, aux)[1]
    assert np.max(np.abs(project_pi(w, aux)[1])) <= 1e-12 * np.abs(w).max()


def test_projection_error_bound(prob, aux):
    f = prob.forms
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = rng.standard_normal(prob.grid.total_dofs)
        r = v - project_pi(v, aux)[1]
        lhs = r @ (f.S @ r)
        rhs = (v @ (f.volume @ v)) / aux.Lambda
        assert lhs <= rhs + 1e-8


def test_cem_basis_solves_its_system(prob, aux):
    f = prob.forms
    i, j, m = 5, 1, 1
    psi = build_cem_basis(i, j, m, f, aux)
    idx = psi.dofs
    assert np.array_equal(idx, prob.grid.region_dofs(prob.grid.oversample_block(i, m)))
    x = psi.vector(prob.grid.total_dofs)
    Wr = aux.W[:, aux.columns(psi.support.elements)]
    lhs_op = f.A @ x + Wr @ (Wr.T @ x)
    rhs = aux.W[:, aux.col_offsets[i] + j].toarray().ravel()
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = np.zeros(prob.grid.total_dofs)
        v[idx] = rng.standard_normal(len(idx))
        assert abs(v @ lhs_op - v @ rhs) <= 1e-8 * _a(v, f)


def test_support_discipline(prob, aux):
    psi = build_cem_basis(0, 0, 1, prob.forms, aux)
    full = psi.vector(prob.grid.total_dofs)
    outside = np.setdiff1d(np.arange(prob.grid.total_dofs), psi.dofs)
    assert np.all(full[outside] == 0.0)


def test_global_basis_properties(prob, aux):
    f = prob.forms
    n = prob.grid.total_dofs
    glo = build_global_basis(5, 0, f, aux)
    psi = glo.vector(n)
    # energy bound ||psi||_a^2 + ||pi psi||_s^2 <= ||phi||_s^2 = 1
    ppsi = project_pi(psi, aux)[1]
    assert psi @ (f.A @ psi) + ppsi @ (f.S @ ppsi) <= 1 + 1e-8
    # a-orthogonal to the kernel of pi
    rng = np.random.default_rng(3)
    for _ in range(10):
        w = rng.standard_normal(n)
        v = w - project_pi(w, aux)[1]
        assert abs(v @ (f.A @ psi)) <= 1e-8 * _a(v, f) * _a(psi, f)
    # a patch covering the domain reproduces the global function
    loc = build_cem_basis(5, 0, 10, f, aux)
    assert loc.support.elements == prob.grid.whole().elements
    d = loc.vector(n) - psi
    assert _a(d, f) <= 1e-8 * _a(psi, f)


def test_decay_on_constant_medium():
    p = build_problem(ExperimentConfig(coarse_n=6, fine_per_coarse=4, medium="constant"))
    a = build_auxiliary_space(p.forms, 2)
    rows = decay_study(p.forms, a, 0, 0, [1, 2, 3, 4, 5])
    e = [r[1] for r in rows]
    assert all(e[k + 1] < e[k] for k in range(4))
    assert all(e[k + 1] / e[k] < 0.5 for k in range(3))
    # the corner block with 5 layers covers the whole 6x6 grid
    assert e[4] <= 1e-8 * e[0]


def test_offline_space_layout(prob, aux):
    sp_ = build_offline_space(prob.forms, aux, m=1)
    assert len(sp_) == 2 * prob.grid.n_elements
    assert [b.origin[1:3] for b in sp_.bases] == [(i, j) for i in range(prob.grid.n_elements)
                                                  for j in range(2)]
    again = build_offline_space(prob.forms, aux, m=1, threads=3)
    for b1, b2 in zip(sp_.bases, again.bases):
        assert b1.values.tobytes() == b2.values.tobytes()


def test_full_space_recovers_reference(prob, u_h):
    sol = solve_coarse(full_space(prob.grid), prob.forms)
    d = sol.u - u_h
    assert _a(d, prob.forms) <= 1e-10 * _a(u_h, prob.forms)


def test_single_reference_basis(prob, u_h):
    sp_ = MultiscaleSpace(prob.grid.total_dofs)
    whole = prob.grid.whole()
    sp_.append(MultiscaleBasis(np.arange(prob.grid.total_dofs), u_h.copy(), ("ref",), whole))
    sol = solve_coarse(sp_, prob.forms)
    assert sol.coefficients[0] == pytest.approx(1.0, abs=1e-10)


def test_nested_spaces_and_galerkin_orthogonality(prob, aux, u_h):
    f = prob.forms
    small = build_offline_space(f, aux, m=1)
    big = small.copy()
    for b in build_offline_space(f, aux, m=2).bases:
        big.append(b, 1)
    e = []
    for space in (small, big):
        sol = solve_coarse(space, f)
        R = space.prolongation()
        g = R.T @ (f.A @ sol.u - f.F)
        assert np.max(np.abs(g)) <= 1e-9 * np.linalg.norm(f.F)
        e.append(_a(u_h - sol.u, f))
    assert e[1] <= e[0] + 1e-10 * _a(u_h, f)


def test_dependent_basis_dropped_and_logged(prob, aux):
    f = prob.forms
    sp_ = build_offline_space(f, aux, m=1)
    sp_.append(sp_.bases[3], 1)
    sol = solve_coarse(sp_, f, iteration=1)
    assert len(sol.dropped) == 1
    assert len(sp_) == 2 * prob.grid.n_elements
    assert sp_.log[-1][:2] == (1, "drop")


def test_empty_space_rejected(prob):
    with pytest.raises(EmptySpaceError):
        solve_coarse(MultiscaleSpace(prob.grid.total_dofs), prob.forms)
    sp_ = MultiscaleSpace(prob.grid.total_dofs)
    sp_.append(MultiscaleBasis(np.array([0]), np.array([0.0]), ("zero",), prob.grid.whole()))
    with pytest.raises(EmptySpaceError):
        solve_coarse(sp_, prob.forms)
