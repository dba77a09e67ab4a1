import math

import numpy as np
import pytest
from scipy.optimize import linprog

from entropic_gap.costs import builtin_cost
from entropic_gap.density_grid import DensityDescriptor, discretize, entropy
from entropic_gap.exact import (EllipticityError, SolverError, c_divergence, c_transform_tighten,
                                divergence_hessian, divergence_matrix, dual_objective, hessian_field,
                                monge_map_1d, riemann_volume_entropy, solve_exact, solve_transport)

QUAD = builtin_cost("scaled-quadratic").with_radius(8)


def U(lo, hi):
    return DensityDescriptor("uniform-box", {"bounds": [[lo, hi]]})


def TG(mean, sd, lo, hi):
    return DensityDescriptor("truncated-gaussian", {"mean": mean, "var": sd**2, "bounds": [[lo, hi]]})


@pytest.fixture(scope="module")
def u_to_2u():
    return solve_transport(discretize(U(0, 1), 400), discretize(U(0, 2), 800), QUAD)


@pytest.fixture(scope="module")
def identity():
    r = discretize(U(0, 1), 200)
    return solve_transport(r, r, QUAD)


def highs(a, b, C):
    m, n = C.shape
    fin = np.isfinite(C.ravel())
    A = np.vstack([np.kron(np.eye(m), np.ones(n)), np.kron(np.ones(m), np.eye(n))])
    return linprog(np.where(fin, C.ravel(), 0), A_eq=A, b_eq=np.r_[a, b],
                   bounds=[(0, None if f else 0) for f in fin], method="highs")


def test_matches_highs_on_random_instances(rng):
    for t in range(150):
        m, n = rng.integers(1, 9, 2)
        a = rng.random(m) * (rng.random(m) < 0.8 if t % 3 == 0 else 1)
        b = rng.random(n)
        a[0] += 0.1
        a, b = a / a.sum(), b / b.sum()
        C = rng.integers(0, 4, (m, n)).astype(float) if t % 2 else rng.random((m, n))
        if t % 5 == 0:
            C[rng.random((m, n)) < 0.2] = np.inf
        ref = highs(a, b, C)
        try:
            plan, duals = solve_exact(a, b, C)
        except SolverError:
            assert ref.status == 2
            continue
        assert ref.status == 0
        assert plan.objective == pytest.approx(ref.fun, abs=1e-12)
        assert plan.marginal_residual() < 1e-12
        assert np.all(plan.matrix[~np.isfinite(C)] == 0)


def test_identity_plan():
    a = np.array([0.2, 0.3, 0.5])
    C = np.abs(np.subtract.outer(np.arange(3.0), np.arange(3.0)))
    plan, _ = solve_exact(a, a, C)
    assert np.allclose(plan.matrix, np.diag(a)) and plan.objective == 0


def test_two_by_two():
    plan, _ = solve_exact([0.5, 0.5], [0.5, 0.5], np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(plan.matrix, np.diag([0.5, 0.5])) and plan.objective == 0


def test_uniform_doubling_objective(u_to_2u):
    assert u_to_2u.w_g == pytest.approx(1 / 6, abs=2e-3)


def test_strong_duality_and_slackness(u_to_2u):
    sol = u_to_2u
    assert sol.duality_gap() <= 1e-7
    C = sol.C.entries
    slack = C - sol.duals.psi[:, None] - sol.duals.psi_star[None, :]
    fin = np.isfinite(C)
    assert slack[fin].min() >= -1e-9
    assert np.abs(slack[sol.plan.matrix > 0]).max() <= 1e-7


def test_dual_normalization(u_to_2u):
    first = np.flatnonzero(u_to_2u.plan.target_masses > 0)[0]
    assert u_to_2u.duals.psi_star[first] == 0


def test_infeasible_row():
    C = np.array([[np.inf, np.inf], [0.0, 1.0]])
    with pytest.raises(SolverError):
        solve_exact([0.5, 0.5], [0.5, 0.5], C)


def test_rejects_unbalanced_masses():
    with pytest.raises(ValueError):
        solve_exact([0.5, 0.4], [0.5, 0.5], np.zeros((2, 2)))


def test_pivot_guard():
    rng = np.random.default_rng(1)
    a = rng.random(30)
    b = rng.random(30)
    with pytest.raises(SolverError, match="pivots"):
        solve_exact(a / a.sum(), b / b.sum(), rng.random((30, 30)), max_pivots=1)


def test_tightening_keeps_optimal_duals(u_to_2u):
    psi, star, shift = c_transform_tighten(u_to_2u.C.entries, u_to_2u.duals.psi, u_to_2u.duals.psi_star)
    assert shift < 1e-9
    assert dual_objective(u_to_2u.plan.source_masses, u_to_2u.plan.target_masses, u_to_2u.duals) == \
        pytest.approx(u_to_2u.w_g, abs=1e-10)


def test_monge_map_examples():
    r0 = discretize(U(0, 1), 100)
    dx = 0.01
    assert np.allclose(monge_map_1d(r0, discretize(U(0, 2), 100)), 2 * r0.nodes[:, 0], atol=dx)
    assert np.allclose(monge_map_1d(r0, r0), r0.nodes[:, 0], atol=1e-12)
    assert np.allclose(monge_map_1d(r0, discretize(U(1, 2), 100)), r0.nodes[:, 0] + 1, atol=1e-12)


def test_monge_map_agrees_with_plan(u_to_2u):
    T = monge_map_1d(u_to_2u.rho0, u_to_2u.rho1)
    assert np.allclose(u_to_2u.monge_images()[:, 0], T, atol=u_to_2u.rho1.spacing[0])


@pytest.mark.parametrize("cost", [QUAD, builtin_cost("cosh-sum").with_radius(8)])
def test_plan_support_monotone(cost):
    sol = solve_transport(discretize(TG(0.5, 0.2, 0, 1), 60), discretize(TG(1.0, 0.3, 0, 2), 90), cost)
    i, j = np.nonzero(sol.plan.matrix > 1e-15)
    order = np.lexsort((j, i))
    assert np.all(np.diff(j[order]) >= 0)


def test_divergence_properties(u_to_2u):
    sol = u_to_2u
    D = divergence_matrix(sol)
    assert D[np.isfinite(D)].min() >= -1e-9
    i = 150
    xstar = sol.monge_images()[i]
    assert c_divergence(sol, i, xstar)[0] == pytest.approx(0.0, abs=1e-6)
    ys = np.linspace(0.3, 1.7, 15)[:, None]
    analytic = (ys[:, 0] - xstar[0]) ** 2 / 4
    assert np.allclose(c_divergence(sol, i, ys), analytic, atol=2e-3)
    assert np.isinf(c_divergence(sol, i, [[2.5]])[0])


def test_hessian_uniform_doubling(u_to_2u):
    for j in (200, 400, 600):
        assert divergence_hessian(u_to_2u, j)[0, 0] == pytest.approx(0.5, abs=1e-3)


def test_hessian_identity(identity):
    assert divergence_hessian(identity, 100)[0, 0] == pytest.approx(1.0, abs=1e-3)


def test_hessian_scaled_identity():
    r = discretize(U(0, 1), 200)
    sol = solve_transport(r, r, builtin_cost("scaled-quadratic", 1, [[4.0]], truncation_radius=8))
    assert divergence_hessian(sol, 100)[0, 0] == pytest.approx(4.0, abs=1e-2)


def test_hessian_finite_difference_option(u_to_2u):
    A = divergence_hessian(u_to_2u, 400, method="finite-difference")
    assert A[0, 0] == pytest.approx(0.5, abs=0.15)


def test_hessian_boundary_rejected(u_to_2u):
    with pytest.raises(EllipticityError):
        divergence_hessian(u_to_2u, 1)
    with pytest.raises(ValueError):
        divergence_hessian(u_to_2u, 400, method="spline")


def test_hessian_2d():
    box = DensityDescriptor("uniform-box", {"bounds": [[0, 1], [0, 1]]})
    big = DensityDescriptor("uniform-box", {"bounds": [[0, 2], [0, 2]]})
    sol = solve_transport(discretize(box, 16), discretize(big, 32), builtin_cost("scaled-quadratic", 2).with_radius(12))
    j = np.ravel_multi_index((16, 16), (32, 32))
    assert np.allclose(divergence_hessian(sol, j), 0.5 * np.eye(2), atol=1e-6)


def test_riemann_entropy_examples(u_to_2u, identity):
    assert riemann_volume_entropy(identity.rho1, hessian_field(identity)) == pytest.approx(0.0, abs=1e-3)
    fld = hessian_field(u_to_2u)
    assert riemann_volume_entropy(u_to_2u.rho1, fld) == pytest.approx(0.5 * math.log(0.5), abs=5e-3)
    assert fld.boundary_mass < 0.02
    r = discretize(U(0, 1), 200)
    m = 3.0
    sol = solve_transport(r, r, builtin_cost("scaled-quadratic", 1, [[m]], truncation_radius=8))
    assert riemann_volume_entropy(r, hessian_field(sol)) == pytest.approx(0.5 * math.log(m), abs=1e-3)


def test_riemann_entropy_matches_entropy_difference_under_refinement():
    errs = []
    for n in (100, 200, 400):
        r0 = discretize(TG(0.5, 0.2, 0, 1), n)
        r1 = discretize(TG(1.0, 0.4, 0, 2), 2 * n)
        sol = solve_transport(r0, r1, QUAD)
        H = riemann_volume_entropy(r1, hessian_field(sol))
        errs.append(abs(H - 0.5 * (entropy(r1) - entropy(r0))))
    assert errs[-1] < errs[0] and errs[-1] < 2e-3


def test_csv_dumps(tmp_path, identity):
    identity.plan.to_csv(tmp_path / "plan.csv")
    identity.duals.to_csv(tmp_path / "duals.csv")
    hessian_field(identity).to_csv(tmp_path / "field.csv", identity.rho1)
    assert (tmp_path / "plan.csv").read_text().startswith("i,j,mass")
    assert len((tmp_path / "duals.csv").read_text().splitlines()) == 401
    assert (tmp_path / "field.csv").read_text().splitlines()[0] == "z0,A00,detA"
