import math
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import beta

from entropic_gap.dirichlet import (
    SimplexDescriptor, SimplexPoint, cauchy_spread, chart_to_simplex, cost_chart_hessian, cost_in_coords,
    diri_density, dirichlet_cost, dirichlet_kernel, discretize_simplex, diversity_fn, ent0, ent0_split,
    exp_coords, exp_coords_inv, geometric_mean_fn, haar_density, inverse_jacobian, is_exp_concave_midpoint,
    l_divergence, l_matrix, l_matrix_reduced, log_dirichlet_kernel, log_kernel_constant, portfolio_map,
    simplex_inv, simplex_mul, stirling_ratio, theorem2_sweep, translate_jacobian, zero_fn)
from entropic_gap.config import load_config


def random_simplex(rng, size, n):
    return rng.dirichlet(np.ones(n), size=size)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_group_axioms(rng, n):
    p, q, r = (random_simplex(rng, 200, n) for _ in range(3))
    e = np.full(n, 1.0 / n)
    assert np.allclose(simplex_mul(p, e), p, atol=1e-12)
    assert np.allclose(simplex_mul(p, simplex_inv(p)), e, atol=1e-12)
    assert np.allclose(simplex_mul(simplex_mul(p, q), r), simplex_mul(p, simplex_mul(q, r)), atol=1e-12)
    assert np.allclose(simplex_mul(p, q), simplex_mul(q, p), atol=1e-15)


def test_simplex_point():
    p = SimplexPoint([2.0, 1.0, 1.0])
    assert np.allclose(p.coords, [0.5, 0.25, 0.25])
    assert np.allclose((p @ p.inverse()).coords, SimplexPoint.barycenter(3).coords)
    with pytest.raises(ValueError):
        SimplexPoint([1.0, 0.0])
    with pytest.raises(ValueError):
        p.coords[0] = 1.0


def test_cost_hand_value():
    assert dirichlet_cost([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.143841, abs=5e-7)
    # log(1) - (log 1.5 + log 0.5) / 2
    assert dirichlet_cost([0.5, 0.5], [0.75, 0.25]) == pytest.approx(-0.5 * math.log(0.75), abs=1e-15)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_cost_properties(rng, n):
    p, q = random_simplex(rng, 300, n), random_simplex(rng, 300, n)
    c = dirichlet_cost(p, q)
    assert np.all(c > 0)
    assert np.allclose(dirichlet_cost(p, p), 0, atol=1e-15)
    assert np.allclose(c, dirichlet_cost(simplex_inv(q), simplex_inv(p)), atol=1e-12)
    e = np.full(n, 1.0 / n)
    z = simplex_mul(q, simplex_inv(p))
    assert np.allclose(c, np.sum(e * np.log(e / z), axis=1), atol=1e-12)


def test_exp_coords(rng):
    p = random_simplex(rng, 100, 3)
    q = random_simplex(rng, 100, 3)
    assert np.allclose(exp_coords([1 / 3] * 3), 0)
    assert np.allclose(exp_coords_inv(exp_coords(p)), p, atol=1e-12)
    assert np.allclose(cost_in_coords(exp_coords(p), exp_coords(q)), dirichlet_cost(p, q), atol=1e-12)


def test_cost_chart_hessian_matches_finite_differences():
    e = np.full(3, 1 / 3)
    assert np.allclose(cost_chart_hessian(e), 3 * (np.eye(2) + 1), atol=1e-12)
    p = np.array([0.2, 0.3, 0.5])
    s = 1e-4
    f = lambda x: dirichlet_cost(p, chart_to_simplex(np.asarray(x)))
    H = np.empty((2, 2))
    E = np.eye(2) * s
    for i in range(2):
        for j in range(2):
            H[i, j] = (f(p[:2] + E[i] + E[j]) - f(p[:2] + E[i] - E[j]) - f(p[:2] - E[i] + E[j])
                       + f(p[:2] - E[i] - E[j])) / (4 * s * s)
    assert np.allclose(cost_chart_hessian(p), H, atol=1e-5)


def test_diri_density_integrates_to_one():
    m = 200_000
    x = (np.arange(m) + 0.5) / m
    total = diri_density(5.0, chart_to_simplex(x[:, None])).sum() / m
    assert total == pytest.approx(1.0, abs=1e-4)
    assert diri_density(5.0, [0.3, 0.7]) == pytest.approx(beta(2.5, 2.5).pdf(0.3), rel=1e-12)


def test_diri_density_large_lambda_is_finite():
    v = diri_density(1e4, [[0.5, 0.5], [0.3, 0.7]])
    assert np.all(np.isfinite(v)) and v[0] > v[1]


@pytest.mark.parametrize("n", [2, 3, 4])
def test_haar_at_barycenter(n):
    assert haar_density(np.full(n, 1.0 / n)) == pytest.approx(n ** n)


def test_ent0_split_and_quadrature():
    g = discretize_simplex(SimplexDescriptor("uniform-box", {"bounds": [[0.3, 0.7]]}), 4000)
    ent, loghaar = ent0_split(g)
    assert ent0(g) == pytest.approx(ent - loghaar, abs=1e-10)
    direct = -math.log(0.4) + quad(lambda x: math.log(x * (1 - x)), 0.3, 0.7)[0] / 0.4
    assert ent0(g) == pytest.approx(direct, abs=1e-6)


def test_stirling_ratio():
    assert 0.99 <= stirling_ratio(1e3, 3) <= 1.01
    assert 0.999 <= stirling_ratio(1e4, 2) <= 1.001
    for n in (2, 3, 5):
        dev = [abs(stirling_ratio(lam, n) - 1) for lam in (10, 1e2, 1e3, 1e4)]
        assert np.all(np.diff(dev) < 0)
    with pytest.raises(ValueError):
        stirling_ratio(0, 2)


def test_kernel_integrates_to_one():
    m = 100_000
    x = (np.arange(m) + 0.5) / m
    q = chart_to_simplex(x[:, None])
    for p in ([0.5, 0.5], [0.3, 0.7]):
        assert dirichlet_kernel(0.05, p, q).sum() / m == pytest.approx(1.0, abs=1e-3)


def test_kernel_n3_integrates_to_one():
    m = 600
    x = (np.arange(m) + 0.5) / m
    X = np.stack(np.meshgrid(x, x, indexing="ij"), -1).reshape(-1, 2)
    X = X[X.sum(1) < 1 - 1e-12]
    assert dirichlet_kernel(0.1, [0.3, 0.3, 0.4], chart_to_simplex(X)).sum() / m**2 == pytest.approx(1, abs=2e-3)


def test_kernel_small_h_limit():
    p, q = np.array([0.3, 0.7]), np.array([0.5, 0.5])
    c = dirichlet_cost(p, q)
    resid = [abs(-h * log_dirichlet_kernel(h, p, q) - c) for h in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)]
    assert np.all(np.diff(resid) < 0) and resid[-1] < 1e-4
    # the normalizer accounts for the h log h part of the residual
    h = 1e-4
    norm = -h * (log_kernel_constant(h, 2) - np.log(q).sum())
    assert -h * log_dirichlet_kernel(h, p, q) - norm == pytest.approx(c, abs=1e-12)


def test_kernel_group_symmetry(rng):
    p, q, a = (random_simplex(rng, 50, 3) for _ in range(3))
    h = 0.1
    lhs = log_dirichlet_kernel(h, p, q) - np.log(haar_density(q))
    rhs = log_dirichlet_kernel(h, simplex_mul(p, a), simplex_mul(q, a)) - np.log(haar_density(simplex_mul(q, a)))
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_portfolio_maps(rng):
    r = random_simplex(rng, 100, 4)
    assert np.allclose(portfolio_map(geometric_mean_fn(), r), 0.25, atol=1e-14)
    assert np.allclose(portfolio_map(zero_fn(), r), r)
    pi = portfolio_map(diversity_fn(0.5), r)
    assert np.allclose(pi.sum(1), 1, atol=1e-14) and np.all(pi >= 0)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(portfolio_map(geometric_mean_fn(w), r), w, atol=1e-14)


def test_l_divergence(rng):
    r, q = random_simplex(rng, 200, 3), random_simplex(rng, 200, 3)
    gm = geometric_mean_fn()
    assert np.allclose(l_divergence(gm, r, r), 0, atol=1e-15)
    assert np.allclose(l_divergence(gm, r, q), dirichlet_cost(q, r), atol=1e-12)
    assert np.all(l_divergence(diversity_fn(0.3), r, q) >= -1e-12)
    assert np.all(is_exp_concave_midpoint(diversity_fn(0.3), r, q))


def test_l_matrix_cases(rng):
    gm = geometric_mean_fn()
    e = np.array([0.5, 0.5])
    Lr = l_matrix_reduced(gm, e)
    assert Lr[0, 0] == pytest.approx(4.0, abs=1e-4)
    d = 1e-3
    second = (l_divergence(gm, e + [d, -d], e) + l_divergence(gm, e - [d, -d], e)) / d**2
    assert Lr[0, 0] == pytest.approx(second, abs=1e-4)
    assert np.allclose(l_matrix(zero_fn(), [0.2, 0.3, 0.5]), 0)
    for q in random_simplex(rng, 50, 3):
        if q.min() < 0.05:
            continue
        for phi in (gm, diversity_fn(0.5)):
            assert np.linalg.eigvalsh(l_matrix_reduced(phi, q)).min() >= -1e-8
            S = np.vstack([np.eye(2), -np.ones((1, 2))])
            assert np.allclose(S.T @ l_matrix(phi, q) @ S, l_matrix_reduced(phi, q), atol=1e-4)


def test_l_matrix_reduced_rejects_indefinite():
    from entropic_gap.dirichlet import ExpConcaveFn
    bad = ExpConcaveFn("convex", lambda p: (p ** 2).sum(-1) * 10, lambda p: 20 * p)
    with pytest.raises(ValueError):
        l_matrix_reduced(bad, [0.3, 0.3, 0.4])


def test_haar_invariance_jacobians(rng):
    p = random_simplex(rng, 200, 3)
    p = p[p.min(1) > 0.02]
    a = random_simplex(rng, 1, 3)[0]
    q = simplex_mul(p, a)
    assert np.allclose(haar_density(q) * translate_jacobian(p, a) / haar_density(p), 1, atol=1e-8)
    assert np.allclose(haar_density(simplex_inv(p)) * inverse_jacobian(p) / haar_density(p), 1, atol=1e-8)


def test_ent0_translation_and_inversion_invariance():
    base = {"kind": "logistic-normal", "mean": [0.5], "var": 0.2, "theta_bounds": [[-1.0, 2.0]]}
    d0 = SimplexDescriptor.from_dict(base)
    d1 = SimplexDescriptor.from_dict({"kind": "exp-affine", "shift": [0.7, 0.3], "base": base})
    # Theta(p^-1) = -Theta(p)
    dinv = SimplexDescriptor("logistic-normal", {"mean": [-0.5], "var": 0.2, "theta_bounds": [[-2.0, 1.0]]})
    e = [ent0(discretize_simplex(d, 4000)) for d in (d0, d1, dinv)]
    assert e[1] == pytest.approx(e[0], abs=1e-4)
    assert e[2] == pytest.approx(e[0], abs=1e-4)


def test_descriptor_validation_and_min_coord():
    with pytest.raises(ValueError):
        SimplexDescriptor("uniform-box", {"bounds": [[0.0, 0.5]]})
    with pytest.raises(ValueError):
        SimplexDescriptor("dirichlet", {"alpha": [1, -1], "bounds": [[0.1, 0.5]]})
    with pytest.raises(ValueError):
        SimplexDescriptor("wishart", {})
    d = SimplexDescriptor("uniform-box", {"bounds": [[0.1, 0.9], [0.1, 0.9]], "min_coord": 0.1})
    pts = discretize_simplex(d, 40)
    assert pts.points[pts.support].min() >= 0.1
    with pytest.raises(ValueError):
        discretize_simplex(SimplexDescriptor("uniform-box", {"bounds": [[0.1, 0.9], [0.1, 0.9]]}), 40)


def test_sweep_identity_n2():
    d = SimplexDescriptor("logistic-normal", {"mean": [0.0], "var": 0.25, "theta_bounds": [[-1.5, 1.5]]})
    s = theorem2_sweep(d, d, [0.02, 0.01, 0.005, 0.0025])
    gaps = [r.gap for r in s.rows]
    assert np.all(np.diff(np.abs(gaps)) < 0) and abs(gaps[-1]) < 0.01
    assert s.predicted_limit == 0.0
    assert s.extrapolated_limit == pytest.approx(0.0, abs=0.01)


def test_sweep_uniform_translate_n2():
    d0 = SimplexDescriptor("uniform-box", {"bounds": [[0.3, 0.7]]})
    d1 = SimplexDescriptor("exp-affine", {"shift": [0.6, 0.4], "base": d0})
    s = theorem2_sweep(d0, d1, [0.02, 0.01, 0.005, 0.0025, 0.00125])
    # translation preserves Ent_0, so the limit is 0; quadrature of both sides agrees
    direct = -math.log(0.4) + quad(lambda x: math.log(x * (1 - x)), 0.3, 0.7)[0] / 0.4
    assert s.meta["ent0_rho0"] == pytest.approx(direct, abs=1e-5)
    assert s.meta["ent0_rho1"] == pytest.approx(direct, abs=1e-5)
    assert cauchy_spread([r.gap for r in s.rows]) <= 0.05
    assert s.extrapolated_limit == pytest.approx(0.0, abs=0.05)
    assert s.meta["n"] == [2] * 5
    assert s.meta["multiplier"][0] == pytest.approx(49.0)


@pytest.fixture(scope="module")
def n3_sweep():
    cfg = load_config(Path(__file__).parents[1] / "configs" / "dirichlet_n3.cfg")
    return theorem2_sweep(cfg.density0, cfg.density1, cfg.h_list, rule=cfg.rule,
                          max_resolution=cfg.max_resolution)


def test_sweep_n3_completes(n3_sweep):
    assert len(n3_sweep.ok_rows()) == 3
    assert n3_sweep.meta["capped_h"] == [0.04, 0.02, 0.01]
    assert abs(n3_sweep.predicted_limit) < 1e-3


@pytest.mark.xfail(strict=True, reason="30x30 chart grids under-resolve the n = 3 kernel below h ~ 0.04; "
                                       "the gap drifts by about 0.08 per halving")
def test_sweep_n3_cauchy(n3_sweep):
    assert cauchy_spread([r.gap for r in n3_sweep.rows]) <= 0.05


def test_sweep_validation():
    d = SimplexDescriptor("uniform-box", {"bounds": [[0.2, 0.3]] * 3})
    with pytest.raises(ValueError, match="not supported"):
        theorem2_sweep(d, d, [0.1])
    d2 = SimplexDescriptor("uniform-box", {"bounds": [[0.3, 0.7]]})
    with pytest.raises(ValueError):
        theorem2_sweep(d2, d2, [0.01, 0.02])


def test_sweep_failed_row_is_reported():
    d = SimplexDescriptor("uniform-box", {"bounds": [[0.3, 0.7]]})
    s = theorem2_sweep(d, d, [0.02, 0.01], max_iter=2)
    assert all(r.error for r in s.rows) and all(math.isnan(r.gap) for r in s.rows)
