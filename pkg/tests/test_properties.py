"""Randomized property suites, 1000 examples each."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entropic_gap.costs import builtin_cost, taylor_remainder
from entropic_gap.density_grid import GridDensity, regular_grid
from entropic_gap.dirichlet import (diversity_fn, dirichlet_cost, geometric_mean_fn, l_divergence,
                                    portfolio_map, simplex_inv, simplex_mul)
from entropic_gap.exact import c_divergence, solve_exact, solve_transport

N = 1000
TOL = 1e-8

coord = st.floats(1e-3, 1.0, allow_nan=False)


@st.composite
def simplex_points(draw, n=None, count=1):
    n = draw(st.integers(2, 6)) if n is None else n
    pts = [np.array(draw(st.lists(coord, min_size=n, max_size=n))) for _ in range(count)]
    return [p / p.sum() for p in pts]


@settings(max_examples=N)
@given(simplex_points(count=3))
def test_group_axioms(pts):
    p, q, r = pts
    e = np.full(len(p), 1.0 / len(p))
    assert np.allclose(simplex_mul(p, e), p, atol=TOL, rtol=0)
    assert np.allclose(simplex_mul(p, simplex_inv(p)), e, atol=TOL, rtol=0)
    assert np.allclose(simplex_mul(simplex_mul(p, q), r), simplex_mul(p, simplex_mul(q, r)), atol=TOL, rtol=0)
    assert np.allclose(simplex_mul(p, q), simplex_mul(q, p), atol=TOL, rtol=0)


@settings(max_examples=N)
@given(simplex_points(count=2))
def test_cost_inverse_symmetry(pts):
    p, q = pts
    assert abs(dirichlet_cost(p, q) - dirichlet_cost(simplex_inv(q), simplex_inv(p))) <= TOL
    assert dirichlet_cost(p, q) >= -TOL


phis = st.one_of(
    st.just(geometric_mean_fn()),
    st.floats(0.05, 0.95).map(diversity_fn),
)


@settings(max_examples=N)
@given(simplex_points(n=4, count=3), phis)
def test_l_divergence_nonnegative(pts, phi):
    r, q, w = pts
    assert l_divergence(phi, r, q) >= -TOL
    assert l_divergence(geometric_mean_fn(w), r, q) >= -TOL


@settings(max_examples=N)
@given(simplex_points(n=4, count=2), phis)
def test_portfolio_map_in_closed_simplex(pts, phi):
    r, w = pts
    for f in (phi, geometric_mean_fn(w)):
        pi = portfolio_map(f, r)
        assert pi.min() >= -TOL and abs(pi.sum() - 1) <= TOL


masses = arrays(float, st.integers(1, 7), elements=st.floats(0.0, 1.0)).filter(lambda a: a.sum() > 1e-3)


@settings(max_examples=N)
@given(masses, masses, st.data())
def test_dual_feasibility_and_slackness(a, b, data):
    a, b = a / a.sum(), b / b.sum()
    C = data.draw(arrays(float, (len(a), len(b)), elements=st.floats(0.0, 10.0)))
    plan, duals = solve_exact(a, b, C)
    slack = C - duals.psi[:, None] - duals.psi_star[None, :]
    assert slack.min() >= -TOL
    assert np.all(np.abs(slack[plan.matrix > 1e-12]) <= TOL)
    assert plan.marginal_residual() <= TOL
    assert abs(plan.objective - (a @ duals.psi + b @ duals.psi_star)) <= TOL


@settings(max_examples=N)
@given(arrays(float, 12, elements=st.floats(0.0, 1.0)), arrays(float, 15, elements=st.floats(0.0, 1.0)),
       st.sampled_from(["scaled-quadratic", "cosh-sum"]), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_c_divergence_nonnegative(v0, v1, kind, s, y):
    if v0.sum() < 1e-3 or v1.sum() < 1e-3:
        return
    grids = []
    for v, box in ((v0, [[0.0, 1.0]]), (v1, [[0.0, 1.5]])):
        nodes, vol, shape = regular_grid(np.array(box), len(v))
        grids.append(GridDensity(nodes, vol, v, shape, tuple(map(tuple, box))).normalized())
    sol = solve_transport(grids[0], grids[1], builtin_cost(kind))
    D = sol.C.entries - sol.duals.psi[:, None] - sol.duals.psi_star[None, :]
    supp = np.ix_(grids[0].support, grids[1].support)
    assert D[supp].min() >= -TOL
    i = np.flatnonzero(grids[0].support)[int(s * (grids[0].support.sum() - 1))]
    assert c_divergence(sol, i, [[1.5 * y]])[0] >= -TOL


@settings(max_examples=N)
@given(arrays(float, 3, elements=st.floats(-1, 1)).filter(lambda z: np.linalg.norm(z) > 1e-3),
       st.floats(1e-4, 1.0))
def test_cost_quadratic_expansion(direction, t):
    z = t * direction / np.linalg.norm(direction)
    assert abs(taylor_remainder(builtin_cost("scaled-quadratic", 3), z)) <= TOL * t**2
    # Lagrange form: cosh x - 1 - x^2/2 <= x^4 cosh(x) / 24
    r = taylor_remainder(builtin_cost("cosh-sum", 3), z)
    assert -TOL * t**2 <= r <= t**4 * np.cosh(t) / 24 + TOL * t**2
    assert r / t**2 <= t**2 * np.cosh(t) / 24 + TOL


@settings(max_examples=N)
@given(simplex_points(n=4, count=2), arrays(float, 4, elements=st.floats(-1, 1)))
def test_l_divergence_quadratic_expansion(pts, d):
    q, w = pts
    d = d - d.mean()
    if np.linalg.norm(d) < 1e-3 or q.min() < 0.02:
        return
    d /= np.linalg.norm(d)
    phi = geometric_mean_fn(w)
    # L(q) = diag(w/q^2) - (w/q)(w/q)^T for phi = sum w_i log p_i
    g = w / q
    L = np.diag(w / q**2) - np.outer(g, g)

    for eps in (1e-2, 1e-3, 1e-4):
        eps *= q.min()
        rem = abs(l_divergence(phi, q + eps * d, q) - 0.5 * eps**2 * d @ L @ d)
        # log(1+s) = s - s^2/2 + R with |R| <= |s|^3 / (3 (1-|s|)^3), applied to
        # s = w.u and to each u_i = eps d_i / q_i
        m = np.abs(eps * d / q).max()
        bound = 2 * m**3 / (3 * (1 - m) ** 3)
        # so rem / eps^2 = O(eps), up to a rounding floor of 1e-15
        assert rem <= bound + 1e-15
