"""Dirichlet transport on the open simplex.

Points of the simplex are arrays whose last axis has length n.  Densities
live on the chart of the first n-1 coordinates with Lebesgue measure, so a
density on the simplex is a :class:`GridDensity` over that chart whose
support avoids the boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .density_grid import GridDensity, entropy, regular_grid
from .entropic import ConvergenceError, GapRow, GapSweep, ResolutionRule, extrapolate_limit, sinkhorn_log
from .exact import SolverError, solve_exact

log = logging.getLogger(__name__)

SUPPORTED_N = (2, 3)


def _as_simplex(p) -> np.ndarray:
    p = np.asarray(p, float)
    if p.shape[-1] < 2:
        raise ValueError("simplex points need at least two coordinates")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError("simplex coordinates must be positive and finite")
    return p / p.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SimplexPoint:
    """A point of the open simplex; coordinates are renormalized on construction."""

    coords: np.ndarray

    def __post_init__(self):
        c = _as_simplex(self.coords)
        if c.ndim != 1:
            raise ValueError("a SimplexPoint holds a single point")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return len(self.coords)

    @classmethod
    def barycenter(cls, n: int) -> "SimplexPoint":
        return cls(np.full(n, 1.0 / n))

    def __matmul__(self, other: "SimplexPoint") -> "SimplexPoint":
        return SimplexPoint(simplex_mul(self.coords, other.coords))

    def inverse(self) -> "SimplexPoint":
        return SimplexPoint(simplex_inv(self.coords))


def _coords(p):
    return p.coords if isinstance(p, SimplexPoint) else np.asarray(p, float)


# group structure

def simplex_mul(p, q) -> np.ndarray:
    """(p . q)_i = p_i q_i / sum_j p_j q_j, broadcasting over leading axes."""
    pq = _coords(p) * _coords(q)
    return pq / pq.sum(axis=-1, keepdims=True)


def simplex_inv(p) -> np.ndarray:
    r = 1.0 / _coords(p)
    return r / r.sum(axis=-1, keepdims=True)


def dirichlet_cost(p, q) -> np.ndarray:
    """c(p, q) = log(mean(q / p)) - mean(log(q / p))."""
    lr = np.log(_coords(q)) - np.log(_coords(p))
    n = lr.shape[-1]
    return logsumexp(lr, axis=-1) - math.log(n) - lr.mean(axis=-1)


def discrete_relative_entropy(p, q) -> np.ndarray:
    p, q = _coords(p), _coords(q)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


# exponential coordinates

def exp_coords(p) -> np.ndarray:
    p = _coords(p)
    return np.log(p[..., :-1]) - np.log(p[..., -1:])


def exp_coords_inv(theta) -> np.ndarray:
    theta = np.asarray(theta, float)
    full = np.concatenate([theta, np.zeros(theta.shape[:-1] + (1,))], axis=-1)
    return np.exp(full - logsumexp(full, axis=-1, keepdims=True))


def cost_in_coords(theta, rho) -> np.ndarray:
    """g(theta - rho) with g(z) = log(1/n + (1/n) sum exp(-z_i)) + (1/n) sum z_i."""
    z = np.asarray(theta, float) - np.asarray(rho, float)
    n = z.shape[-1] + 1
    full = np.concatenate([-z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    return logsumexp(full, axis=-1) - math.log(n) + z.sum(axis=-1) / n


def chart_to_simplex(x) -> np.ndarray:
    """(p_1..p_{n-1}) -> (p_1..p_n)."""
    x = np.asarray(x, float)
    return np.concatenate([x, 1.0 - x.sum(axis=-1, keepdims=True)], axis=-1)


def cost_chart_hessian(p) -> np.ndarray:
    """Hessian of q -> c(p, q) at q = p in the chart of the first n-1 coordinates."""
    p = _coords(p)
    n = p.shape[-1]
    ip = 1.0 / p
    H = (np.einsum("...i,ij->...ij", ip ** 2, np.eye(n)) - np.einsum("...i,...j->...ij", ip, ip) / n) / n
    S = _reduction(n)
    return np.einsum("ai,...ab,bj->...ij", S, H, S)


def _reduction(n: int) -> np.ndarray:
    return np.vstack([np.eye(n - 1), -np.ones((1, n - 1))])


# densities and kernels

def log_diri_density(lam: float, p) -> np.ndarray:
    """log of the symmetric Dirichlet(lam/n, ..., lam/n) density in the chart."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    p = _coords(p)
    n = p.shape[-1]
    return gammaln(lam) - n * gammaln(lam / n) + (lam / n - 1.0) * np.log(p).sum(axis=-1)


def diri_density(lam: float, p) -> np.ndarray:
    return np.exp(log_diri_density(lam, p))


def haar_density(p) -> np.ndarray:
    """nu0(p) = prod 1/p_i."""
    return 1.0 / np.prod(_coords(p), axis=-1)


def log_stirling_ratio(lam: float, n: int) -> float:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    exact = gammaln(lam) - lam * math.log(n) - n * gammaln(lam / n)
    approx = -0.5 * n * math.log(n) + 0.5 * (n - 1) * math.log(lam / (2 * math.pi))
    return float(exact - approx)


def stirling_ratio(lam: float, n: int) -> float:
    """Gamma(lam) n^-lam / Gamma(lam/n)^n divided by its Stirling approximation."""
    return math.exp(log_stirling_ratio(lam, n))


def log_kernel_constant(h: float, n: int) -> float:
    """log[Gamma(1/h) n^(-1/h) / Gamma(1/(nh))^n]."""
    lam = 1.0 / h
    return float(gammaln(lam) - lam * math.log(n) - n * gammaln(lam / n))


def log_dirichlet_kernel(h: float, p, q) -> np.ndarray:
    """log f_h(p, q), the chart density at q of p . G with G ~ Dirichlet(1/h)."""
    if h <= 0:
        raise ValueError("h must be positive")
    q = _coords(q)
    n = q.shape[-1]
    return log_kernel_constant(h, n) - np.log(q).sum(axis=-1) - dirichlet_cost(p, q) / h


def dirichlet_kernel(h: float, p, q) -> np.ndarray:
    return np.exp(log_dirichlet_kernel(h, p, q))


# exponentially concave functions and the L-divergence

@dataclass(frozen=True)
class ExpConcaveFn:
    """phi on the simplex with exp(phi) concave, and its gradient in R^n."""

    name: str
    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)

    def __call__(self, p):
        return self.evaluate(_coords(p))


def geometric_mean_fn(weights=None) -> ExpConcaveFn:
    """phi(p) = sum w_i log p_i with w in the closed simplex (equal weights by default)."""
    def ev(p):
        w = np.full(p.shape[-1], 1.0 / p.shape[-1]) if weights is None else np.asarray(weights, float)
        return np.log(p) @ w

    def gr(p):
        w = np.full(p.shape[-1], 1.0 / p.shape[-1]) if weights is None else np.asarray(weights, float)
        return w / p

    return ExpConcaveFn("geometric-mean", ev, gr, {"weights": weights})


def zero_fn() -> ExpConcaveFn:
    return ExpConcaveFn("zero", lambda p: np.zeros(p.shape[:-1]), lambda p: np.zeros(p.shape))


def diversity_fn(r: float) -> ExpConcaveFn:
    """phi(p) = (1/r) log sum p_i^r, exponentially concave for 0 < r < 1."""
    if not 0 < r < 1:
        raise ValueError("diversity exponent must lie in (0, 1)")

    def ev(p):
        return np.log(np.sum(p ** r, axis=-1)) / r

    def gr(p):
        return p ** (r - 1) / np.sum(p ** r, axis=-1, keepdims=True)

    return ExpConcaveFn("diversity", ev, gr, {"r": r})


def portfolio_map(phi: ExpConcaveFn, r) -> np.ndarray:
    """pi_i(r) = r_i (1 + <grad phi(r), e_i - r>)."""
    r = _coords(r)
    g = phi.gradient(r)
    return r * (1.0 + g - np.sum(g * r, axis=-1, keepdims=True))


def l_divergence(phi: ExpConcaveFn, r, q) -> np.ndarray:
    """L[r | q] = log(sum pi_i(q) r_i / q_i) - (phi(r) - phi(q))."""
    r, q = _coords(r), _coords(q)
    pi = portfolio_map(phi, q)
    return np.log(np.sum(pi * r / q, axis=-1)) - (phi(r) - phi(q))


def _chart_fn(phi: ExpConcaveFn, x):
    return phi(chart_to_simplex(x))


def l_matrix(phi: ExpConcaveFn, q, step: float = 1e-4) -> np.ndarray:
    """L(q) = -(Hess phi + grad phi grad phi^T), n x n, by central differences of the gradient."""
    q = _coords(q)
    n = len(q)
    g0 = phi.gradient(q)
    Hs = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        Hs[:, k] = (phi.gradient(q + e) - phi.gradient(q - e)) / (2 * step)
    L = -(0.5 * (Hs + Hs.T) + np.outer(g0, g0))
    return L


def l_matrix_reduced(phi: ExpConcaveFn, q, step: float = 1e-4, tol: float = 1e-8) -> np.ndarray:
    """S^T L(q) S in the chart, from second differences of phi there.

    Raises ValueError if the result has an eigenvalue below ``-tol``.
    """
    q = _coords(q)
    n = len(q)
    x0 = q[:-1]
    d = n - 1
    f0 = _chart_fn(phi, x0)
    E = np.eye(d) * step
    Hc = np.empty((d, d))
    for k in range(d):
        Hc[k, k] = (_chart_fn(phi, x0 + E[k]) - 2 * f0 + _chart_fn(phi, x0 - E[k])) / step ** 2
        for l in range(k):
            Hc[k, l] = Hc[l, k] = (_chart_fn(phi, x0 + E[k] + E[l]) - _chart_fn(phi, x0 + E[k] - E[l])
                                   - _chart_fn(phi, x0 - E[k] + E[l])
                                   + _chart_fn(phi, x0 - E[k] - E[l])) / (4 * step ** 2)
    S = _reduction(n)
    gc = S.T @ phi.gradient(q)
    L = -(Hc + np.outer(gc, gc))
    if np.linalg.eigvalsh(L).min() < -tol:
        raise ValueError("reduced L-matrix is not positive semidefinite")
    return L


def is_exp_concave_midpoint(phi: ExpConcaveFn, p, q, tol: float = 1e-9) -> np.ndarray:
    """exp(phi((p+q)/2)) >= (exp(phi(p)) + exp(phi(q)))/2 - tol."""
    p, q = _coords(p), _coords(q)
    return np.exp(phi(0.5 * (p + q))) >= 0.5 * (np.exp(phi(p)) + np.exp(phi(q))) - tol


# grids and test densities on the chart

@dataclass(frozen=True)
class SimplexDescriptor:
    """Recipe for a density on the simplex, expressed in the chart.

    kinds:

    * ``uniform-box``: ``bounds`` over the first n-1 coordinates, ``n``
    * ``dirichlet``: ``alpha`` (n positive reals) truncated to ``bounds``
    * ``logistic-normal``: Theta(p) ~ N(``mean``, ``var`` I) truncated to
      ``theta_bounds`` (a box in exponential coordinates)
    * ``exp-affine``: the pushforward of ``base`` by Theta(q) = k Theta(p) + Theta(a)
      (``scale`` k > 0, ``shift`` a); k = 1 is the translation q = p . a

    The two box kinds also accept ``min_coord``, a floor applied to all n
    coordinates.
    """

    kind: str
    params: dict = field(default_factory=dict)

    KINDS = ("uniform-box", "dirichlet", "logistic-normal", "exp-affine")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown simplex density kind {self.kind!r}")
        p = self.params
        if self.kind == "exp-affine":
            if float(p.get("scale", 1.0)) <= 0:
                raise ValueError("exp-affine scale must be positive")
            _as_simplex(p["shift"])
        elif self.kind == "logistic-normal":
            tb = np.asarray(p["theta_bounds"], float).reshape(-1, 2)
            if np.any(tb[:, 1] <= tb[:, 0]) or np.any(np.asarray(p["var"], float) <= 0):
                raise ValueError("logistic-normal needs a nondegenerate box and positive variance")
        else:
            b = np.asarray(p["bounds"], float).reshape(-1, 2)
            if np.any(b[:, 0] <= 0) or np.any(b[:, 1] <= b[:, 0]) or b[:, 0].sum() >= 1:
                raise ValueError("chart bounds must be a nondegenerate box meeting the open simplex")
            if self.kind == "dirichlet" and np.any(np.asarray(p["alpha"], float) <= 0):
                raise ValueError("Dirichlet parameters must be positive")

    @classmethod
    def from_dict(cls, spec: dict) -> "SimplexDescriptor":
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "exp-affine" and not isinstance(spec["base"], SimplexDescriptor):
            spec["base"] = cls.from_dict(spec["base"])
        return cls(kind, spec)

    @property
    def n(self) -> int:
        p = self.params
        if self.kind == "exp-affine":
            return p["base"].n
        if self.kind == "dirichlet":
            return len(p["alpha"])
        if self.kind == "logistic-normal":
            return len(np.asarray(p["theta_bounds"]).reshape(-1, 2)) + 1
        return len(np.asarray(p["bounds"]).reshape(-1, 2)) + 1

    def _map(self, p):
        k = float(self.params.get("scale", 1.0))
        return exp_coords_inv(k * exp_coords(p) + exp_coords(self.params["shift"]))

    def _inverse_map(self, q):
        k = float(self.params.get("scale", 1.0))
        return exp_coords_inv((exp_coords(q) - exp_coords(self.params["shift"])) / k)

    def support_box(self) -> np.ndarray:
        """Bounding box of the support in the chart."""
        if self.kind in ("uniform-box", "dirichlet"):
            return np.asarray(self.params["bounds"], float).reshape(-1, 2)
        if self.kind == "logistic-normal":
            tb = np.asarray(self.params["theta_bounds"], float).reshape(-1, 2)
            return _image_box(tb, exp_coords_inv)
        base = self.params["base"].support_box()
        return _image_box(base, lambda x: self._map(chart_to_simplex(x)), chart=True)

    def __call__(self, x) -> np.ndarray:
        """Unnormalized chart density at chart points ``x`` of shape (N, n-1)."""
        x = np.atleast_2d(np.asarray(x, float))
        full = chart_to_simplex(x)
        inside = np.all(full > 0, axis=1)
        out = np.zeros(len(x))
        p = self.params
        if self.kind == "exp-affine":
            k = float(p.get("scale", 1.0))
            q = full[inside]
            pre = self._inverse_map(q)
            # chart Jacobian of the map is k^(n-1) nu0(q) / nu0(p)
            out[inside] = p["base"](pre[:, :-1]) * haar_density(q) / (haar_density(pre) * k ** (self.n - 1))
            return out
        b = self.support_box()
        inside &= np.all((x >= b[:, 0]) & (x <= b[:, 1]), axis=1)
        inside &= np.all(full >= float(p.get("min_coord", 0.0)), axis=1)
        if self.kind == "logistic-normal":
            th = exp_coords(full[inside])
            tb = np.asarray(p["theta_bounds"], float).reshape(-1, 2)
            keep = np.all((th >= tb[:, 0]) & (th <= tb[:, 1]), axis=1)
            mean = np.broadcast_to(np.asarray(p["mean"], float), (self.n - 1,))
            # chart density = theta density times nu0, since d theta = nu0 dp~
            dens = np.exp(-0.5 * ((th - mean) ** 2).sum(axis=1) / float(p["var"])) * haar_density(full[inside])
            out[inside] = np.where(keep, dens, 0.0)
            return out
        if self.kind == "uniform-box":
            out[inside] = 1.0
        else:
            alpha = np.asarray(p["alpha"], float)
            out[inside] = np.exp(np.log(full[inside]) @ (alpha - 1.0))
        return out


def _image_box(box, fmap, chart=False) -> np.ndarray:
    """Chart bounding box of the image of ``box`` under ``fmap`` (monotone for n = 2)."""
    d = len(box)
    # the image of a box is not a box for n > 2: bound it from a dense sample
    axes = [np.linspace(lo, hi, 65 if d == 1 else 41) for lo, hi in box]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    if chart:
        mesh = mesh[np.all(chart_to_simplex(mesh) > 0, axis=1)]
    img = fmap(mesh)[:, :-1]
    lo, hi = img.min(0), img.max(0)
    pad = 1e-9 if d == 1 else 0.02 * (hi - lo)
    return np.stack([lo - pad, hi + pad], axis=1)


@dataclass(frozen=True)
class SimplexGrid:
    """A density on the chart grid of the first n-1 coordinates."""

    n: int
    density: GridDensity

    def __post_init__(self):
        if self.density.dim != self.n - 1:
            raise ValueError("chart dimension must be n - 1")
        pts = self.points[self.density.support]
        margin = float(self.density.spacing.max())
        if np.any(pts <= margin):
            raise ValueError("support must stay at least one cell inside the open simplex")

    @property
    def nodes(self) -> np.ndarray:
        return self.density.nodes

    @property
    def points(self) -> np.ndarray:
        return chart_to_simplex(self.density.nodes)

    @property
    def volumes(self) -> np.ndarray:
        return self.density.volumes

    @property
    def values(self) -> np.ndarray:
        return self.density.values

    @property
    def masses(self) -> np.ndarray:
        return self.density.masses

    @property
    def support(self) -> np.ndarray:
        return self.density.support


def discretize_simplex(desc: SimplexDescriptor, resolution, box=None) -> SimplexGrid:
    box = desc.support_box() if box is None else np.asarray(box, float).reshape(-1, 2)
    nodes, volumes, shape = regular_grid(box, resolution)
    vals = desc(nodes)
    if vals.sum() <= 0:
        raise ValueError("density has no mass on the grid")
    dens = GridDensity(nodes, volumes, vals, shape, tuple(map(tuple, box))).normalized()
    return SimplexGrid(desc.n, dens)


def log_haar_grid(grid: SimplexGrid) -> np.ndarray:
    out = np.full(len(grid.values), -np.inf)
    supp = grid.support
    out[supp] = -np.log(grid.points[supp]).sum(axis=1)
    return out


def ent0(grid: SimplexGrid) -> float:
    """Ent_0(rho) = sum rho log(rho / nu0) v over the chart grid."""
    supp = grid.support
    v = grid.values[supp]
    return float(np.sum(v * (np.log(v) - log_haar_grid(grid)[supp]) * grid.volumes[supp]))


def ent0_split(grid: SimplexGrid) -> tuple[float, float]:
    """(Ent(rho), sum rho log nu0 v); their difference is Ent_0(rho)."""
    supp = grid.support
    return entropy(grid.density), float(np.sum(grid.values[supp] * log_haar_grid(grid)[supp]
                                                * grid.volumes[supp]))


def translate_jacobian(p, a) -> np.ndarray:
    """|d(p . a)~ / d p~| in the chart, by central differences."""
    p = _coords(p)
    n = p.shape[-1]
    step = 1e-6
    x = p[..., :-1]
    J = np.empty(p.shape[:-1] + (n - 1, n - 1))
    for k in range(n - 1):
        e = np.zeros(n - 1)
        e[k] = step
        fp = simplex_mul(chart_to_simplex(x + e), a)[..., :-1]
        fm = simplex_mul(chart_to_simplex(x - e), a)[..., :-1]
        J[..., :, k] = (fp - fm) / (2 * step)
    return np.abs(np.linalg.det(J))


def inverse_jacobian(p) -> np.ndarray:
    """|d(p^-1)~ / d p~| in the chart, by central differences."""
    p = _coords(p)
    n = p.shape[-1]
    step = 1e-6
    x = p[..., :-1]
    J = np.empty(p.shape[:-1] + (n - 1, n - 1))
    for k in range(n - 1):
        e = np.zeros(n - 1)
        e[k] = step
        J[..., :, k] = (simplex_inv(chart_to_simplex(x + e))[..., :-1]
                        - simplex_inv(chart_to_simplex(x - e))[..., :-1]) / (2 * step)
    return np.abs(np.linalg.det(J))


# h-sweeps on the simplex

def chart_resolution(desc: SimplexDescriptor, h: float, rule: ResolutionRule) -> np.ndarray:
    """Cells no wider than the narrowest kernel width sqrt(h / lambda_max) over the support, / rule factor.

    lambda_max is the top eigenvalue of the chart Hessian of c(p, .) at p.
    """
    box = desc.support_box()
    axes = [np.linspace(lo, hi, 33) for lo, hi in box]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    mesh = mesh[desc(mesh) > 0]
    if len(mesh) == 0:
        raise ValueError("descriptor has no support on its bounding box")
    lam = np.linalg.eigvalsh(cost_chart_hessian(chart_to_simplex(mesh)))[:, -1].max()
    cell = math.sqrt(h / lam) / rule.cells_per_sqrt_h
    width = box[:, 1] - box[:, 0]
    return np.maximum(np.ceil(width / cell - 1e-9).astype(int), rule.min_resolution)


def dirichlet_kh(rho0: SimplexGrid, rho1: SimplexGrid, h: float, tol: float = 1e-9,
                 max_iter: int = 100_000):
    """K_h = min H(nu | rho0 f_h) over couplings on the grids; returns (K_h, iterations)."""
    r, c = np.flatnonzero(rho0.support), np.flatnonzero(rho1.support)
    a = rho0.masses[r] / rho0.masses[r].sum()
    b = rho1.masses[c] / rho1.masses[c].sum()
    P0, Q1 = rho0.points[r], rho1.points[c]
    logf = log_dirichlet_kernel(h, P0[:, None, :], Q1[None, :, :])
    # mu_h cell masses a_i f_h(p_i, q_j) w_j
    log_mu = np.log(a)[:, None] + logf + np.log(rho1.volumes[c])[None, :]
    f, g, it, res, _ = sinkhorn_log(np.log(a), np.log(b), log_mu, tol, max_iter)
    if res > tol:
        raise ConvergenceError(f"sinkhorn at h={h:g}: residual {res:.3e} after {it} iterations", res)
    # plan = a_i b_j-scaled kernel; f and g absorb the row and column factors
    P = np.exp(f[:, None] + log_mu + g[None, :])
    pos = P > 0
    kh = float(np.sum(P[pos] * (np.log(P[pos]) - log_mu[pos])))
    return kh, it


def dirichlet_exact_cost(rho0: SimplexGrid, rho1: SimplexGrid) -> float:
    r, c = np.flatnonzero(rho0.support), np.flatnonzero(rho1.support)
    a = rho0.masses[r] / rho0.masses[r].sum()
    b = rho1.masses[c] / rho1.masses[c].sum()
    C = dirichlet_cost(rho0.points[r][:, None, :], rho1.points[c][None, :, :])
    plan, _ = solve_exact(a, b, C)
    return plan.objective


def theorem2_sweep(desc0: SimplexDescriptor, desc1: SimplexDescriptor, h_list: Sequence[float],
                   rule: ResolutionRule = ResolutionRule(), reference_resolution: int = 2000,
                   tol: float = 1e-9, max_iter: int = 100_000, model: str = "sqrt",
                   max_resolution: int | None = None, on_row=None) -> GapSweep:
    """Rows of K_h - (1/h - n/2) C for decreasing h on simplex chart grids.

    Grids follow ``rule`` unless that needs more than ``max_resolution`` cells
    per axis; capped rows are listed in ``meta["capped_h"]``.  The predicted
    limit (Ent_0(rho1) - Ent_0(rho0)) / 2 is computed by quadrature on grids
    with ``reference_resolution`` cells per unit chart length (200 for n = 3).
    """
    n = desc0.n
    if n not in SUPPORTED_N:
        raise ValueError(f"n = {n} is not supported (supported: {SUPPORTED_N})")
    if desc1.n != n:
        raise ValueError("densities live on simplices of different dimension")
    h_list = [float(h) for h in h_list]
    if any(h <= 0 for h in h_list) or any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be positive and strictly decreasing")

    cache: dict = {}
    rows, meta_n, meta_mult, capped = [], [], [], []
    for h in h_list:
        try:
            res0, res1 = chart_resolution(desc0, h, rule), chart_resolution(desc1, h, rule)
            if max_resolution is not None and max(res0.max(), res1.max()) > max_resolution:
                log.warning("h=%g: grid capped at %d cells per axis, below the resolution rule",
                            h, max_resolution)
                capped.append(h)
                res0, res1 = np.minimum(res0, max_resolution), np.minimum(res1, max_resolution)
            key = (tuple(res0), tuple(res1))
            if key not in cache:
                g0, g1 = discretize_simplex(desc0, res0), discretize_simplex(desc1, res1)
                cache[key] = (g0, g1, dirichlet_exact_cost(g0, g1))
            g0, g1, C = cache[key]
            kh, it = dirichlet_kh(g0, g1, h, tol, max_iter)
            mult = 1.0 / h - n / 2.0
            row = GapRow(h, kh, math.nan, C, kh - mult * C, math.nan, it)
        except (SolverError, ConvergenceError, ValueError) as err:
            log.warning("dirichlet sweep row h=%g failed: %s", h, err)
            row = GapRow(h, math.nan, math.nan, math.nan, math.nan, math.nan, 0, str(err) or type(err).__name__)
        rows.append(row)
        meta_n.append(n)
        meta_mult.append(1.0 / h - n / 2.0)
        if on_row is not None:
            on_row(row)

    ref = reference_resolution if n == 2 else min(reference_resolution, 200)
    try:
        e0 = ent0(discretize_simplex(desc0, _box_resolution(desc0, ref)))
        e1 = ent0(discretize_simplex(desc1, _box_resolution(desc1, ref)))
    except ValueError as err:
        log.warning("predicted limit unavailable: %s", err)
        e0 = e1 = math.nan
    sweep = GapSweep(rows, 0.5 * (e1 - e0), meta={"n": meta_n, "multiplier": meta_mult,
                                                   "ent0_rho0": e0, "ent0_rho1": e1,
                                                   "capped_h": capped})
    ok = sweep.ok_rows()
    if len(ok) >= 3:
        ext = extrapolate_limit([r.h for r in ok], [r.gap for r in ok], model=model)
        sweep.extrapolation = ext
        sweep.extrapolated_limit = ext.limit
    return sweep


def _box_resolution(desc: SimplexDescriptor, per_unit: int) -> np.ndarray:
    box = desc.support_box()
    return np.maximum(np.ceil((box[:, 1] - box[:, 0]) * per_unit).astype(int), 2)


def cauchy_spread(values: Sequence[float], tail: int = 3) -> float:
    """Largest pairwise difference among the last ``tail`` values."""
    v = np.asarray(values, float)[-tail:]
    return float(v.max() - v.min())
