"""Exact discrete optimal transport, Kantorovich duals and the c-divergence.

The transportation problem is solved by a primal simplex on the spanning-tree
basis of the bipartite transport graph, started from the north-west corner
rule.  For one-dimensional convex costs on sorted grids the cost matrix has
the Monge property and the north-west corner basis is already optimal.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .costs import ConvexCost, CostMatrix, cost_matrix
from .density_grid import GridDensity, interior_mask

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The exact solver could not produce an optimal plan."""


class EllipticityError(ValueError):
    """A divergence Hessian is not positive definite or cannot be estimated."""


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    source_masses: np.ndarray
    target_masses: np.ndarray
    objective: float

    def marginal_residual(self) -> float:
        return float(max(np.abs(self.matrix.sum(1) - self.source_masses).max(),
                         np.abs(self.matrix.sum(0) - self.target_masses).max()))

    def to_csv(self, path, tol: float = 0.0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "mass"])
            for i, j in zip(*np.nonzero(self.matrix > tol)):
                w.writerow([i, j, f"{self.matrix[i, j]:.12g}"])


@dataclass(frozen=True)
class DualPotentials:
    psi: np.ndarray
    psi_star: np.ndarray
    # largest change made by the c-transform tightening pass
    tightening_shift: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["side", "index", "value"])
            for i, v in enumerate(self.psi):
                w.writerow(["psi", i, f"{v:.12g}"])
            for j, v in enumerate(self.psi_star):
                w.writerow(["psi_star", j, f"{v:.12g}"])


def _least_cost_start(a, b, C):
    """Greedy cheapest-cell allocation, completed to a spanning tree with zero-flow cells.

    Every allocation exhausts a row or a column, so the charged cells form a
    forest; cheapest cells joining two components then fill the basis.
    """
    m, n = len(a), len(b)
    flow = np.zeros((m, n))
    sa, sb = a.astype(float).copy(), b.astype(float).copy()
    order = np.argsort(C, axis=None, kind="stable")
    parent = list(range(m + n))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    basis = []
    left = m
    for cell in order:
        i, j = divmod(int(cell), n)
        if sa[i] == 0.0 or sb[j] == 0.0:
            continue
        t = min(sa[i], sb[j])
        flow[i, j] = t
        if sa[i] <= sb[j]:
            sa[i] = 0.0
            sb[j] -= t
            left -= 1
        else:
            sb[j] = 0.0
            sa[i] -= t
        basis.append((i, j))
        parent[find(i)] = find(m + j)
        if left == 0:
            break
    for cell in order:
        if len(basis) == m + n - 1:
            break
        i, j = divmod(int(cell), n)
        ri, rj = find(i), find(m + j)
        if ri != rj:
            parent[ri] = rj
            basis.append((i, j))
    return flow, basis


class _BasisTree:
    """Spanning tree of basic cells with parent pointers and node potentials.

    Rows are nodes 0..m-1 and columns m..m+n-1; column 0 is the root with
    potential 0, and every basic cell (i, j) satisfies pot[i] + pot[m+j] = C[i, j].
    """

    def __init__(self, C, basis, m, n):
        self.m = m
        self.adj = [set() for _ in range(m + n)]
        for i, j in basis:
            self.adj[i].add(m + j)
            self.adj[m + j].add(i)
        self.parent = [-1] * (m + n)
        self.depth = [0] * (m + n)
        self.pot = [0.0] * (m + n)
        self.C = C
        self._hang(m, -1, 0, 0.0)
        if any(p == -1 for k, p in enumerate(self.parent) if k != m):
            raise SolverError("basis is not a spanning tree")

    def _edge_cost(self, a, b):
        return self.C[a, b - self.m] if a < self.m else self.C[b, a - self.m]

    def _hang(self, top, parent, depth, pot):
        """Re-derive tree depths and potentials in the subtree hanging from ``top``."""
        self.parent[top], self.depth[top], self.pot[top] = parent, depth, pot
        stack = [top]
        while stack:
            k = stack.pop()
            for q in self.adj[k]:
                if q != self.parent[k]:
                    self.parent[q] = k
                    self.depth[q] = self.depth[k] + 1
                    self.pot[q] = self._edge_cost(k, q) - self.pot[k]
                    stack.append(q)

    def potentials(self):
        pot = np.array(self.pot)
        return pot[:self.m], pot[self.m:]

    def cycle(self, i, j):
        """Tree path from column j to row i as a list of nodes, plus whether each
        node before the meeting point lies on the column side."""
        a, b = self.m + j, i
        side_a, side_b = [a], [b]
        while a != b:
            if self.depth[a] >= self.depth[b]:
                a = self.parent[a]
                side_a.append(a)
            else:
                b = self.parent[b]
                side_b.append(b)
        return side_a + side_b[-2::-1], len(side_a) - 1

    def pivot(self, enter, leave, on_column_side):
        """Swap ``leave`` for ``enter`` and re-hang the detached subtree."""
        m = self.m
        (ie, je), (il, jl) = enter, leave
        self.adj[il].discard(m + jl)
        self.adj[m + jl].discard(il)
        self.adj[ie].add(m + je)
        self.adj[m + je].add(ie)
        # the endpoint of the entering cell below the leaving edge becomes the new subtree top
        top, other = (m + je, ie) if on_column_side else (ie, m + je)
        self._hang(top, other, self.depth[other] + 1, self._edge_cost(other, top) - self.pot[other])


def _transport_simplex(a, b, C, max_pivots, tol=1e-12, bland_after=50):
    m, n = C.shape
    finite = np.isfinite(C)
    big = (np.abs(C[finite]).max() + 1.0) * (m + n) * 10.0 if finite.any() else 1.0
    Cw = np.where(finite, C, big)
    flow, basis = _least_cost_start(a, b, Cw)
    tree = _BasisTree(Cw, basis, m, n)
    degenerate_run = 0
    pivots = 0
    scale = max(1.0, float(np.abs(Cw).max()))
    price = np.where(finite, Cw, np.inf)
    # rotating block pricing: most negative reduced cost within a block of rows
    block = max(1, min(m, 4096 // max(1, n) + 1, m // 4 + 1))
    start = 0
    while True:
        u, v = tree.potentials()
        if degenerate_run >= bland_after:
            # Bland: first improving cell in row-major order
            red = price - u[:, None] - v[None, :]
            cand = np.flatnonzero(red.ravel() < -tol * scale)
            if cand.size == 0:
                break
            ie, je = divmod(int(cand[0]), n)
        else:
            found = False
            for _ in range(-(-m // block)):
                rows = np.arange(start, min(start + block, m))
                red = price[rows] - u[rows, None] - v[None, :]
                k = int(np.argmin(red))
                start = rows[-1] + 1 if rows[-1] + 1 < m else 0
                if red.flat[k] < -tol * scale:
                    ie, je = int(rows[k // n]), k % n
                    found = True
                    break
            if not found:
                break
        if pivots >= max_pivots:
            raise SolverError(f"no optimum after {max_pivots} pivots")
        path, n_col_side = tree.cycle(ie, je)
        # cells along the path from column je to row ie alternate -, +, -, ...
        cells = []
        for s in range(len(path) - 1):
            k1, k2 = path[s], path[s + 1]
            cells.append((k2, k1 - m) if k1 >= m else (k1, k2 - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        pos = min(range(len(minus)), key=lambda t: (flow[minus[t]] > theta + 1e-15, minus[t]))
        leaving = minus[pos]
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ie, je] += theta
        flow[leaving] = 0.0
        tree.pivot((ie, je), leaving, 2 * pos < n_col_side)
        degenerate_run = degenerate_run + 1 if theta <= 1e-15 else 0
        pivots += 1
    np.maximum(flow, 0.0, out=flow)
    if np.any(flow[~finite] > 1e-14):
        raise SolverError("infeasible: the plan needs an infinite-cost pair")
    log.debug("transport simplex: %d pivots on %dx%d", pivots, m, n)
    return flow, u, v, pivots


def c_transform_tighten(C, psi, psi_star):
    """Replace psi* by the c-transform of psi, then psi by that of psi*.

    Both steps keep dual feasibility and never lower the dual objective, so an
    optimal pair stays optimal.
    """
    Cf = np.where(np.isfinite(C), C, np.inf)
    new_star = np.min(Cf - psi[:, None], axis=0)
    new_psi = np.min(Cf - new_star[None, :], axis=1)
    shift = float(max(np.abs(new_star - psi_star).max(initial=0.0),
                      np.abs(new_psi - psi).max(initial=0.0)))
    return new_psi, new_star, shift


def solve_exact(a, b, C, max_pivots: int = 200000, tighten: bool = True):
    """Optimal plan and Kantorovich duals of the discrete transport problem.

    ``a`` and ``b`` are nonnegative mass vectors summing to one; ``C`` is a
    cost array or :class:`CostMatrix` (``inf`` marks forbidden pairs).  Zero
    masses are removed before pivoting; duals on those nodes are filled in by
    c-transforms.  Duals are shifted so that psi* vanishes at the first target
    node of positive mass.
    """
    C = C.entries if isinstance(C, CostMatrix) else np.asarray(C, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if abs(a.sum() - 1) > 1e-10 or abs(b.sum() - 1) > 1e-10:
        raise ValueError("source and target masses must each sum to 1")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("masses must be nonnegative")
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    Cs = C[np.ix_(rows, cols)]
    if np.any(~np.isfinite(Cs).any(axis=1)) or np.any(~np.isfinite(Cs).any(axis=0)):
        raise SolverError("infeasible: a node has only infinite-cost partners")
    # equalize totals exactly so the greedy start exhausts every node
    a_s = a[rows] / a[rows].sum()
    b_s = b[cols] / b[cols].sum()
    flow, u, v, _ = _transport_simplex(a_s, b_s, Cs, max_pivots)

    matrix = np.zeros_like(C)
    matrix[np.ix_(rows, cols)] = flow
    # fill duals off the supports by c-transforms: psi from the supported
    # psi*, then psi* against every finite psi, so all pairs stay feasible
    psi = np.full(len(a), np.nan)
    psi_star = np.full(len(b), np.nan)
    psi[rows] = u
    psi_star[cols] = v
    shift = 0.0
    if tighten:
        u2, v2, shift = c_transform_tighten(Cs, u, v)
        psi[rows], psi_star[cols] = u2, v2
    Cf = np.where(np.isfinite(C), C, np.inf)
    off_cols = np.setdiff1d(np.arange(len(b)), cols)
    off_rows = np.setdiff1d(np.arange(len(a)), rows)
    if off_rows.size:
        psi[off_rows] = np.min(Cf[np.ix_(off_rows, cols)] - psi_star[cols][None, :], axis=1)
    if off_cols.size:
        fin = np.flatnonzero(np.isfinite(psi))
        psi_star[off_cols] = np.min(Cf[np.ix_(fin, off_cols)] - psi[fin][:, None], axis=0)
    c0 = psi_star[cols[0]]
    psi_star = psi_star - c0
    psi = psi + c0
    objective = float(np.sum(flow[np.isfinite(Cs)] * Cs[np.isfinite(Cs)]))
    plan = TransportPlan(matrix, a, b, objective)
    return plan, DualPotentials(psi, psi_star, shift)


def dual_objective(a, b, duals: DualPotentials) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(a[a > 0] @ duals.psi[a > 0] + b[b > 0] @ duals.psi_star[b > 0])


def monge_map_1d(rho0: GridDensity, rho1: GridDensity) -> np.ndarray:
    """Monotone rearrangement F1^{-1} o F0 evaluated at the source nodes."""
    if rho0.dim != 1 or rho1.dim != 1:
        raise ValueError("monge_map_1d needs one-dimensional densities")
    m0 = rho0.masses / rho0.total_mass()
    m1 = rho1.masses / rho1.total_mass()
    F0 = np.cumsum(m0) - 0.5 * m0
    # piecewise-constant rho1 has a piecewise-linear CDF through the cell edges
    lo, hi = rho1.box[0]
    edges = np.linspace(lo, hi, rho1.shape[0] + 1)
    F1 = np.concatenate([[0.0], np.cumsum(m1)])
    keep = np.concatenate([[True], np.diff(F1) > 0])
    # on flat stretches of F1 take the left-most preimage
    return np.interp(F0, F1[keep], edges[keep])


@dataclass(frozen=True)
class ExactTransport:
    """A solved exact instance: the optimal plan with its tightened duals."""

    rho0: GridDensity
    rho1: GridDensity
    cost: ConvexCost
    C: CostMatrix
    plan: TransportPlan
    duals: DualPotentials
    _interp: object = field(default=None, repr=False, compare=False)

    @property
    def w_g(self) -> float:
        return self.plan.objective

    def duality_gap(self) -> float:
        return abs(self.plan.objective - dual_objective(self.plan.source_masses,
                                                        self.plan.target_masses, self.duals))

    def monge_images(self) -> np.ndarray:
        """Barycentric image of each source node under the plan (NaN off support)."""
        a = self.plan.source_masses
        with np.errstate(invalid="ignore", divide="ignore"):
            return (self.plan.matrix @ self.rho1.nodes) / a[:, None]

    def inverse_images(self) -> np.ndarray:
        """Barycentric preimage z_* of each target node (NaN off support)."""
        b = self.plan.target_masses
        with np.errstate(invalid="ignore", divide="ignore"):
            return (self.plan.matrix.T @ self.rho0.nodes) / b[:, None]

    def psi_star_at(self, y) -> np.ndarray:
        """psi* interpolated (multi)linearly between target nodes.

        The interpolant is capped by the c-transform of psi over the source
        support, which leaves node values unchanged and keeps
        psi(x) + psi*(y) <= g(x - y) at every y.
        """
        interp = self._interp
        if interp is None:
            axes = [np.unique(self.rho1.nodes[:, k]) for k in range(self.rho1.dim)]
            interp = RegularGridInterpolator(axes, self.duals.psi_star.reshape(self.rho1.shape),
                                             bounds_error=False, fill_value=None)
            object.__setattr__(self, "_interp", interp)
        y = np.atleast_2d(np.asarray(y, float))
        src = np.flatnonzero(self.rho0.support)
        ctrans = np.min(self.cost(self.rho0.nodes[src][:, None, :] - y[None, :, :])
                        - self.duals.psi[src][:, None], axis=0)
        return np.minimum(interp(y), ctrans)


def solve_transport(rho0: GridDensity, rho1: GridDensity, cost: ConvexCost, **kw) -> ExactTransport:
    C = cost_matrix(cost, rho0.nodes, rho1.nodes)
    plan, duals = solve_exact(rho0.masses / rho0.total_mass(), rho1.masses / rho1.total_mass(), C, **kw)
    return ExactTransport(rho0, rho1, cost, C, plan, duals)


def c_divergence(sol: ExactTransport, i: int, y) -> np.ndarray:
    """D[y | x_i*] = g(x_i - y) - psi(x_i) - psi*(y); +inf off the supports."""
    y = np.atleast_2d(np.asarray(y, float))
    if not sol.rho0.support[i]:
        return np.full(len(y), np.inf)
    x = sol.rho0.nodes[i]
    val = sol.cost(x - y) - sol.duals.psi[i] - sol.psi_star_at(y)
    return np.where(sol.rho1.contains(y), val, np.inf)


def divergence_matrix(sol: ExactTransport) -> np.ndarray:
    """D[y_j | x_i*] on the grid nodes, +inf off the supports."""
    D = sol.C.entries - sol.duals.psi[:, None] - sol.duals.psi_star[None, :]
    mask = sol.rho0.support[:, None] & sol.rho1.support[None, :] & np.isfinite(D)
    return np.where(mask, D, np.inf)


def _window_offsets(rho1: GridDensity, window: int) -> np.ndarray:
    """Flat-index offsets and displacement vectors of a (2w+1)^d node stencil."""
    rng = np.arange(-window, window + 1)
    mesh = np.meshgrid(*([rng] * rho1.dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _fd_hessian(sol: ExactTransport, j: int, step=None) -> np.ndarray:
    rho1 = sol.rho1
    steps = 2.0 * rho1.spacing if step is None else np.broadcast_to(np.asarray(step, float), (rho1.dim,))
    if not interior_mask(rho1, 2.0 * steps)[j]:
        raise EllipticityError("z is too close to the support boundary for the finite-difference step")
    z = rho1.nodes[j]
    x = sol.inverse_images()[j]

    def D(y):
        return (sol.cost(x - y) - sol.psi_star_at(y))[0]

    d = rho1.dim
    E = np.diag(steps)
    A = np.empty((d, d))
    f0 = D(z)
    for k in range(d):
        A[k, k] = (D(z + E[k]) - 2 * f0 + D(z - E[k])) / steps[k] ** 2
        for l in range(k):
            A[k, l] = A[l, k] = (D(z + E[k] + E[l]) - D(z + E[k] - E[l]) - D(z - E[k] + E[l])
                                 + D(z - E[k] - E[l])) / (4 * steps[k] * steps[l])
    if np.linalg.eigvalsh(A).min() <= 0:
        raise EllipticityError(f"divergence Hessian at node {j} is not positive definite")
    return A


def divergence_hessian(sol: ExactTransport, j: int, window: int = 4, method: str = "envelope",
                       step=None) -> np.ndarray:
    """Hessian A(z) of y -> D[y | z] at y = z = y_j.

    The gradient of D in y is grad g(S(y) - y) - grad g(z_* - y), where S is the
    barycentric inverse map of the plan (the envelope identity for psi*).  It
    is sampled at the target nodes within ``window`` cells of z and fitted by
    a linear function whose slope is A.  Working from psi* values instead is
    unreliable: a discrete c-transform is a piecewise parabola whose second
    differences alternate between 0 and the cost curvature.

    ``method="finite-difference"`` takes central second differences of
    y -> D[y | z] with the interpolated psi* instead (``step`` defaults to two
    cells); it is kept for comparison.
    """
    rho1 = sol.rho1
    if not rho1.support[j]:
        raise EllipticityError("z is outside the target support")
    if method == "finite-difference":
        return _fd_hessian(sol, j, step)
    if method != "envelope":
        raise ValueError(f"unknown Hessian method {method!r}")
    if not interior_mask(rho1, window * rho1.spacing)[j]:
        raise EllipticityError("z is too close to the support boundary for the fitting window")
    offs = _window_offsets(rho1, window)
    centre = np.array(np.unravel_index(j, rho1.shape))
    idx = np.ravel_multi_index(tuple((centre + offs).T), rho1.shape)
    S = sol.inverse_images()
    z = rho1.nodes[j]
    y = rho1.nodes[idx]
    grad = sol.cost.gradient(S[idx] - y) - sol.cost.gradient(S[j] - y)
    u = y - z
    X = np.column_stack([np.ones(len(u)), u])
    A = np.linalg.lstsq(X, grad, rcond=None)[0][1:]
    A = 0.5 * (A + A.T)
    if np.linalg.eigvalsh(A).min() <= 0:
        raise EllipticityError(f"divergence Hessian at node {j} is not positive definite")
    return A


@dataclass(frozen=True)
class DivergenceField:
    monge_images: np.ndarray
    hessians: np.ndarray  # (M, d, d); NaN where not estimated
    estimated: np.ndarray  # bool mask over target nodes
    boundary_mass: float

    def log_det(self) -> np.ndarray:
        out = np.full(len(self.hessians), np.nan)
        out[self.estimated] = np.linalg.slogdet(self.hessians[self.estimated])[1]
        return out

    def nearest_log_det(self, rho1: GridDensity, points) -> np.ndarray:
        """log det A at the estimated target node nearest to each point."""
        est = np.flatnonzero(self.estimated)
        ld = self.log_det()[est]
        pts = np.atleast_2d(points)
        d2 = ((pts[:, None, :] - rho1.nodes[est][None, :, :]) ** 2).sum(-1)
        return ld[np.argmin(d2, axis=1)]

    def to_csv(self, path, rho1: GridDensity) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = rho1.dim
            w.writerow([f"z{k}" for k in range(d)]
                       + [f"A{k}{l}" for k in range(d) for l in range(d)] + ["detA"])
            for j in np.flatnonzero(self.estimated):
                A = self.hessians[j]
                w.writerow([f"{c:.12g}" for c in rho1.nodes[j]] + [f"{v:.12g}" for v in A.ravel()]
                           + [f"{np.linalg.det(A):.12g}"])


def hessian_field(sol: ExactTransport, window: int = 4) -> DivergenceField:
    """A(z) at every target node far enough inside the support to fit."""
    rho1 = sol.rho1
    ok = interior_mask(rho1, window * rho1.spacing)
    d = rho1.dim
    hess = np.full((len(rho1.values), d, d), np.nan)
    for j in np.flatnonzero(ok):
        hess[j] = divergence_hessian(sol, j, window)
    boundary = rho1.support & ~ok
    bmass = float(rho1.masses[boundary].sum() / rho1.total_mass())
    return DivergenceField(sol.monge_images(), hess, ok, bmass)


def riemann_volume_entropy(rho1: GridDensity, field: DivergenceField) -> float:
    """H(rho1 | mu_g) = (1/2) sum rho1 log det A.

    Support cells in the boundary layer where A was not fitted take the value
    at the nearest fitted node.
    """
    supp = rho1.support
    ld = np.full(len(rho1.values), np.nan)
    ld[supp] = field.nearest_log_det(rho1, rho1.nodes[supp])
    return float(0.5 * np.sum(rho1.values[supp] * ld[supp] * rho1.volumes[supp]))
