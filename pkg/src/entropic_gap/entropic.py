"""Entropic transport costs by log-domain Sinkhorn, and h-sweeps of the gap.

For grid densities with masses a_i = rho0_i v_i and b_j = rho1_j w_j the
discrete coupling entropy is taken relative to the cell volumes,
sum pi_ij log(pi_ij / (v_i w_j)), which approximates the differential entropy
of the coupling density.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .costs import ConvexCost, CostMatrix, cost_matrix, default_truncation_radius, log_lambda_h
from .density_grid import DensityDescriptor, GridDensity, discretize, entropy
from .exact import (ExactTransport, SolverError, TransportPlan, hessian_field,
                    riemann_volume_entropy, solve_transport)

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Sinkhorn did not reach the marginal tolerance."""

    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class EntropicSolution:
    plan: TransportPlan
    kh_prime: float
    kh: float
    h: float
    iterations: int
    marginal_residual: float
    ent_rho0: float = math.nan
    log_lambda_h: float = math.nan
    dual_track: tuple = field(default=(), repr=False)


def sinkhorn_log(log_a, log_b, log_kernel, tol=1e-9, max_iter=100_000, check_every=10,
                 init=None, track=False):
    """Log-domain Sinkhorn scaling of ``exp(log_kernel)`` to marginals (a, b).

    Returns potentials (f, g) with plan exp(f_i + log_kernel_ij + g_j), the
    iteration count, the final row residual and (optionally) the track of the
    dual objective sum a f + sum b g, which is nondecreasing.
    """
    a = np.exp(log_a)
    f = np.zeros(len(log_a)) if init is None else np.array(init[0], float)
    g = np.zeros(len(log_b)) if init is None else np.array(init[1], float)
    dual = []
    residual = np.inf
    it = 0
    while it < max_iter:
        g = log_b - logsumexp(log_kernel + f[:, None], axis=0)
        f = log_a - logsumexp(log_kernel + g[None, :], axis=1)
        it += 1
        if track:
            dual.append(float(a @ f + np.exp(log_b) @ g))
        if it % check_every == 0 or it == max_iter:
            # after the f update rows are exact; measure the column violation
            cols = np.exp(logsumexp(log_kernel + f[:, None], axis=0) + g)
            residual = float(np.abs(cols - np.exp(log_b)).max())
            if residual <= tol:
                break
    return f, g, it, residual, dual


def _support_problem(rho0: GridDensity, rho1: GridDensity):
    a = rho0.masses / rho0.total_mass()
    b = rho1.masses / rho1.total_mass()
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    return a, b, rows, cols


def _coupling_entropy(P, v, w):
    pos = P > 0
    ref = (v[:, None] * w[None, :])
    return float(np.sum(P[pos] * np.log(P[pos] / ref[pos])))


def sinkhorn(rho0: GridDensity, rho1: GridDensity, C, h: float, tol: float = 1e-9,
             max_iter: int = 100_000, log_lambda: float | None = None, cost: ConvexCost | None = None,
             init=None, track: bool = False, raise_on_failure: bool = True) -> EntropicSolution:
    """Minimize (1/h) <pi, C> + Ent(pi) over couplings of the grid marginals.

    ``log_lambda`` (log Lambda_h) is needed for K_h; it is computed from
    ``cost`` when not given, and K_h is NaN when neither is available.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    C = C.entries if isinstance(C, CostMatrix) else np.asarray(C, float)
    a, b, rows, cols = _support_problem(rho0, rho1)
    v = rho0.volumes[rows]
    w = rho1.volumes[cols]
    Cs = C[np.ix_(rows, cols)]
    with np.errstate(divide="ignore"):
        log_kernel = -Cs / h + np.log(v)[:, None] + np.log(w)[None, :]
    if np.any(np.all(np.isinf(log_kernel), axis=1)) or np.any(np.all(np.isinf(log_kernel), axis=0)):
        raise SolverError("a support node has no finite-cost partner")
    f, g, it, res, dual = sinkhorn_log(np.log(a[rows]), np.log(b[cols]), log_kernel, tol, max_iter,
                                       init=init, track=track)
    if res > tol:
        msg = f"sinkhorn at h={h:g}: residual {res:.3e} after {it} iterations"
        if raise_on_failure:
            raise ConvergenceError(msg, res)
        log.warning(msg)
    Ps = np.exp(f[:, None] + log_kernel + g[None, :])
    finite = np.isfinite(Cs)
    kh_prime = float(np.sum(Ps[finite] * Cs[finite]) / h + _coupling_entropy(Ps, v, w))
    P = np.zeros_like(C, dtype=float)
    P[np.ix_(rows, cols)] = Ps
    plan = TransportPlan(P, a, b, float(np.sum(Ps[finite] * Cs[finite])))
    ent0 = entropy(rho0.normalized())
    if log_lambda is None and cost is not None:
        log_lambda = log_lambda_h(cost, h)
    kh = kh_prime - ent0 + log_lambda if log_lambda is not None else math.nan
    residual = max(res, float(np.abs(Ps.sum(1) - a[rows]).max()))
    return EntropicSolution(plan, kh_prime, kh, h, it, residual, ent0,
                            math.nan if log_lambda is None else log_lambda, tuple(dual))


def kh_identity_check(sol: EntropicSolution, ent_rho0: float, log_lambda: float) -> float:
    """|K_h - (K'_h - Ent(rho0) + log Lambda_h)|."""
    return abs(sol.kh - (sol.kh_prime - ent_rho0 + log_lambda))


def coupling_relative_entropy(P, log_mu_mass) -> float:
    """sum P log(P / mu) over the support of P (masses on the product grid)."""
    pos = P > 0
    if np.any(~np.isfinite(log_mu_mass[pos])):
        raise ValueError("coupling charges a cell where the reference vanishes")
    return float(np.sum(P[pos] * (np.log(P[pos]) - log_mu_mass[pos])))


@dataclass(frozen=True)
class ResolutionRule:
    """Grid cells no larger than sqrt(h) / cells_per_sqrt_h (and at least ``min_resolution``)."""

    cells_per_sqrt_h: float = 5.0
    min_resolution: int = 8

    def cell_size(self, h: float) -> float:
        return math.sqrt(h) / self.cells_per_sqrt_h

    def resolution(self, box, h: float):
        box = np.asarray(box, float).reshape(-1, 2)
        width = box[:, 1] - box[:, 0]
        return np.maximum(np.ceil(width / self.cell_size(h) - 1e-9).astype(int), self.min_resolution)


GAP_COLUMNS = ("h", "w_g", "kh", "kh_prime", "gap", "corrected_gap_prime")


@dataclass(frozen=True)
class GapRow:
    h: float
    kh: float
    kh_prime: float
    w_g: float
    gap: float
    corrected_gap_prime: float
    iterations: int = 0
    error: str = ""


@dataclass(frozen=True)
class Extrapolation:
    limit: float
    coefficients: tuple
    model: str
    raw_smallest_h_gap: float


@dataclass
class GapSweep:
    rows: list
    predicted_limit: float
    extrapolated_limit: float = math.nan
    predicted_limit_prime: float = math.nan
    extrapolated_limit_prime: float = math.nan
    extrapolation: Extrapolation | None = None
    meta: dict = field(default_factory=dict)

    def ok_rows(self):
        return [r for r in self.rows if not r.error]

    def to_csv(self, path, extra_columns: dict | None = None) -> None:
        extra_columns = extra_columns or {}
        cols = list(GAP_COLUMNS) + ["predicted_limit", "extrapolated_limit"] + list(extra_columns)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k, r in enumerate(self.rows):
                vals = [r.h, r.w_g, r.kh, r.kh_prime, r.gap, r.corrected_gap_prime,
                        self.predicted_limit, self.extrapolated_limit]
                vals += [extra_columns[c][k] for c in extra_columns]
                w.writerow([_fmt(v) for v in vals])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, str):
        return v
    return f"{float(v):.12g}"


def extrapolate_limit(hs: Sequence[float], gaps: Sequence[float], model: str = "sqrt",
                      n_points: int = 3) -> Extrapolation:
    """Estimate lim_{h->0} gap(h) from the ``n_points`` smallest h.

    ``model="affine"`` fits gap = L + c h by least squares.  ``model="sqrt"``
    fits gap = L + a sqrt(h) + c h, which captures the sqrt(h) boundary layer
    of densities with a jump at the edge of their support; with three points
    the fit is exact and affine data are reproduced exactly.
    """
    hs = np.asarray(hs, float)
    gaps = np.asarray(gaps, float)
    if len(hs) < 3 or len(hs) != len(gaps):
        raise ValueError("need at least three (h, gap) rows")
    order = np.argsort(hs)[:n_points]
    x, y = hs[order], gaps[order]
    if np.unique(x).size < len(x):
        raise ValueError("degenerate fit: repeated h values")
    if model == "affine":
        X = np.column_stack([np.ones_like(x), x])
    elif model == "sqrt":
        X = np.column_stack([np.ones_like(x), np.sqrt(x), x])
    else:
        raise ValueError(f"unknown extrapolation model {model!r}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("degenerate fit: design matrix is rank deficient")
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    return Extrapolation(float(coef[0]), tuple(float(c) for c in coef[1:]), model, float(y[0]))


def predicted_limits(exact: ExactTransport) -> dict:
    """Predicted small-h limits from the divergence Hessian field of an exact solve.

    Keys: ``gap`` (limit of K_h - W_g/h), ``gap_prime`` (limit of the
    corrected K'_h gap), ``riemann_entropy`` and ``boundary_mass``.
    """
    field_ = hessian_field(exact)
    H = riemann_volume_entropy(exact.rho1.normalized(), field_)
    ent0 = entropy(exact.rho0.normalized())
    return {"gap": -0.5 * exact.cost.log_det_hessian + H, "gap_prime": ent0 + H,
            "riemann_entropy": H, "boundary_mass": field_.boundary_mass}


def gap_sweep(desc0: DensityDescriptor, desc1: DensityDescriptor, cost: ConvexCost,
              h_list: Sequence[float], rule: ResolutionRule = ResolutionRule(),
              reference_resolution: int | None = 400, tol: float = 1e-9, max_iter: int = 100_000,
              model: str = "sqrt", box0=None, box1=None,
              on_row: Callable[[GapRow], None] | None = None) -> GapSweep:
    """Rows of K_h - W_g/h for decreasing h, with predicted and extrapolated limits.

    Each h is solved on grids satisfying ``rule``; the exact cost is solved
    once per distinct resolution.  The predicted limit comes from the
    divergence Hessian field of an exact solve at ``reference_resolution``
    cells per unit length (or the finest sweep grid when None).
    """
    h_list = [float(h) for h in h_list]
    if any(h <= 0 for h in h_list) or any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be positive and strictly decreasing")
    box0 = desc0.support_box() if box0 is None else np.asarray(box0, float).reshape(-1, 2)
    box1 = desc1.support_box() if box1 is None else np.asarray(box1, float).reshape(-1, 2)
    if not np.isfinite(cost.truncation_radius):
        cost = cost.with_radius(default_truncation_radius(box0, box1))

    exact_cache: dict = {}

    def exact_at(res0, res1):
        key = (tuple(res0), tuple(res1))
        if key not in exact_cache:
            r0 = discretize(desc0, res0, box0)
            r1 = discretize(desc1, res1, box1)
            exact_cache[key] = solve_transport(r0, r1, cost)
        return exact_cache[key]

    rows = []
    for h in h_list:
        res0, res1 = rule.resolution(box0, h), rule.resolution(box1, h)
        try:
            ex = exact_at(res0, res1)
            logl = log_lambda_h(cost, h)
            sol = sinkhorn(ex.rho0, ex.rho1, ex.C, h, tol=tol, max_iter=max_iter, log_lambda=logl)
            d = cost.dim
            row = GapRow(h, sol.kh, sol.kh_prime, ex.w_g, sol.kh - ex.w_g / h,
                         sol.kh_prime - ex.w_g / h + 0.5 * d * math.log(2 * math.pi * h), sol.iterations)
        except (SolverError, ConvergenceError, ValueError) as err:
            log.warning("gap sweep row h=%g failed: %s", h, err)
            row = GapRow(h, math.nan, math.nan, math.nan, math.nan, math.nan, 0, str(err) or type(err).__name__)
        rows.append(row)
        if on_row is not None:
            on_row(row)

    try:
        if reference_resolution is None:
            ref = exact_at(rule.resolution(box0, h_list[-1]), rule.resolution(box1, h_list[-1]))
        else:
            r0 = np.maximum(np.ceil((box0[:, 1] - box0[:, 0]) * reference_resolution).astype(int), 2)
            r1 = np.maximum(np.ceil((box1[:, 1] - box1[:, 0]) * reference_resolution).astype(int), 2)
            ref = exact_at(r0, r1)
        pred = predicted_limits(ref)
    except (SolverError, ValueError) as err:
        log.warning("predicted limit unavailable: %s", err)
        pred = {"gap": math.nan, "gap_prime": math.nan, "error": str(err)}
    sweep = GapSweep(rows, pred["gap"], predicted_limit_prime=pred["gap_prime"], meta=pred)
    ok = sweep.ok_rows()
    if len(ok) >= 3:
        ext = extrapolate_limit([r.h for r in ok], [r.gap for r in ok], model=model)
        sweep.extrapolation = ext
        sweep.extrapolated_limit = ext.limit
        sweep.extrapolated_limit_prime = extrapolate_limit(
            [r.h for r in ok], [r.corrected_gap_prime for r in ok], model=model).limit
    return sweep
