"""Exponentially tilted transition kernels and the Gaussian bridge diagnostics.

Given an exact solution with duals (psi, psi*), the tilted kernel at x is
proportional to exp(-D[y | x*] / h) on the target grid.  Its normalizers
Z_h(x) and Lambda~_h(x) = Z_h(x) Lambda_h, the induced target marginal
rho1^h and the two-step coupling f_2h are computed by grid quadrature.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .costs import ConvexCost, default_truncation_radius, lambda_h_ratio, log_lambda_h
from .density_grid import DensityDescriptor, GridDensity, discretize, interior_mask
from .exact import (DivergenceField, EllipticityError, ExactTransport, SolverError, TransportPlan,
                    divergence_matrix, hessian_field, riemann_volume_entropy, solve_transport)

log = logging.getLogger(__name__)

TINY = 1e-300


@dataclass(frozen=True)
class TiltedKernel:
    h: float
    log_rows: np.ndarray  # log of the row densities at target nodes; -inf off support
    log_z: np.ndarray  # log Z_h(x); NaN off the source support
    log_lambda_tilde: np.ndarray
    log_lambda_h: float
    source_support: np.ndarray

    @property
    def rows(self) -> np.ndarray:
        return np.exp(self.log_rows)

    @property
    def z_values(self) -> np.ndarray:
        return np.exp(self.log_z)

    @property
    def lambda_tilde(self) -> np.ndarray:
        return np.exp(self.log_lambda_tilde)

    def to_csv(self, path, rho1: GridDensity) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "i", "j", "row_density"])
            rows = self.rows
            for i in np.flatnonzero(self.source_support):
                for j in np.flatnonzero(rows[i] > 0):
                    w.writerow([f"{self.h:.12g}", i, j, f"{rows[i, j]:.12g}"])


def tilt_kernel(sol: ExactTransport, h: float, log_lambda: float | None = None) -> TiltedKernel:
    """Rows exp(-D[y|x*]/h) / Lambda~_h(x), normalized against target cell volumes."""
    if h <= 0:
        raise ValueError("h must be positive")
    D = divergence_matrix(sol)
    w = sol.rho1.volumes
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    expo = -D / h
    src = sol.rho0.support
    log_lt = np.full(len(src), np.nan)
    log_lt[src] = logsumexp(expo[src] + logw[None, :], axis=1)
    if np.any(~np.isfinite(log_lt[src])):
        bad = np.flatnonzero(src)[~np.isfinite(log_lt[src])]
        raise ValueError(f"tilted kernel rows {bad.tolist()} vanish on the target grid")
    log_rows = np.full_like(D, -np.inf)
    log_rows[src] = expo[src] - log_lt[src, None]
    logl = log_lambda_h(sol.cost, h) if log_lambda is None else log_lambda
    return TiltedKernel(h, log_rows, log_lt - logl, log_lt, logl, src)


def row_masses(kernel: TiltedKernel, rho1: GridDensity) -> np.ndarray:
    """Total mass of each tilted row; 1 on the source support."""
    return (kernel.rows * rho1.volumes[None, :]).sum(axis=1)


def source_interior(sol: ExactTransport, field: DivergenceField, h: float, n_sd: float = 6.0) -> np.ndarray:
    """Sources whose Monge image sits n_sd bridge standard deviations inside spt(rho1).

    The standard deviation is sqrt(h / lambda_min(A(x*))).
    """
    images = sol.monge_images()
    src = np.flatnonzero(sol.rho0.support)
    out = np.zeros(len(sol.rho0.values), dtype=bool)
    ld = field.estimated
    lam_min = np.full(len(field.hessians), np.nan)
    lam_min[ld] = np.linalg.eigvalsh(field.hessians[ld])[:, 0]
    lam = np.nanmin(lam_min)
    inner = interior_mask(sol.rho1, n_sd * math.sqrt(h / lam))
    idx = sol.rho1.grid_index(images[src])
    out[src] = inner[idx] & ld[idx]
    return out


def lambda_tilde_ratio(kernel: TiltedKernel, sol: ExactTransport, field: DivergenceField) -> np.ndarray:
    """Lambda~_h(x) sqrt(det A(x*)) / (2 pi h)^(d/2) for every source node (NaN off support)."""
    d = sol.rho1.dim
    out = np.full(len(kernel.log_lambda_tilde), np.nan)
    src = kernel.source_support
    log_det = field.nearest_log_det(sol.rho1, sol.monge_images()[src])
    out[src] = np.exp(kernel.log_lambda_tilde[src] + 0.5 * log_det - 0.5 * d * math.log(2 * math.pi * kernel.h))
    return out


def z_integral(kernel: TiltedKernel, rho0: GridDensity) -> float:
    """-sum_i log Z_h(x_i) rho0(x_i) v_i."""
    src = kernel.source_support
    m = rho0.masses / rho0.total_mass()
    return float(-np.sum(kernel.log_z[src] * m[src]))


@dataclass(frozen=True)
class BridgeMarginal:
    rho1_h: GridDensity
    sup_error: float
    ratio_min: float
    ratio_max: float
    interior: np.ndarray


def bridge_marginal(kernel: TiltedKernel, rho0: GridDensity, rho1: GridDensity, margin=None) -> BridgeMarginal:
    """Target law rho1^h of the tilted joint rho0(x) p~_h(x, y).

    ``sup_error`` and the ratio bounds are taken over support nodes at least
    ``margin`` from the support boundary (default: a tenth of the support's
    smallest side, a fixed set independent of h).
    """
    m = rho0.masses / rho0.total_mass()
    vals = m @ kernel.rows
    rho1_h = rho1.with_values(vals)
    if margin is None:
        nodes = rho1.nodes[rho1.support]
        margin = 0.1 * float((nodes.max(0) - nodes.min(0) + rho1.spacing).min())
    inner = interior_mask(rho1, margin)
    target = rho1.values / rho1.total_mass()
    err = np.abs(vals[inner] - target[inner])
    ratio = vals[inner] / target[inner]
    return BridgeMarginal(rho1_h, float(err.max()), float(ratio.min()), float(ratio.max()), inner)


@dataclass(frozen=True)
class F2hResult:
    plan: TransportPlan
    relative_entropy: float
    excluded_mass: float


def f2h_coupling(kernel_h: TiltedKernel, kernel_2h: TiltedKernel, sol: ExactTransport) -> F2hResult:
    """The two-step coupling f_2h and its relative entropy to the tilted joint at 2h.

    The pushforward of the tilted joint by x -> z = x* is formed with the
    exact plan, which assigns each target z its (possibly several) preimages.
    Target cells where rho1^h underflows are dropped and their mass reported.
    """
    if not math.isclose(kernel_2h.h, 2 * kernel_h.h, rel_tol=1e-12):
        raise ValueError("second kernel must be built at twice the first h")
    rho0, rho1 = sol.rho0, sol.rho1
    a = sol.plan.source_masses
    w = rho1.volumes
    step = kernel_h.rows * w[None, :]  # p~_h(x_i, y_k) w_k: each row sums to 1
    pi = sol.plan.matrix
    # nu~(z_j, y_k): rho1(z_j) exp(-D[y_k|z_j]/h) / Lambda~_h(z_*) as masses
    nu = pi.T @ step
    marg = a @ step  # rho1^h masses
    keep = marg > TINY
    chi = np.zeros_like(nu)
    chi[:, keep] = nu[:, keep] / marg[keep][None, :]
    excluded = float(marg[~keep].sum())
    f2h = a[:, None] * (step @ chi.T)
    plan = TransportPlan(f2h, a, sol.plan.target_masses, float(np.sum(f2h * np.where(np.isfinite(sol.C.entries), sol.C.entries, 0.0))))
    with np.errstate(divide="ignore"):
        log_mu = np.log(a)[:, None] + kernel_2h.log_rows + np.log(w)[None, :]
    pos = f2h > 0
    if np.any(pos & ~np.isfinite(log_mu)):
        raise ValueError("f_2h charges a cell where the tilted joint at 2h vanishes")
    H = float(np.sum(f2h[pos] * (np.log(f2h[pos]) - log_mu[pos])))
    return F2hResult(plan, H, excluded)


def preimage_spread(sol: ExactTransport) -> float:
    """Widest coordinate range of the sources that share a target in the exact plan, in source cells.

    A single-valued inverse map z -> z_* gives at most about one cell.
    """
    charged = sol.plan.matrix > 0
    nodes = sol.rho0.nodes
    worst = 0.0
    for j in np.flatnonzero(charged.sum(axis=0) > 1):
        worst = max(worst, float(np.ptp(nodes[charged[:, j]], axis=0).max()))
    return worst / float(sol.rho0.spacing.max())


def mean_lambda_tilde_ratio(kernel: TiltedKernel, sol: ExactTransport, field: DivergenceField,
                            n_sd: float = 6.0) -> float:
    """Mass-weighted mean of :func:`lambda_tilde_ratio` over sources deep inside the support.

    Near the support boundary the tilted row is cut off and the ratio tends to
    a fraction of 1, so only sources whose image lies ``n_sd`` bridge widths
    inside are averaged.  NaN if there are none at this h.
    """
    inner = source_interior(sol, field, kernel.h, n_sd)
    if not inner.any():
        return math.nan
    r = lambda_tilde_ratio(kernel, sol, field)
    m = sol.rho0.masses[inner]
    return float(np.sum(r[inner] * m) / m.sum())


def gaussian_surrogate_tv(kernel: TiltedKernel, sol: ExactTransport, field: DivergenceField, i: int) -> float:
    """Total variation between row i and N(x*, h A^{-1}(x*)) on the target grid.

    The Gaussian is restricted to spt(rho1) and renormalized there.
    """
    rho1 = sol.rho1
    if not kernel.source_support[i]:
        raise ValueError("source node is outside the support")
    xstar = sol.monge_images()[i]
    est = np.flatnonzero(field.estimated)
    k = est[np.argmin(((rho1.nodes[est] - xstar) ** 2).sum(1))]
    A = field.hessians[k]
    diff = rho1.nodes - xstar
    logg = -0.5 * np.einsum("ni,ij,nj->n", diff, A, diff) / kernel.h
    logg = np.where(rho1.support, logg, -np.inf)
    gauss = np.exp(logg - logsumexp(logg + np.log(rho1.volumes)))
    return float(0.5 * np.sum(np.abs(kernel.rows[i] - gauss) * rho1.volumes))


BRIDGE_COLUMNS = ("h", "lambda_ratio", "mean_lambda_tilde_ratio", "z_integral", "sup_error",
                  "h_f2h", "f2h_marginal_residual", "predicted_z_limit", "error")


@dataclass(frozen=True)
class BridgeRow:
    h: float
    lambda_ratio: float
    mean_lambda_tilde_ratio: float
    z_integral: float
    sup_error: float
    h_f2h: float
    f2h_marginal_residual: float
    error: str = ""


@dataclass
class BridgeSweep:
    rows: list
    predicted_z_limit: float
    meta: dict = field(default_factory=dict)

    def ok_rows(self):
        return [r for r in self.rows if not r.error]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BRIDGE_COLUMNS)
            for r in self.rows:
                vals = [r.h, r.lambda_ratio, r.mean_lambda_tilde_ratio, r.z_integral, r.sup_error,
                        r.h_f2h, r.f2h_marginal_residual, self.predicted_z_limit]
                w.writerow([f"{v:.12g}" for v in vals] + [r.error])


def _failed_row(h: float, err: Exception) -> BridgeRow:
    nan = math.nan
    return BridgeRow(h, nan, nan, nan, nan, nan, nan, str(err) or type(err).__name__)


def bridge_sweep(desc0: DensityDescriptor, desc1: DensityDescriptor, cost: ConvexCost,
                 h_list: Sequence[float], cells_per_unit: int = 400,
                 on_row: Callable[[BridgeRow], None] | None = None) -> BridgeSweep:
    """Bridge diagnostics for decreasing h on one fixed pair of grids.

    The exact problem is solved once at ``cells_per_unit`` cells per unit
    length.  If that solve fails every row carries the error.
    """
    h_list = [float(h) for h in h_list]
    if any(h <= 0 for h in h_list) or any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be positive and strictly decreasing")
    box0, box1 = desc0.support_box(), desc1.support_box()
    if not np.isfinite(cost.truncation_radius):
        cost = cost.with_radius(default_truncation_radius(box0, box1))

    def res(box):
        return np.maximum(np.ceil((box[:, 1] - box[:, 0]) * cells_per_unit).astype(int), 2)

    try:
        rho0, rho1 = discretize(desc0, res(box0)), discretize(desc1, res(box1))
        sol = solve_transport(rho0, rho1, cost)
        fld = hessian_field(sol)
        predicted = -0.5 * cost.log_det_hessian + riemann_volume_entropy(rho1, fld)
    except (SolverError, EllipticityError, ValueError) as err:
        log.warning("bridge check: exact solve failed: %s", err)
        rows = [_failed_row(h, err) for h in h_list]
        if on_row is not None:
            for r in rows:
                on_row(r)
        return BridgeSweep(rows, math.nan)

    spread = preimage_spread(sol)
    log.info("bridge check: preimages of a target span up to %.1f source cells", spread)
    kernels: dict = {}

    def kernel(h):
        if h not in kernels:
            kernels[h] = tilt_kernel(sol, h)
        return kernels[h]

    rows = []
    for h in h_list:
        try:
            k = kernel(h)
            f2 = f2h_coupling(k, kernel(2 * h), sol)
            row = BridgeRow(h, lambda_h_ratio(cost, h), mean_lambda_tilde_ratio(k, sol, fld),
                            z_integral(k, rho0), bridge_marginal(k, rho0, rho1).sup_error,
                            f2.relative_entropy, f2.plan.marginal_residual())
        except (EllipticityError, ValueError) as err:
            log.warning("bridge check row h=%g failed: %s", h, err)
            row = _failed_row(h, err)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return BridgeSweep(rows, predicted, meta={"boundary_mass": fld.boundary_mass,
                                              "max_rho1": float(rho1.values.max()),
                                              "preimage_spread_cells": spread})
