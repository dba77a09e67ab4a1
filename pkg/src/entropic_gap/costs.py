"""Translation-invariant strictly convex costs c(x, y) = g(x - y)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class ConvexCost:
    """A cost g with its gradient, full Hessian and Hessian at the origin.

    ``evaluate``, ``gradient`` and ``hessian`` act on arrays of shape
    ``(..., dim)``.  Values beyond ``truncation_radius`` are treated as +inf by
    :func:`cost_matrix` and :func:`lambda_h`.
    """

    kind: str
    dim: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    hessian_at_zero: np.ndarray
    truncation_radius: float = np.inf

    def __call__(self, z) -> np.ndarray:
        return self.evaluate(np.asarray(z, float))

    @property
    def log_det_hessian(self) -> float:
        return float(np.linalg.slogdet(self.hessian_at_zero)[1])

    def with_radius(self, radius: float) -> "ConvexCost":
        return ConvexCost(self.kind, self.dim, self.evaluate, self.gradient, self.hessian,
                          self.hessian_at_zero, float(radius))


def builtin_cost(kind: str, dim: int = 1, matrix=None, truncation_radius: float = np.inf) -> ConvexCost:
    """``scaled-quadratic`` g(z) = z^T M z / 2, or ``cosh-sum`` g(z) = sum(cosh z_i - 1)."""
    if kind == "scaled-quadratic":
        M = np.eye(dim) if matrix is None else np.atleast_2d(np.asarray(matrix, float))
        if M.shape != (dim, dim):
            raise ValueError(f"matrix must be {dim}x{dim}")
        if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
            raise ValueError("scaled-quadratic matrix must be symmetric positive definite")
        M = 0.5 * (M + M.T)
        return ConvexCost(
            kind, dim,
            evaluate=lambda z: 0.5 * np.einsum("...i,ij,...j->...", z, M, z),
            gradient=lambda z: z @ M,
            hessian=lambda z: np.broadcast_to(M, np.shape(z)[:-1] + (dim, dim)),
            hessian_at_zero=M,
            truncation_radius=truncation_radius,
        )
    if kind == "cosh-sum":
        if matrix is not None:
            raise ValueError("cosh-sum takes no matrix")
        return ConvexCost(
            kind, dim,
            # 2 sinh^2(z/2) avoids the cancellation in cosh z - 1 near 0
            evaluate=lambda z: np.sum(2.0 * np.sinh(0.5 * np.asarray(z)) ** 2, axis=-1),
            gradient=lambda z: np.sinh(z),
            hessian=lambda z: np.cosh(z)[..., :, None] * np.eye(dim),
            hessian_at_zero=np.eye(dim),
            truncation_radius=truncation_radius,
        )
    raise ValueError(f"unknown cost kind {kind!r}")


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    source_nodes: np.ndarray
    target_nodes: np.ndarray


def cost_matrix(cost: ConvexCost, xs, ys) -> CostMatrix:
    xs = np.atleast_2d(np.asarray(xs, float))
    ys = np.atleast_2d(np.asarray(ys, float))
    if xs.shape[1] != cost.dim or ys.shape[1] != cost.dim:
        raise ValueError("coordinate dimension does not match the cost")
    diff = xs[:, None, :] - ys[None, :, :]
    entries = np.asarray(cost.evaluate(diff), float)
    if np.isfinite(cost.truncation_radius):
        entries = np.where(np.linalg.norm(diff, axis=-1) > cost.truncation_radius, np.inf, entries)
    return CostMatrix(entries, xs, ys)


def default_truncation_radius(*boxes) -> float:
    """Four times the diameter of the union of the given bounding boxes."""
    b = np.concatenate([np.asarray(bx, float).reshape(-1, 2) for bx in boxes])
    dim = np.asarray(boxes[0]).reshape(-1, 2).shape[0]
    b = b.reshape(-1, dim, 2)
    lo, hi = b[:, :, 0].min(0), b[:, :, 1].max(0)
    return 4.0 * float(np.linalg.norm(hi - lo))


def _quad_resolution(cost: ConvexCost, h: float, radius: float) -> int:
    # cell <= sqrt(h / lambda_max) / 5 resolves the Gaussian of width sqrt(h / lambda)
    lam = float(np.linalg.eigvalsh(cost.hessian_at_zero).max())
    cell = np.sqrt(h / lam) / 5.0
    return int(np.ceil(2 * radius / cell))


def log_lambda_h(cost: ConvexCost, h: float, quad_resolution: int | None = None,
                 radius: float | None = None) -> float:
    """log of the integral of exp(-g(z)/h) over the truncation ball (midpoint rule)."""
    if h <= 0:
        raise ValueError("h must be positive")
    R = cost.truncation_radius if radius is None else float(radius)
    # beyond g >= 40 h the integrand is below e^-40 and is not sampled
    lam_min = float(np.linalg.eigvalsh(cost.hessian_at_zero).min())
    R = min(R, np.sqrt(2 * 40 * h / lam_min))
    n = quad_resolution or _quad_resolution(cost, h, R)
    dx = 2 * R / n
    axis = -R + dx * (np.arange(n) + 0.5)
    if cost.dim == 1:
        z = axis[:, None]
    else:
        mesh = np.meshgrid(*([axis] * cost.dim), indexing="ij")
        z = np.stack([m.ravel() for m in mesh], axis=1)
    inside = np.linalg.norm(z, axis=1) <= R
    expo = -np.asarray(cost.evaluate(z[inside]), float) / h
    edge = np.abs(np.linalg.norm(z[inside], axis=1) - R) <= 1.5 * dx
    if np.any(edge) and np.exp(expo[edge].max()) > 1e-12:
        warnings.warn(f"truncation radius {R:g} too tight for h={h:g}: boundary integrand "
                      f"{np.exp(expo[edge].max()):.2e}", RuntimeWarning, stacklevel=2)
    return float(logsumexp(expo) + cost.dim * np.log(dx))


def lambda_h(cost: ConvexCost, h: float, quad_resolution: int | None = None) -> float:
    return float(np.exp(log_lambda_h(cost, h, quad_resolution)))


def lambda_h_ratio(cost: ConvexCost, h: float, quad_resolution: int | None = None) -> float:
    """Lambda_h sqrt(det Hess g(0)) / (2 pi h)^(d/2); tends to 1 as h -> 0."""
    log_ratio = (log_lambda_h(cost, h, quad_resolution) + 0.5 * cost.log_det_hessian
                 - 0.5 * cost.dim * np.log(2 * np.pi * h))
    return float(np.exp(log_ratio))


def taylor_remainder(cost: ConvexCost, z) -> np.ndarray:
    """r(z) = g(z) - z^T Hess g(0) z / 2."""
    z = np.asarray(z, float)
    if z.ndim == 0:
        z = z[None]
    quad = 0.5 * np.einsum("...i,ij,...j->...", z, cost.hessian_at_zero, z)
    return cost.evaluate(z) - quad
