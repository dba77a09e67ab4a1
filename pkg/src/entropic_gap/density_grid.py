"""Discretized probability densities on regular midpoint grids.

A :class:`GridDensity` stores one value per cell of a regular grid in one or
two dimensions.  All integrals are midpoint-rule sums, which are exact for
piecewise-constant densities and second order for smooth ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import erf


class SupportError(ValueError):
    """A density charges a cell where the reference measure vanishes."""


@dataclass(frozen=True)
class GridDensity:
    """Density sampled at the midpoints of a regular grid.

    ``nodes`` has shape ``(N, dim)`` in C order over ``shape``; ``volumes`` and
    ``values`` have shape ``(N,)``.
    """

    nodes: np.ndarray
    volumes: np.ndarray
    values: np.ndarray
    shape: tuple[int, ...]
    box: tuple[tuple[float, float], ...]

    def __post_init__(self):
        for name in ("nodes", "volumes", "values"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != len(self.shape):
            raise ValueError("nodes must have shape (N, dim)")
        if np.any(self.volumes <= 0):
            raise ValueError("cell volumes must be positive")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite and nonnegative")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / n for (lo, hi), n in zip(self.box, self.shape)])

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.volumes

    @property
    def support(self) -> np.ndarray:
        return self.values > 0

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def with_values(self, values) -> "GridDensity":
        return GridDensity(self.nodes, self.volumes, np.asarray(values, float), self.shape, self.box)

    def normalized(self) -> "GridDensity":
        mass = self.total_mass()
        if mass <= 0:
            raise ValueError("density has zero mass on the grid")
        return self.with_values(self.values / mass)

    def grid_index(self, points) -> np.ndarray:
        """Flat index of the cell containing each point (clipped to the grid)."""
        pts = np.atleast_2d(np.asarray(points, float))
        idx = np.zeros(len(pts), dtype=int)
        stride = 1
        for k in reversed(range(self.dim)):
            lo, hi = self.box[k]
            n = self.shape[k]
            ik = np.floor((pts[:, k] - lo) / (hi - lo) * n).astype(int)
            idx += np.clip(ik, 0, n - 1) * stride
            stride *= n
        return idx

    def contains(self, points) -> np.ndarray:
        """True where a point lies in a cell of positive density."""
        pts = np.atleast_2d(np.asarray(points, float))
        inside = np.ones(len(pts), dtype=bool)
        for k, (lo, hi) in enumerate(self.box):
            inside &= (pts[:, k] >= lo) & (pts[:, k] <= hi)
        out = np.zeros(len(pts), dtype=bool)
        out[inside] = self.support[self.grid_index(pts[inside])]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{k}" for k in range(self.dim)] + ["volume", "value"])
            for node, vol, val in zip(self.nodes, self.volumes, self.values):
                writer.writerow([f"{c:.12g}" for c in node] + [f"{vol:.12g}", f"{val:.12g}"])


def regular_grid(box: Sequence[Sequence[float]], resolution) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Cell midpoints and volumes of a regular grid over ``box``."""
    box = [tuple(map(float, b)) for b in box]
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (len(box),))
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2")
    axes = []
    for (lo, hi), n in zip(box, res):
        if not hi > lo:
            raise ValueError(f"degenerate box side [{lo}, {hi}]")
        dx = (hi - lo) / n
        axes.append(lo + dx * (np.arange(n) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    cell = np.prod([(hi - lo) / n for (lo, hi), n in zip(box, res)])
    return nodes, np.full(len(nodes), cell), tuple(int(n) for n in res)


@dataclass(frozen=True)
class DensityDescriptor:
    """Recipe for a compactly supported test density.

    kinds and their parameters:

    * ``uniform-box``: ``bounds`` = [[lo, hi], ...]
    * ``truncated-gaussian``: ``mean``, ``var`` (scalar or per axis), ``bounds``
    * ``smooth-bump``: ``center``, ``radius``; density exp(-1/(1-|x-c|^2/r^2))
    * ``mixture``: ``components`` (list of descriptors) and ``weights``
    """

    kind: str
    params: dict = field(default_factory=dict)

    KINDS = ("uniform-box", "truncated-gaussian", "smooth-bump", "mixture")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.kind == "truncated-gaussian":
            if np.any(np.asarray(self.params["var"], float) <= 0):
                raise ValueError("truncated-gaussian variance must be positive")
        if self.kind == "smooth-bump" and float(self.params["radius"]) <= 0:
            raise ValueError("smooth-bump radius must be positive")
        if self.kind == "mixture":
            comps = self.params["components"]
            weights = np.asarray(self.params["weights"], float)
            if len(comps) != len(weights) or np.any(weights < 0) or weights.sum() <= 0:
                raise ValueError("mixture needs one nonnegative weight per component")

    @classmethod
    def from_dict(cls, spec: dict) -> "DensityDescriptor":
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "mixture":
            spec["components"] = [
                c if isinstance(c, DensityDescriptor) else cls.from_dict(c) for c in spec["components"]
            ]
        return cls(kind, spec)

    @property
    def dim(self) -> int:
        if self.kind in ("uniform-box", "truncated-gaussian"):
            return len(self.params["bounds"])
        if self.kind == "smooth-bump":
            return len(np.atleast_1d(self.params["center"]))
        return self.params["components"][0].dim

    def support_box(self) -> np.ndarray:
        """Bounding box of the support, shape (dim, 2)."""
        if self.kind in ("uniform-box", "truncated-gaussian"):
            return np.asarray(self.params["bounds"], float).reshape(-1, 2)
        if self.kind == "smooth-bump":
            c = np.atleast_1d(np.asarray(self.params["center"], float))
            r = float(self.params["radius"])
            return np.stack([c - r, c + r], axis=1)
        boxes = np.stack([c.support_box() for c in self.params["components"]])
        return np.stack([boxes[:, :, 0].min(0), boxes[:, :, 1].max(0)], axis=1)

    def __call__(self, x) -> np.ndarray:
        """Unnormalized density at points ``x`` of shape (N, dim)."""
        x = np.atleast_2d(np.asarray(x, float))
        p = self.params
        if self.kind == "uniform-box":
            b = self.support_box()
            return np.all((x >= b[:, 0]) & (x <= b[:, 1]), axis=1).astype(float)
        if self.kind == "truncated-gaussian":
            b = self.support_box()
            mean = np.broadcast_to(np.asarray(p["mean"], float), (self.dim,))
            var = np.broadcast_to(np.asarray(p["var"], float), (self.dim,))
            inside = np.all((x >= b[:, 0]) & (x <= b[:, 1]), axis=1)
            # per-axis truncated normal, normalized on its own box
            sd = np.sqrt(var)
            z = (b - mean[:, None]) / (sd[:, None] * np.sqrt(2.0))
            mass = 0.5 * (erf(z[:, 1]) - erf(z[:, 0]))
            dens = np.exp(-0.5 * ((x - mean) ** 2 / var).sum(axis=1))
            dens /= np.prod(np.sqrt(2 * np.pi * var) * mass)
            return np.where(inside, dens, 0.0)
        if self.kind == "smooth-bump":
            c = np.atleast_1d(np.asarray(p["center"], float))
            r2 = ((x - c) ** 2).sum(axis=1) / float(p["radius"]) ** 2
            out = np.zeros(len(x))
            inside = r2 < 1
            out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
            return out
        weights = np.asarray(p["weights"], float)
        weights = weights / weights.sum()
        return sum(w * c(x) for w, c in zip(weights, p["components"]))


def discretize(desc: DensityDescriptor, resolution, box=None) -> GridDensity:
    """Sample ``desc`` at the cell midpoints of a regular grid and normalize."""
    sbox = desc.support_box()
    box = sbox if box is None else np.asarray(box, float).reshape(-1, 2)
    if len(box) != desc.dim:
        raise ValueError("box dimension does not match the descriptor")
    tol = 1e-12 * max(1.0, float(np.abs(box).max()))
    if np.any(sbox[:, 0] < box[:, 0] - tol) or np.any(sbox[:, 1] > box[:, 1] + tol):
        raise ValueError("descriptor support exceeds the grid box")
    nodes, volumes, shape = regular_grid(box, resolution)
    dens = GridDensity(nodes, volumes, desc(nodes), shape, tuple(map(tuple, box)))
    return dens.normalized()


def _xlogy(x, y):
    out = np.zeros_like(x, dtype=float)
    pos = x > 0
    out[pos] = x[pos] * np.log(y[pos])
    return out


def entropy(rho: GridDensity) -> float:
    """Midpoint-rule value of the integral of rho log rho (0 log 0 = 0)."""
    return float(np.sum(_xlogy(rho.values, rho.values) * rho.volumes))


def relative_entropy(rho: GridDensity, mu) -> float:
    """Midpoint-rule relative entropy of ``rho`` against a density or measure.

    ``mu`` is either a GridDensity on the same nodes or an array of density
    values there; it need not be normalized, so the result may be negative.
    """
    mu_vals = mu.values if isinstance(mu, GridDensity) else np.asarray(mu, float)
    if mu_vals.shape != rho.values.shape:
        raise ValueError("rho and mu must share the grid")
    if np.any((rho.values > 0) & ~(mu_vals > 0)):
        raise SupportError("rho charges a cell where mu vanishes")
    pos = rho.values > 0
    return float(np.sum(rho.values[pos] * np.log(rho.values[pos] / mu_vals[pos]) * rho.volumes[pos]))


def interior_mask(rho: GridDensity, margin) -> np.ndarray:
    """Support cells whose box neighbourhood of half-width ``margin`` stays in the support.

    ``margin`` is a length (scalar or per axis); cells outside the grid count
    as outside the support.
    """
    margin = np.broadcast_to(np.asarray(margin, float), (rho.dim,))
    radius = np.ceil(margin / rho.spacing - 1e-9).astype(int)
    supp = rho.support.reshape(rho.shape)
    if np.all(radius <= 0):
        return supp.ravel().copy()
    structure = np.ones(tuple(2 * r + 1 for r in radius), dtype=bool)
    return ndimage.binary_erosion(supp, structure=structure, border_value=0).ravel()
