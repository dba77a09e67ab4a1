"""Experiment configuration: flat ``dotted.key = <JSON value>`` text files.

Example::

    problem.kind = "euclid"
    density0.kind = "uniform-box"
    density0.bounds = [[0, 1]]
    density1.kind = "uniform-box"
    density1.bounds = [[0, 2]]
    cost.kind = "scaled-quadratic"
    sweep.h = [0.04, 0.02, 0.01, 0.005]

Lines starting with ``#`` and blank lines are ignored.  Dotted keys build
nested tables, so ``density1.base.kind`` describes the base density of an
``exp-affine`` simplex density.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .costs import ConvexCost, builtin_cost
from .density_grid import DensityDescriptor
from .dirichlet import SUPPORTED_N, SimplexDescriptor
from .entropic import ResolutionRule

PROBLEMS = ("euclid", "dirichlet", "bridge")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = f"{path or '<config>'}:{line}: " if line is not None else f"{path or '<config>'}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    density0: DensityDescriptor | SimplexDescriptor
    density1: DensityDescriptor | SimplexDescriptor
    h_list: tuple
    cost: ConvexCost | None = None
    rule: ResolutionRule = ResolutionRule()
    reference_resolution: int = 400
    max_resolution: int | None = None
    cells_per_unit: int = 400
    model: str = "sqrt"
    tol: float = 1e-9
    max_iter: int = 100_000
    output_path: str | None = None
    source: dict = field(default_factory=dict, repr=False)


def parse_lines(text: str, path=None) -> tuple[dict, dict]:
    """Return (nested table, dotted key -> line number)."""
    table: dict = {}
    lines: dict = {}
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError("expected 'key = value'", num, path)
        if any(not part for part in key.split(".")):
            raise ConfigError(f"malformed key {key!r}", num, path)
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as err:
            raise ConfigError(f"value of {key!r} is not valid JSON: {err.msg}", num, path) from None
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", num, path)
        node = table
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} extends a scalar value", num, path)
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"key {key!r} overwrites a table", num, path)
        node[parts[-1]] = parsed
        lines[key] = num
    return table, lines


class _Reader:
    def __init__(self, table, lines, path):
        self.table, self.lines, self.path = table, lines, path

    def line_of(self, prefix: str):
        if prefix in self.lines:
            return self.lines[prefix]
        found = [n for k, n in self.lines.items() if k.startswith(prefix + ".")]
        return min(found) if found else None

    def fail(self, message, key):
        raise ConfigError(message, self.line_of(key), self.path)

    def get(self, key, default=..., kind=None):
        node = self.table
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is ...:
                    self.fail(f"missing key {key!r}", key)
                return default
            node = node[part]
        if kind is not None:
            try:
                if kind is int and (isinstance(node, bool) or int(node) != node):
                    raise TypeError
                node = kind(node)
            except (TypeError, ValueError):
                self.fail(f"{key} must be {kind.__name__}", key)
        return node


def _positive(r: _Reader, key, value):
    if not (value > 0 and math.isfinite(value)):
        r.fail(f"{key} must be positive", key)
    return value


def _density(r: _Reader, key, simplex: bool):
    spec = r.get(key)
    if not isinstance(spec, dict) or "kind" not in spec:
        r.fail(f"{key} needs a kind", key)
    try:
        if simplex:
            desc = SimplexDescriptor.from_dict(spec)
            n = desc.n
        else:
            desc = DensityDescriptor.from_dict(spec)
            desc.support_box()
    except KeyError as err:
        r.fail(f"{key}: missing parameter {err.args[0]!r}", key)
    except (TypeError, ValueError) as err:
        r.fail(f"{key}: {err}", key)
    if simplex and n not in SUPPORTED_N:
        r.fail(f"{key}: n = {n} is not supported (supported: {', '.join(map(str, SUPPORTED_N))})", key)
    return desc


def _cost(r: _Reader, dim: int) -> ConvexCost:
    kind = r.get("cost.kind", "scaled-quadratic", str)
    cdim = r.get("cost.dim", dim, int)
    if cdim != dim:
        r.fail(f"cost.dim = {cdim} does not match the density dimension {dim}", "cost.dim")
    radius = r.get("cost.truncation_radius", math.inf, float)
    try:
        return builtin_cost(kind, cdim, r.get("cost.matrix", None), radius)
    except ValueError as err:
        r.fail(f"cost: {err}", "cost")


def build_config(table: dict, lines: dict, path=None) -> ExperimentConfig:
    r = _Reader(table, lines, path)
    problem = r.get("problem.kind", kind=str)
    if problem not in PROBLEMS:
        r.fail(f"problem.kind must be one of {', '.join(PROBLEMS)}", "problem.kind")
    simplex = problem == "dirichlet"
    d0 = _density(r, "density0", simplex)
    d1 = _density(r, "density1", simplex)
    if simplex:
        if d0.n != d1.n:
            r.fail("density0 and density1 live on simplices of different dimension", "density1")
        cost = None
    else:
        if d0.dim != d1.dim:
            r.fail("density0 and density1 have different dimensions", "density1")
        cost = _cost(r, d0.dim)

    h = r.get("sweep.h")
    if not isinstance(h, list) or not h or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                    for x in h):
        r.fail("sweep.h must be a nonempty list of numbers", "sweep.h")
    h = tuple(float(x) for x in h)
    if any(not (x > 0 and math.isfinite(x)) for x in h):
        r.fail("sweep.h entries must be positive", "sweep.h")
    if any(b >= a for a, b in zip(h, h[1:])):
        r.fail("sweep.h must be strictly decreasing", "sweep.h")

    rule = ResolutionRule(_positive(r, "sweep.cells_per_sqrt_h", r.get("sweep.cells_per_sqrt_h", 5.0, float)),
                          _positive(r, "sweep.min_resolution", r.get("sweep.min_resolution", 8, int)))
    max_res = r.get("sweep.max_resolution", None)
    if max_res is not None:
        max_res = _positive(r, "sweep.max_resolution", r.get("sweep.max_resolution", kind=int))
    model = r.get("sweep.model", "sqrt", str)
    if model not in ("sqrt", "affine"):
        r.fail("sweep.model must be 'sqrt' or 'affine'", "sweep.model")
    default_ref = 2000 if simplex else 400
    return ExperimentConfig(
        problem=problem, density0=d0, density1=d1, h_list=h, cost=cost, rule=rule,
        reference_resolution=_positive(r, "sweep.reference_resolution",
                                       r.get("sweep.reference_resolution", default_ref, int)),
        max_resolution=max_res,
        cells_per_unit=_positive(r, "grid.cells_per_unit", r.get("grid.cells_per_unit", 400, int)),
        model=model,
        tol=_positive(r, "solver.tol", r.get("solver.tol", 1e-9, float)),
        max_iter=_positive(r, "solver.max_iter", r.get("solver.max_iter", 100_000, int)),
        output_path=r.get("output.path", None),
        source=table,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", path=path) from None
    table, lines = parse_lines(text, path)
    return build_config(table, lines, path)


def loads_config(text: str) -> ExperimentConfig:
    table, lines = parse_lines(text)
    return build_config(table, lines)
