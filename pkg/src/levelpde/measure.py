"""Superlevel-set measures, their epsilon-averaged smoothing, and profiles.

Everything here is counting-based and exact: the superlevel measure of a node
is the cell measure times the number of interior values at least as large,
and the smoothed variant integrates the resulting step function in closed
form.  No quadrature, no tolerance knobs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidParameterError
from .geometry import BOUNDARY, EXTERIOR, BoundaryData, BoundaryTrace, Grid, build_trace

__all__ = [
    "ScalarField",
    "ProfileFunction",
    "ProfileSpec",
    "LevelStats",
    "StepFunction",
    "superlevel_measures",
    "smoothed_superlevel_average",
    "rhs_plain",
    "rhs_smoothed",
    "increasing_rearrangement",
]


class ScalarField:
    """One value per grid node; the carrier for iterates, forcings, residuals.

    ``values`` spans the full lattice with NaN at Exterior nodes; Interior
    values are always finite, Boundary lattice values are stored when a solve
    or sampler provides them.  ``trace`` optionally carries Dirichlet values
    at the off-lattice boundary crossings so difference operators can be
    applied near curved boundaries.
    """

    def __init__(self, grid: Grid, values: NDArray[np.float64],
                 trace: BoundaryTrace | None = None):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise InvalidParameterError(
                f"field shape {values.shape} does not match grid {grid.shape}"
            )
        self.grid = grid
        self.values = values
        self.trace = trace

    # -- constructors --------------------------------------------------------

    @classmethod
    def zeros(cls, grid: Grid, trace: BoundaryTrace | None = None) -> "ScalarField":
        vals = np.full(grid.shape, np.nan, dtype=np.float64)
        vals[grid.interior_mask] = 0.0
        vals[grid.node_class == BOUNDARY] = 0.0
        return cls(grid, vals, trace)

    @classmethod
    def from_interior(cls, grid: Grid, interior: NDArray[np.float64],
                      trace: BoundaryTrace | None = None) -> "ScalarField":
        interior = np.asarray(interior, dtype=np.float64)
        if interior.shape != (grid.n_interior,):
            raise InvalidParameterError("interior vector has wrong length")
        vals = np.full(grid.shape, np.nan, dtype=np.float64)
        vals.ravel()[grid.interior_flat] = interior
        return cls(grid, vals, trace)

    @classmethod
    def sample(cls, grid: Grid, fn: Callable[[NDArray[np.float64]], object],
               boundary: BoundaryData | None = None) -> "ScalarField":
        """Sample a function of position on the lattice, with its trace.

        When ``boundary`` is omitted the same function provides the Dirichlet
        values at boundary intersection points, which is what sampled exact
        solutions want.
        """
        data = boundary if boundary is not None else BoundaryData.from_callable(fn)
        vals = np.full(grid.shape, np.nan, dtype=np.float64)
        mask = grid.node_class != EXTERIOR
        idx = np.nonzero(mask)
        pts = np.stack(
            [grid.axis_coords[k][idx[k]] for k in range(grid.n)], axis=1
        )
        out = np.asarray(fn(pts), dtype=np.float64)
        if out.shape != (pts.shape[0],):
            out = np.array([fn(p) for p in pts], dtype=np.float64)
        vals[mask] = out
        return cls(grid, vals, build_trace(grid, data))

    # -- views ----------------------------------------------------------------

    @property
    def interior(self) -> NDArray[np.float64]:
        return self.values.ravel()[self.grid.interior_flat]

    def with_interior(self, interior: NDArray[np.float64]) -> "ScalarField":
        vals = self.values.copy()
        vals.ravel()[self.grid.interior_flat] = np.asarray(interior, dtype=np.float64)
        return ScalarField(self.grid, vals, self.trace)

    def with_trace(self, trace: BoundaryTrace | None) -> "ScalarField":
        return ScalarField(self.grid, self.values, trace)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.trace)

    def osc(self) -> float:
        """Oscillation max - min over interior nodes and boundary samples."""
        vals = self.interior
        lo, hi = float(np.min(vals)), float(np.max(vals))
        if self.trace is not None:
            b = self.trace.all_values()
            if b.size:
                lo = min(lo, float(np.min(b)))
                hi = max(hi, float(np.max(b)))
        return hi - lo

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.interior)):
            raise InvalidParameterError("field has non-finite interior values")


def _interior_vector(v: ScalarField, grid: Grid) -> NDArray[np.float64]:
    if not v.grid.matches(grid):
        raise InvalidParameterError("field belongs to a different grid")
    vec = v.interior
    if not np.all(np.isfinite(vec)):
        raise InvalidParameterError("field has non-finite interior values")
    return vec


# ---------------------------------------------------------------------------
# Profile function g


class ProfileFunction:
    """The continuous profile g on [0, |Omega|_h].

    Arguments are clamped into the domain before evaluation, so discretization
    overshoot can never query g outside its range.
    """

    def __init__(self, kind: str, domain_max: float,
                 fn: Callable[[NDArray[np.float64]], NDArray[np.float64]],
                 abs_bound: float, params: dict):
        if domain_max <= 0:
            raise InvalidParameterError("profile domain_max must be positive")
        self.kind = kind
        self.domain_max = float(domain_max)
        self._fn = fn
        self._abs_bound = float(abs_bound)
        self.params = params

    @classmethod
    def linear(cls, a: float, b: float, domain_max: float) -> "ProfileFunction":
        """g(t) = a*t + b."""
        a, b = float(a), float(b)
        bound = max(abs(b), abs(a * domain_max + b))
        return cls("linear", domain_max, lambda t: a * t + b, bound,
                   {"a": a, "b": b})

    @classmethod
    def from_table(cls, knots: Sequence[float], values: Sequence[float],
                   domain_max: float) -> "ProfileFunction":
        kn = np.asarray(list(knots), dtype=np.float64)
        va = np.asarray(list(values), dtype=np.float64)
        if kn.size < 2 or kn.size != va.size:
            raise InvalidParameterError("table needs matching knots/values, >= 2 each")
        if not np.all(np.diff(kn) > 0):
            raise InvalidParameterError("table knots must be strictly increasing")
        if kn[0] > 0 or kn[-1] < domain_max * (1 - 1e-12):
            raise InvalidParameterError(
                f"table knots must span [0, {domain_max}]"
            )
        bound = float(np.max(np.abs(va)))
        return cls("table", domain_max,
                   lambda t: np.interp(t, kn, va), bound,
                   {"knots": kn, "values": va})

    def __call__(self, t) -> NDArray[np.float64]:
        arr = np.asarray(t, dtype=np.float64)
        clamped = np.clip(arr, 0.0, self.domain_max)
        return self._fn(clamped)

    def abs_bound(self) -> float:
        """max |g| over [0, domain_max]; exact for the built-in kinds."""
        return self._abs_bound

    def max_slope(self) -> float:
        """Lipschitz constant of g on its domain; exact for the built-in kinds."""
        if self.kind == "linear":
            return abs(self.params["a"])
        kn, va = self.params["knots"], self.params["values"]
        return float(np.max(np.abs(np.diff(va) / np.diff(kn))))

    def negative_on_range(self) -> bool:
        """True when g < 0 on (0, |Omega|]; gates the flat-region exclusion."""
        if self.kind == "linear":
            a, b = self.params["a"], self.params["b"]
            return b <= 0 and a * self.domain_max + b < 0
        va = self.params["values"]
        return bool(np.all(va[1:] < 0) and va[0] <= 0)


@dataclass(frozen=True)
class ProfileSpec:
    """Grid-independent description of g, bound to a domain measure later."""

    kind: str = "linear"
    a: float = -1.0
    b: float = 0.0
    knots: tuple[float, ...] = ()
    values: tuple[float, ...] = ()

    def bind(self, domain_max: float) -> ProfileFunction:
        if self.kind == "linear":
            return ProfileFunction.linear(self.a, self.b, domain_max)
        if self.kind == "table":
            return ProfileFunction.from_table(self.knots, self.values, domain_max)
        raise InvalidParameterError(f"unknown profile kind {self.kind!r}")


# ---------------------------------------------------------------------------
# Level statistics


class LevelStats:
    """Order statistics of a field: G(t) = h^n * #{j : v_j >= t} and exact
    integrals of the step function G over intervals.

    G is right-continuous, nonincreasing, G(-inf) = |Omega|_h, G(+inf) = 0.
    """

    def __init__(self, values: NDArray[np.float64], cell: float):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise InvalidParameterError("LevelStats needs a nonempty 1-d value array")
        if cell <= 0:
            raise InvalidParameterError("cell measure must be positive")
        self.cell = float(cell)
        self._asc = np.sort(values)
        # prefix[k] = sum of the k smallest values
        self._prefix = np.concatenate(([0.0], np.cumsum(self._asc)))

    @classmethod
    def from_field(cls, v: ScalarField, grid: Grid) -> "LevelStats":
        return cls(_interior_vector(v, grid), grid.cell)

    @property
    def size(self) -> int:
        return int(self._asc.size)

    @property
    def sorted_desc(self) -> NDArray[np.float64]:
        return self._asc[::-1]

    @property
    def total(self) -> float:
        """Discrete |Omega| seen by this field."""
        return self.cell * self.size

    def count_ge(self, t) -> NDArray[np.int64]:
        t = np.asarray(t, dtype=np.float64)
        return (self.size - np.searchsorted(self._asc, t, side="left")).astype(np.int64)

    def measure_ge(self, t) -> NDArray[np.float64]:
        """G(t) in logarithmic time per query."""
        return self.cell * self.count_ge(t)

    def integral(self, a: float, b: float) -> float:
        """Exact integral of G over [a, b] (fsum over the step pieces)."""
        if not b >= a:
            raise InvalidParameterError("integral needs b >= a")
        width = b - a
        terms = np.clip(self._asc - a, 0.0, width)
        return self.cell * math.fsum(terms.tolist())

    def window_average(self, b: NDArray[np.float64], eps: float) -> NDArray[np.float64]:
        """(1/eps) * integral of G over [b - eps, b], vectorized over b.

        Computed as measure_ge(b) plus the strictly-inside-window part, so the
        result is bitwise >= measure_ge(b), <= the discrete domain measure,
        and collapses to measure_ge(b) exactly when the window contains no
        further values.  The inside-window part goes through prefix sums, so
        it carries summation rounding of order machine epsilon times the
        magnitude of the values; for well-separated values it is exact.
        """
        if eps <= 0:
            raise InvalidParameterError("smoothing width eps must be positive")
        b = np.asarray(b, dtype=np.float64)
        a = b - eps
        hi = np.searchsorted(self._asc, b, side="left")
        lo = np.searchsorted(self._asc, a, side="right")
        # When eps is below the ulp of b the window degenerates to [b, b];
        # clamp so the strictly-inside range [lo, hi) stays well formed.
        lo = np.minimum(lo, hi)
        base = self.cell * (self.size - hi)
        inner = (self._prefix[hi] - self._prefix[lo]) - (hi - lo) * a
        inner = np.maximum(inner, 0.0)
        out = base + (self.cell / eps) * inner
        return np.minimum(out, self.total)


# ---------------------------------------------------------------------------
# Operations


def superlevel_measures(v: ScalarField, grid: Grid) -> ScalarField:
    """Per node, the cell measure times the count of values >= its own.

    Ties are included (the superlevel set is closed), so equal values receive
    equal measures and every measure lies in [h^n, |Omega|_h].  Runs in
    O(N log N) by sorting once.
    """
    vec = _interior_vector(v, grid)
    stats = LevelStats(vec, grid.cell)
    mu = stats.measure_ge(vec)
    return ScalarField.from_interior(grid, mu)


def smoothed_superlevel_average(v: ScalarField, grid: Grid, eps: float) -> ScalarField:
    """Per node, the exact average of G over the value window [v(x)-eps, v(x)].

    G is piecewise constant between sorted values, so the integral is a
    closed-form summation.  The result is bounded below by the plain
    superlevel measure, equals it once eps is smaller than the gap to the
    nearest strictly smaller value, and never exceeds the discrete |Omega|.
    """
    if eps <= 0:
        raise InvalidParameterError("smoothing width eps must be positive")
    vec = _interior_vector(v, grid)
    stats = LevelStats(vec, grid.cell)
    return ScalarField.from_interior(grid, stats.window_average(vec, eps))


def rhs_plain(v: ScalarField, grid: Grid, g: ProfileFunction) -> ScalarField:
    """Frozen right-hand side g(superlevel measure), clamped into g's domain."""
    mu = superlevel_measures(v, grid)
    return ScalarField.from_interior(grid, g(mu.interior))


def rhs_smoothed(v: ScalarField, grid: Grid, g: ProfileFunction,
                 eps: float) -> ScalarField:
    """Smoothed right-hand side g(window average of the superlevel measure)."""
    s = smoothed_superlevel_average(v, grid, eps)
    return ScalarField.from_interior(grid, g(s.interior))


@dataclass
class StepFunction:
    """Right-open step function on [0, total]: value[k] on [k*cell, (k+1)*cell).

    The last cell is closed so the function is defined on all of [0, total].
    """

    cell: float
    values: NDArray[np.float64] = field(repr=False)

    @property
    def total(self) -> float:
        return self.cell * self.values.size

    def __call__(self, t) -> NDArray[np.float64]:
        t = np.asarray(t, dtype=np.float64)
        k = np.clip(np.floor(t / self.cell).astype(np.int64), 0,
                    self.values.size - 1)
        return self.values[k]


def increasing_rearrangement(v: ScalarField, grid: Grid) -> StepFunction:
    """The nondecreasing step rearrangement of the field on [0, |Omega|_h].

    Takes the sorted-ascending interior values on consecutive cells of width
    h^n.  Diagnostic output only.
    """
    vec = _interior_vector(v, grid)
    return StepFunction(grid.cell, np.sort(vec))
