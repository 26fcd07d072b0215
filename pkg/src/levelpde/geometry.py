"""Masked uniform grids over boxes, balls and annuli with Dirichlet data.

The domain is represented node-centered: every lattice node is classified
Interior, Boundary or Exterior.  Boxes carry genuine Boundary lattice nodes on
their faces; balls and annuli have no on-lattice boundary, so each stencil arm
that leaves the domain records the fractional distance theta in (0, 1] to the
true boundary (Shortley-Weller offsets).  Grids are immutable after
construction and all queries are pure, so they are safe to share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidGridError, InvalidParameterError

INTERIOR = 0
BOUNDARY = 1
EXTERIOR = 2

_CLASS_NAMES = {INTERIOR: "Interior", BOUNDARY: "Boundary", EXTERIOR: "Exterior"}
_CLASS_CODES = {v: k for k, v in _CLASS_NAMES.items()}

# Relative slack when checking that h divides a box side.
_DIVIDE_RTOL = 1e-9


@dataclass(frozen=True)
class BoxDescriptor:
    """Axis-aligned box given as one (lo, hi) interval per axis."""

    bounds: tuple[tuple[float, float], ...]

    @property
    def n(self) -> int:
        return len(self.bounds)

    @property
    def center(self) -> tuple[float, ...]:
        return tuple(0.5 * (lo + hi) for lo, hi in self.bounds)


@dataclass(frozen=True)
class BallDescriptor:
    center: tuple[float, ...]
    radius: float

    @property
    def n(self) -> int:
        return len(self.center)


@dataclass(frozen=True)
class AnnulusDescriptor:
    """Concentric spherical shell r_inner < |x - center| < r_outer."""

    center: tuple[float, ...]
    r_inner: float
    r_outer: float

    @property
    def n(self) -> int:
        return len(self.center)


Descriptor = BoxDescriptor | BallDescriptor | AnnulusDescriptor


class Grid:
    """Uniform lattice with node classification and boundary offsets.

    Attributes
    ----------
    n : spatial dimension (1, 2 or 3)
    h : lattice spacing, identical along every axis
    origin : coordinate of node index (0, ..., 0)
    shape : node counts per axis
    node_class : int8 array over the full lattice (INTERIOR/BOUNDARY/EXTERIOR)
    descriptor : the continuum domain this lattice discretizes
    """

    def __init__(self, descriptor: Descriptor, h: float, origin: tuple[float, ...],
                 shape: tuple[int, ...], node_class: NDArray[np.int8]):
        self.descriptor = descriptor
        self.n = descriptor.n
        self.h = float(h)
        self.origin = tuple(float(o) for o in origin)
        self.shape = tuple(int(s) for s in shape)
        self.node_class = node_class
        node_class.setflags(write=False)

        self.axis_coords: list[NDArray[np.float64]] = [
            self.origin[k] + self.h * np.arange(self.shape[k], dtype=np.float64)
            for k in range(self.n)
        ]

        self.interior_mask = node_class == INTERIOR
        self.interior_flat = np.flatnonzero(self.interior_mask.ravel())
        self.n_interior = int(self.interior_flat.size)
        if self.n_interior == 0:
            raise InvalidGridError("grid has no interior nodes")

        # Ordinal of each lattice node in the interior numbering; -1 elsewhere.
        pos = np.full(int(np.prod(self.shape)), -1, dtype=np.int64)
        pos[self.interior_flat] = np.arange(self.n_interior, dtype=np.int64)
        self._ordinal_flat = pos

        idx = np.unravel_index(self.interior_flat, self.shape)
        self.interior_index = tuple(a.astype(np.int64) for a in idx)
        self.interior_coords = np.stack(
            [self.axis_coords[k][idx[k]] for k in range(self.n)], axis=1
        )
        self._plan: _StencilPlan | None = None

    # -- basic queries -----------------------------------------------------

    @property
    def cell(self) -> float:
        """Cell measure h**n."""
        return self.h ** self.n

    def matches(self, other: "Grid") -> bool:
        return (
            self is other
            or (
                self.descriptor == other.descriptor
                and self.n == other.n
                and self.h == other.h
                and self.shape == other.shape
                and self.origin == other.origin
            )
        )

    def node_coords(self, index: Sequence[int]) -> NDArray[np.float64]:
        return np.array(
            [self.axis_coords[k][index[k]] for k in range(self.n)], dtype=np.float64
        )

    def ordinal(self, index: Sequence[int]) -> int:
        """Interior ordinal of a multi-index, or -1."""
        flat = int(np.ravel_multi_index(tuple(int(i) for i in index), self.shape))
        return int(self._ordinal_flat[flat])

    def class_name(self, index: Sequence[int]) -> str:
        return _CLASS_NAMES[int(self.node_class[tuple(int(i) for i in index)])]

    def distance_to_boundary(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Euclidean distance from each point to the continuum boundary."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = self.descriptor
        if isinstance(d, BoxDescriptor):
            per_axis = [
                np.minimum(pts[:, k] - lo, hi - pts[:, k])
                for k, (lo, hi) in enumerate(d.bounds)
            ]
            return np.min(per_axis, axis=0)
        center = np.asarray(d.center, dtype=np.float64)
        s = np.linalg.norm(pts - center, axis=1)
        if isinstance(d, BallDescriptor):
            return d.radius - s
        return np.minimum(d.r_outer - s, s - d.r_inner)

    @property
    def plan(self) -> "_StencilPlan":
        if self._plan is None:
            self._plan = _build_plan(self)
        return self._plan

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"Grid(n={self.n}, h={self.h}, shape={self.shape}, "
            f"interior={self.n_interior}, descriptor={self.descriptor})"
        )


class _StencilPlan:
    """Precomputed arm and diagonal connectivity for the interior nodes.

    For every interior node and arm (axis a, direction s in {+1, -1}):

    * ``nbr[(a, s)]``        interior ordinal of the arm end, -1 otherwise
    * ``theta[(a, s)]``      fractional arm length in (0, 1]; 1.0 when the arm
                             ends on a lattice node
    * ``arm_lattice[(a, s)]`` True when a non-interior arm end is a Boundary
                             lattice node (boxes), so its value may also be
                             used by diagonal-deficient mixed stencils
    * ``arm_point[(a, s)]``  coordinates of the arm end where non-interior
                             (boundary crossing or boundary node), NaN rows
                             where the arm stays interior

    and for every axis pair (a, b), a < b, and sign pair (sa, sb):

    * ``diag[...]``          interior ordinal of the diagonal node, -1 otherwise
    * ``diag_known[...]``    diagonal node is a Boundary lattice node
    * ``diag_point[...]``    its coordinates where known and not interior
    """

    def __init__(self) -> None:
        self.nbr: dict[tuple[int, int], NDArray[np.int64]] = {}
        self.theta: dict[tuple[int, int], NDArray[np.float64]] = {}
        self.arm_lattice: dict[tuple[int, int], NDArray[np.bool_]] = {}
        self.arm_point: dict[tuple[int, int], NDArray[np.float64]] = {}
        self.diag: dict[tuple[int, int, int, int], NDArray[np.int64]] = {}
        self.diag_known: dict[tuple[int, int, int, int], NDArray[np.bool_]] = {}
        self.diag_point: dict[tuple[int, int, int, int], NDArray[np.float64]] = {}

    def arm_keys(self, n: int) -> list[tuple[int, int]]:
        return [(a, s) for a in range(n) for s in (+1, -1)]

    def pair_keys(self, n: int) -> list[tuple[int, int, int, int]]:
        return [
            (a, b, sa, sb)
            for a in range(n)
            for b in range(a + 1, n)
            for sa in (+1, -1)
            for sb in (+1, -1)
        ]


def _crossing_fraction(descriptor: Descriptor, coords: NDArray[np.float64],
                       axis: int, sign: int, h: float,
                       nbr_coords: NDArray[np.float64]) -> NDArray[np.float64]:
    """Fractional distance theta in (0,1] to the boundary along one arm.

    ``coords`` are interior nodes whose arm end is not a domain node; for
    boxes this never happens (faces are lattice nodes), so only spheres are
    handled.
    """
    if isinstance(descriptor, BoxDescriptor):
        raise AssertionError("box arms always end on lattice nodes")
    center = np.asarray(descriptor.center, dtype=np.float64)
    d = coords - center
    rho2 = np.sum(d * d, axis=1) - d[:, axis] ** 2
    if isinstance(descriptor, BallDescriptor):
        r = descriptor.radius
        t = np.sqrt(np.maximum(r * r - rho2, 0.0)) - sign * d[:, axis]
    else:
        # Annulus: the arm leaves through whichever sphere the neighbor is
        # beyond.
        s_nbr = np.linalg.norm(nbr_coords - center, axis=1)
        outer = s_nbr >= descriptor.r_outer
        t = np.empty(coords.shape[0], dtype=np.float64)
        r_out = descriptor.r_outer
        t_out = np.sqrt(np.maximum(r_out * r_out - rho2, 0.0)) - sign * d[:, axis]
        r_in = descriptor.r_inner
        t_in = -sign * d[:, axis] - np.sqrt(np.maximum(r_in * r_in - rho2, 0.0))
        t = np.where(outer, t_out, t_in)
    theta = t / h
    return np.clip(theta, 1e-12, 1.0)


def _build_plan(grid: Grid) -> _StencilPlan:
    plan = _StencilPlan()
    shape = grid.shape
    n = grid.n
    node_class = grid.node_class
    ordinal = grid._ordinal_flat
    idx = grid.interior_index
    coords = grid.interior_coords
    is_box = isinstance(grid.descriptor, BoxDescriptor)

    def shifted(arrays: tuple[NDArray[np.int64], ...], shifts: Sequence[int]):
        """Shifted multi-index, validity mask, flat index (0 where invalid)."""
        out = []
        valid = np.ones(grid.n_interior, dtype=bool)
        for k in range(n):
            a = arrays[k] + shifts[k]
            valid &= (a >= 0) & (a < shape[k])
            out.append(a)
        safe = [np.where(valid, a, 0) for a in out]
        flat = np.ravel_multi_index(tuple(safe), shape)
        return out, valid, flat

    cls_flat = node_class.ravel()

    for a in range(n):
        for s in (+1, -1):
            shifts = [0] * n
            shifts[a] = s
            shifted_idx, valid, flat = shifted(idx, shifts)
            nbr = np.where(valid, ordinal[flat], -1).astype(np.int64)
            is_bnd_node = valid & (cls_flat[flat] == BOUNDARY)

            theta = np.ones(grid.n_interior, dtype=np.float64)
            point = np.full((grid.n_interior, n), np.nan, dtype=np.float64)

            if is_box:
                # Arm ends are always lattice nodes; record boundary ones.
                sel = nbr < 0
                if np.any(sel & ~is_bnd_node):
                    raise InvalidGridError("box interior node with exterior arm")
                if np.any(sel):
                    pt = np.stack(
                        [grid.axis_coords[k][shifted_idx[k][sel]] for k in range(n)],
                        axis=1,
                    )
                    point[sel] = pt
            else:
                sel = nbr < 0
                if np.any(sel):
                    nbr_pt = coords[sel].copy()
                    nbr_pt[:, a] += s * grid.h
                    th = _crossing_fraction(
                        grid.descriptor, coords[sel], a, s, grid.h, nbr_pt
                    )
                    theta[sel] = th
                    pt = coords[sel].copy()
                    pt[:, a] += s * th * grid.h
                    point[sel] = pt
                is_bnd_node = np.zeros(grid.n_interior, dtype=bool)

            plan.nbr[(a, s)] = nbr
            plan.theta[(a, s)] = theta
            plan.arm_lattice[(a, s)] = is_bnd_node
            plan.arm_point[(a, s)] = point

    for a in range(n):
        for b in range(a + 1, n):
            for sa in (+1, -1):
                for sb in (+1, -1):
                    shifts = [0] * n
                    shifts[a] = sa
                    shifts[b] = sb
                    shifted_idx, valid, flat = shifted(idx, shifts)
                    diag = np.where(valid, ordinal[flat], -1).astype(np.int64)
                    known = valid & (cls_flat[flat] == BOUNDARY)
                    point = np.full((grid.n_interior, n), np.nan, dtype=np.float64)
                    sel = known & (diag < 0)
                    if np.any(sel):
                        pt = np.stack(
                            [
                                grid.axis_coords[k][shifted_idx[k][sel]]
                                for k in range(n)
                            ],
                            axis=1,
                        )
                        point[sel] = pt
                    plan.diag[(a, b, sa, sb)] = diag
                    plan.diag_known[(a, b, sa, sb)] = sel
                    plan.diag_point[(a, b, sa, sb)] = point

    # Every interior node must see, along each direction, either an interior
    # neighbor or a recorded boundary offset.
    for a in range(n):
        for s in (+1, -1):
            nbr = plan.nbr[(a, s)]
            ok = (nbr >= 0) | (plan.theta[(a, s)] > 0)
            if is_box:
                ok = (nbr >= 0) | plan.arm_lattice[(a, s)]
            if not bool(np.all(ok)):
                raise InvalidGridError(
                    f"interior node without neighbor or offset along axis {a}"
                )
    return plan


# ---------------------------------------------------------------------------
# Builders


def build_box(bounds: Iterable[tuple[float, float]], h: float) -> Grid:
    """Box grid: faces are Boundary lattice nodes, all offsets are theta = 1.

    ``h`` must divide every side length to within rounding; a spacing larger
    than the shortest side is rejected.
    """
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    if not bounds:
        raise InvalidGridError("box needs at least one axis")
    if len(bounds) > 3:
        raise InvalidGridError("dimension capped at 3")
    if h <= 0:
        raise InvalidGridError("spacing h must be positive")
    for lo, hi in bounds:
        if not hi > lo:
            raise InvalidGridError(f"degenerate interval [{lo}, {hi}]")
        if h > (hi - lo) * (1 + _DIVIDE_RTOL):
            raise InvalidGridError("h larger than the shortest side")
    counts = []
    for lo, hi in bounds:
        side = hi - lo
        m = round(side / h)
        if m < 1 or abs(side - m * h) > _DIVIDE_RTOL * max(1.0, side):
            raise InvalidGridError(f"h={h} does not divide side [{lo}, {hi}]")
        counts.append(m + 1)

    descriptor = BoxDescriptor(bounds)
    shape = tuple(counts)
    node_class = np.full(shape, BOUNDARY, dtype=np.int8)
    interior = tuple(slice(1, s - 1) for s in shape)
    if any(s.stop <= s.start for s in interior):
        raise InvalidGridError("box too thin for interior nodes at this h")
    node_class[interior] = INTERIOR
    origin = tuple(lo for lo, _ in bounds)
    return Grid(descriptor, h, origin, shape, node_class)


def _radial_grid(descriptor: BallDescriptor | AnnulusDescriptor, h: float,
                 r_max: float) -> Grid:
    center = np.asarray(descriptor.center, dtype=np.float64)
    n = descriptor.n
    if n < 1 or n > 3:
        raise InvalidGridError("dimension capped at 3")
    m = int(math.ceil(r_max / h))
    shape = tuple([2 * m + 1] * n)
    # Index the lattice symmetrically about the center so mirrored nodes get
    # bit-identical coordinates.
    axes = [center[k] + h * (np.arange(2 * m + 1, dtype=np.float64) - m)
            for k in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(mesh, center))
    s = np.sqrt(d2)
    if isinstance(descriptor, BallDescriptor):
        inside = s < descriptor.radius
    else:
        inside = (s > descriptor.r_inner) & (s < descriptor.r_outer)
    node_class = np.where(inside, INTERIOR, EXTERIOR).astype(np.int8)
    origin = tuple(float(axes[k][0]) for k in range(n))
    return Grid(descriptor, h, origin, shape, node_class)


def build_ball(center: Sequence[float], radius: float, h: float) -> Grid:
    """Ball grid: nodes with |x - center| < radius are Interior.

    Stencil arms that cross the sphere record the fractional crossing
    distance; requires radius > 2h so that the stencil can resolve the domain.
    """
    center = tuple(float(c) for c in center)
    if h <= 0:
        raise InvalidGridError("spacing h must be positive")
    if not radius > 2 * h:
        raise InvalidGridError(f"radius {radius} must exceed 2h = {2 * h}")
    return _radial_grid(BallDescriptor(center, float(radius)), h, float(radius))


def build_annulus(center: Sequence[float], r_inner: float, r_outer: float,
                  h: float) -> Grid:
    """Concentric annulus grid; the gap must exceed 2h."""
    center = tuple(float(c) for c in center)
    if h <= 0:
        raise InvalidGridError("spacing h must be positive")
    if not r_outer > r_inner > 0:
        raise InvalidGridError("need 0 < r_inner < r_outer")
    if not (r_outer - r_inner) > 2 * h:
        raise InvalidGridError("annular gap must exceed 2h")
    return _radial_grid(
        AnnulusDescriptor(center, float(r_inner), float(r_outer)), h, float(r_outer)
    )


def domain_measure(grid: Grid) -> float:
    """Discrete |Omega| = h**n times the Interior node count.

    This value, not the continuum volume, is used everywhere a domain measure
    is needed (in particular as the upper end of the profile function's
    domain) so that superlevel measures can never leave the profile's range.
    """
    return grid.cell * grid.n_interior


# ---------------------------------------------------------------------------
# Dirichlet boundary data


class BoundaryData:
    """Dirichlet data evaluated on demand at boundary intersection points.

    Built-in kinds: ``zero``, ``radial_poly`` (polynomial in |x - center|),
    ``table`` (piecewise-linear in |x - center|).  ``from_callable`` wraps an
    arbitrary function of position for programmatic use.
    """

    def __init__(self, kind: str, fn: Callable[[NDArray[np.float64]], NDArray[np.float64]]):
        self.kind = kind
        self._fn = fn

    @classmethod
    def zero(cls) -> "BoundaryData":
        return cls("zero", lambda pts: np.zeros(pts.shape[0], dtype=np.float64))

    @classmethod
    def radial_poly(cls, coeffs: Sequence[float],
                    center: Sequence[float]) -> "BoundaryData":
        c = np.asarray(list(coeffs), dtype=np.float64)
        ctr = np.asarray(list(center), dtype=np.float64)
        if c.size == 0:
            raise InvalidParameterError("radial_poly needs at least one coefficient")

        def fn(pts: NDArray[np.float64]) -> NDArray[np.float64]:
            s = np.linalg.norm(pts - ctr, axis=1)
            out = np.zeros_like(s)
            for k in range(c.size - 1, -1, -1):
                out = out * s + c[k]
            return out

        return cls("radial_poly", fn)

    @classmethod
    def table(cls, knots: Sequence[float], values: Sequence[float],
              center: Sequence[float]) -> "BoundaryData":
        kn = np.asarray(list(knots), dtype=np.float64)
        va = np.asarray(list(values), dtype=np.float64)
        if kn.size < 2 or kn.size != va.size:
            raise InvalidParameterError("table needs matching knots/values, >= 2 each")
        if not np.all(np.diff(kn) > 0):
            raise InvalidParameterError("table knots must be strictly increasing")
        ctr = np.asarray(list(center), dtype=np.float64)

        def fn(pts: NDArray[np.float64]) -> NDArray[np.float64]:
            s = np.linalg.norm(pts - ctr, axis=1)
            return np.interp(s, kn, va)

        return cls("table", fn)

    @classmethod
    def from_callable(cls, fn: Callable[..., object]) -> "BoundaryData":
        def wrapped(pts: NDArray[np.float64]) -> NDArray[np.float64]:
            out = np.asarray(fn(pts), dtype=np.float64)
            if out.shape != (pts.shape[0],):
                out = np.array([fn(p) for p in pts], dtype=np.float64)
            return out

        return cls("callable", wrapped)

    def evaluate(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = self._fn(pts)
        if not np.all(np.isfinite(out)):
            raise InvalidParameterError("boundary data evaluated to non-finite values")
        return out


class BoundaryTrace:
    """Dirichlet values sampled at every point a grid's stencils need.

    ``arm[(axis, sign)]`` holds psi at non-interior arm ends (NaN where the
    arm stays interior); ``diag[...]`` holds psi at Boundary lattice nodes
    used by mixed stencils.
    """

    def __init__(self, grid: Grid, psi: BoundaryData):
        self.grid = grid
        plan = grid.plan
        self.arm: dict[tuple[int, int], NDArray[np.float64]] = {}
        self.diag: dict[tuple[int, int, int, int], NDArray[np.float64]] = {}
        for key in plan.arm_keys(grid.n):
            vals = np.full(grid.n_interior, np.nan, dtype=np.float64)
            sel = plan.nbr[key] < 0
            if np.any(sel):
                vals[sel] = psi.evaluate(plan.arm_point[key][sel])
            self.arm[key] = vals
        for key in plan.pair_keys(grid.n):
            vals = np.full(grid.n_interior, np.nan, dtype=np.float64)
            sel = plan.diag_known[key]
            if np.any(sel):
                vals[sel] = psi.evaluate(plan.diag_point[key][sel])
            self.diag[key] = vals

    def all_values(self) -> NDArray[np.float64]:
        """Every boundary sample the trace holds, for sup/inf queries."""
        chunks = [v[np.isfinite(v)] for v in self.arm.values()]
        chunks += [v[np.isfinite(v)] for v in self.diag.values()]
        if not chunks:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate(chunks)


def build_trace(grid: Grid, psi: BoundaryData) -> BoundaryTrace:
    return BoundaryTrace(grid, psi)
