"""Closed-form ball solutions and the diagnostics they support.

The radial profile amplitude/(r^(n+2) - |x - x0|^(n+2)) solves the g(t) = -t,
zero-data problem on a ball for the Laplacian, and its 1/Lam (1/lam) rescaling
solves it for the minimal (maximal) extremal operator.  These closed forms
feed the benchmark comparisons, the boundary-barrier construction with its
gradient constant omega_n eps0^(n+1) / (2 n Lam), the flat-region exclusion
scan, and the refinement study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .elliptic import EllipticOperator
from .errors import InvalidParameterError, PreconditionError
from .geometry import (
    AnnulusDescriptor,
    BallDescriptor,
    Grid,
    build_ball,
    domain_measure,
)
from .measure import ProfileSpec, ScalarField, superlevel_measures
from .outerloop import OuterConfig, solve_nonlocal

__all__ = [
    "BallSolution",
    "BarrierPoint",
    "BarrierReport",
    "FlatRegionReport",
    "StudyProblem",
    "StudyRow",
    "unit_ball_volume",
    "exact_ball_solution",
    "barrier_gradient_constant",
    "barrier_comparison_check",
    "flat_region_detector",
    "boundary_gradient_min",
    "convergence_order_study",
]

_UNIT_BALL_VOLUMES = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}


def unit_ball_volume(n: int) -> float:
    """Measure of the n-dimensional unit ball, exact for n in {1, 2, 3}."""
    try:
        return _UNIT_BALL_VOLUMES[int(n)]
    except KeyError:
        raise InvalidParameterError(f"unsupported dimension {n}") from None


@dataclass(frozen=True)
class BallSolution:
    """Radial solution of the zero-data, g(t) = -t problem on a ball.

    For the minimal extremal operator the Laplacian solution scaled by 1/Lam
    solves the same problem (1/lam for the maximal one): the Hessian is
    negative semidefinite, so the extremal operator degenerates to a multiple
    of the trace.
    """

    center: tuple[float, ...]
    radius: float
    n: int
    op: EllipticOperator

    @property
    def scale(self) -> float:
        return 1.0 / (self.op.lam if self.op.kind == "pucci_plus" else self.op.Lam)

    @property
    def amplitude(self) -> float:
        n = self.n
        return self.scale * unit_ball_volume(n) / (2.0 * n * (n + 2))

    def value(self, points) -> NDArray[np.float64]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        s = np.linalg.norm(pts - np.asarray(self.center), axis=1)
        m = self.n + 2
        return self.amplitude * (self.radius ** m - s ** m)

    def radial_slope(self, s) -> NDArray[np.float64]:
        """d(value)/d|x - center|; negative away from the center."""
        s = np.asarray(s, dtype=np.float64)
        return -self.amplitude * (self.n + 2) * s ** (self.n + 1)

    def boundary_gradient(self) -> float:
        """|gradient| on the sphere: scale * omega_n r^(n+1) / (2n)."""
        return float(-self.radial_slope(np.array(self.radius)))

    def sample(self, grid: Grid) -> ScalarField:
        """The closed form on a grid, with its own trace (zero on the sphere)."""
        return ScalarField.sample(grid, self.value)


def exact_ball_solution(center: Sequence[float], r: float, n: int,
                        op: EllipticOperator) -> BallSolution:
    if not r > 0:
        raise InvalidParameterError("radius must be positive")
    center = tuple(float(c) for c in center)
    if len(center) != n:
        raise InvalidParameterError("center dimension does not match n")
    unit_ball_volume(n)
    return BallSolution(center, float(r), int(n), op)


def barrier_gradient_constant(eps0: float, n: int, Lam: float) -> float:
    """omega_n * eps0^(n+1) / (2 n Lam): the boundary gradient lower bound
    delivered by the tangent-ball barrier of radius eps0."""
    if not eps0 > 0:
        raise InvalidParameterError("eps0 must be positive")
    if not Lam > 0:
        raise InvalidParameterError("Lam must be positive")
    return unit_ball_volume(n) * eps0 ** (n + 1) / (2.0 * n * Lam)


# ---------------------------------------------------------------------------
# Gradient diagnostics


def _gradient_magnitude(u: ScalarField, grid: Grid) -> NDArray[np.float64]:
    """Central-difference gradient magnitude, offset-aware near boundaries."""
    if u.trace is None:
        raise InvalidParameterError("field needs boundary data (a trace)")
    plan = grid.plan
    uin = u.interior
    total = np.zeros(grid.n_interior, dtype=np.float64)
    for a in range(grid.n):
        tp, tm = plan.theta[(a, +1)], plan.theta[(a, -1)]
        nbp, nbm = plan.nbr[(a, +1)], plan.nbr[(a, -1)]
        up = np.where(nbp >= 0, uin[np.maximum(nbp, 0)], u.trace.arm[(a, +1)])
        um = np.where(nbm >= 0, uin[np.maximum(nbm, 0)], u.trace.arm[(a, -1)])
        da = (up - um) / ((tp + tm) * grid.h)
        total += da * da
    return np.sqrt(total)


def boundary_gradient_min(u: ScalarField, grid: Grid, band: float) -> float:
    """Minimum gradient magnitude over interior nodes within ``band`` of the
    boundary; the quantity the barrier bound c0 controls."""
    if not band >= 2 * grid.h:
        raise InvalidParameterError("band must be at least 2h")
    mag = _gradient_magnitude(u, grid)
    dist = grid.distance_to_boundary(grid.interior_coords)
    sel = dist <= band
    if not np.any(sel):
        raise InvalidParameterError("no interior nodes inside the band")
    return float(np.min(mag[sel]))


# ---------------------------------------------------------------------------
# Flat-region exclusion


@dataclass
class FlatRegionReport:
    """Mass of near-flat level sets: measure of {|u - a| <= delta} per level."""

    delta: float
    levels: NDArray[np.float64] = dc_field(repr=False)
    masses: NDArray[np.float64] = dc_field(repr=False)
    max_mass: float = 0.0
    max_level: float = 0.0

    def top(self, k: int = 5) -> list[tuple[float, float]]:
        order = np.argsort(self.masses)[::-1][:k]
        return [(float(self.levels[i]), float(self.masses[i])) for i in order]


def flat_region_detector(u: ScalarField, grid: Grid,
                         delta: float) -> FlatRegionReport:
    """Scan node values as candidate levels and report near-flat mass.

    A genuine plateau of M nodes at level a reports at least M h^n at a.  For
    solutions with a strictly negative profile the mass must vanish as delta
    and h do; the acceptance threshold is calibrated on the sampled closed
    form.
    """
    if not delta > 0:
        raise InvalidParameterError("delta must be positive")
    vec = u.interior
    if not u.grid.matches(grid):
        raise InvalidParameterError("field belongs to a different grid")
    asc = np.sort(vec)
    levels = np.unique(asc)
    lo = np.searchsorted(asc, levels - delta, side="left")
    hi = np.searchsorted(asc, levels + delta, side="right")
    masses = grid.cell * (hi - lo)
    imax = int(np.argmax(masses))
    return FlatRegionReport(
        delta=float(delta),
        levels=levels,
        masses=masses,
        max_mass=float(masses[imax]),
        max_level=float(levels[imax]),
    )


# ---------------------------------------------------------------------------
# Barrier comparison


def _sample_directions(n: int) -> NDArray[np.float64]:
    """Equispaced probe directions: 2 in 1-D, 8 in 2-D, 26 in 3-D."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        ang = 2.0 * math.pi * np.arange(8) / 8.0
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    dirs = []
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            for k in (-1, 0, 1):
                if (i, j, k) != (0, 0, 0):
                    v = np.array([i, j, k], dtype=np.float64)
                    dirs.append(v / np.linalg.norm(v))
    return np.stack(dirs, axis=0)


@dataclass
class BarrierPoint:
    boundary_point: tuple[float, ...]
    ball_center: tuple[float, ...]
    n_nodes: int
    min_slack: float        # min (u - barrier) over nodes in the tangent ball
    ok: bool
    measure_ok: bool        # superlevel measure >= |Omega|/2 on those nodes


@dataclass
class BarrierReport:
    eps0: float
    c0: float
    tol: float
    band: float
    min_grad_band: float
    points: list[BarrierPoint] = dc_field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.ok for p in self.points)

    @property
    def hypothesis_ok(self) -> bool:
        return all(p.measure_ok for p in self.points)


def barrier_comparison_check(u: ScalarField, grid: Grid, eps0: float,
                             op: EllipticOperator | None = None,
                             tol: float | None = None) -> BarrierReport:
    """Compare the solution against the tangent-ball barrier at boundary
    probes and report the boundary-band gradient floor.

    Preconditions (PreconditionError, not a failed comparison): the grid is a
    ball or annulus (uniform inner ball condition), the tangent ball fits,
    and its volume is at most half the discrete domain measure.  The caller
    asserts that u solves the zero-data problem with g(t) = -t.
    """
    d = grid.descriptor
    if not isinstance(d, (BallDescriptor, AnnulusDescriptor)):
        raise PreconditionError(
            "barrier comparison needs a uniform inner ball condition "
            "(ball or annulus grid)"
        )
    if not eps0 > 0:
        raise InvalidParameterError("eps0 must be positive")
    op = op or EllipticOperator.laplacian()
    n = grid.n
    omega = unit_ball_volume(n)
    half = 0.5 * domain_measure(grid)
    if omega * eps0 ** n > half:
        raise PreconditionError(
            f"|B_eps0| = {omega * eps0 ** n:.6g} exceeds half the domain "
            f"measure {half:.6g}"
        )
    center = np.asarray(d.center, dtype=np.float64)
    if isinstance(d, BallDescriptor):
        spheres = [(d.radius, -1.0)]
        max_fit = d.radius
    else:
        spheres = [(d.r_outer, -1.0), (d.r_inner, +1.0)]
        max_fit = 0.5 * (d.r_outer - d.r_inner)
    if eps0 > max_fit:
        raise PreconditionError(
            f"tangent ball of radius {eps0} does not fit inside the domain"
        )
    if tol is None:
        tol = 1e-9 + 10.0 * grid.h ** 2

    # The comparison barrier is the minimal-operator solution scaled by
    # 1/Lam; for the Laplacian Lam = 1 it is the solution itself.
    barrier_op = EllipticOperator.pucci_minus(op.lam, op.Lam)
    c0 = barrier_gradient_constant(eps0, n, op.Lam)
    mu = superlevel_measures(u, grid).interior
    coords = grid.interior_coords

    points: list[BarrierPoint] = []
    for radius, inward in spheres:
        for dvec in _sample_directions(n):
            y = center + radius * dvec
            cb = center + (radius + inward * eps0) * dvec
            barrier = exact_ball_solution(tuple(cb), eps0, n, barrier_op)
            in_ball = np.linalg.norm(coords - cb, axis=1) < eps0
            n_nodes = int(np.sum(in_ball))
            if n_nodes == 0:
                points.append(BarrierPoint(tuple(y), tuple(cb), 0, math.inf,
                                           True, True))
                continue
            slack = u.interior[in_ball] - barrier.value(coords[in_ball])
            min_slack = float(np.min(slack))
            measure_ok = bool(np.all(mu[in_ball] >= half - grid.cell))
            points.append(BarrierPoint(
                boundary_point=tuple(float(x) for x in y),
                ball_center=tuple(float(x) for x in cb),
                n_nodes=n_nodes,
                min_slack=min_slack,
                ok=min_slack >= -tol,
                measure_ok=measure_ok,
            ))

    band = max(2 * grid.h, 0.5 * eps0)
    return BarrierReport(
        eps0=float(eps0),
        c0=c0,
        tol=float(tol),
        band=float(band),
        min_grad_band=boundary_gradient_min(u, grid, band),
        points=points,
    )


# ---------------------------------------------------------------------------
# Refinement study


@dataclass(frozen=True)
class StudyProblem:
    """Ball benchmark with a closed-form reference: g(t) = -t, zero data."""

    center: tuple[float, ...]
    radius: float
    op: EllipticOperator
    profile: ProfileSpec = ProfileSpec(kind="linear", a=-1.0, b=0.0)

    @property
    def n(self) -> int:
        return len(self.center)


@dataclass
class StudyRow:
    h: float
    n_interior: int
    error: float
    order: float | None
    status: str


def convergence_order_study(problem: StudyProblem, h_list: Sequence[float],
                            cfg: OuterConfig | None = None) -> list[StudyRow]:
    """Solve at each spacing, compare with the closed form, report orders.

    The observed order between consecutive rows is log(e_prev/e) / log(h_prev/h).
    Solver failures are recorded in the row status (and surface as exit 2 at
    the command line).
    """
    from .geometry import BoundaryData  # local to avoid import cycles

    exact = exact_ball_solution(problem.center, problem.radius, problem.n,
                                problem.op)
    rows: list[StudyRow] = []
    prev: tuple[float, float] | None = None
    for h in h_list:
        grid = build_ball(problem.center, problem.radius, h)
        g = problem.profile.bind(domain_measure(grid))
        u, rep = solve_nonlocal(problem.op, grid, g, BoundaryData.zero(), cfg)
        err = float(np.max(np.abs(u.interior - exact.value(grid.interior_coords))))
        order = None
        if prev is not None and err > 0 and prev[1] > 0:
            order = math.log(prev[1] / err) / math.log(prev[0] / h)
        rows.append(StudyRow(h=float(h), n_interior=grid.n_interior,
                             error=err, order=order, status=rep.status))
        prev = (float(h), err)
    return rows
