"""Position loci from timing measurements, and the solvers over them.

A timing-advance value confines the UE to a ring around the eNodeB; a
recovered ``ue_delay + probe_delay`` sum confines it to an ellipse with
the eNodeB and the uplink probe as foci. This module builds those loci,
intersects them, and runs weighted nonlinear least squares over any
mixture of them.

All geometry is 2-D; distances are metres as floats.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .timebase import RING_WIDTH_M, Span, TaIndex, ps_to_m, ta_span

#: Soft 1-sigma assigned to a TA ring when it enters the least-squares
#: solver: the uniform-distribution equivalent of the ring width.
ANNULUS_SIGMA_M = RING_WIDTH_M / math.sqrt(12.0)

#: Stand-in sigma for loci declared noiseless, so weights stay finite.
_SIGMA_FLOOR_M = 1e-3

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def distance_to(self, other: "Position") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class AnnulusLocus:
    """Ring of possible UE positions around an eNodeB."""

    center: Position
    r_inner: float
    r_outer: float

    def __post_init__(self):
        if not 0.0 <= self.r_inner < self.r_outer:
            raise ValueError(
                f"bad annulus radii [{self.r_inner}, {self.r_outer}]")

    @property
    def mid_radius(self) -> float:
        return 0.5 * (self.r_inner + self.r_outer)

    def contains(self, p: Position) -> bool:
        return self.r_inner <= self.center.distance_to(p) <= self.r_outer


@dataclass(frozen=True)
class EllipseLocus:
    """Range-sum locus: d(p, focus_enb) + d(p, focus_probe) = sum_dist."""

    focus_enb: Position
    focus_probe: Position
    sum_dist: float
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ValueError("sigma must be >= 0")
        if self.sum_dist < self.focus_enb.distance_to(self.focus_probe):
            raise InfeasibleSumError(
                self.focus_enb.distance_to(self.focus_probe) - self.sum_dist)

    def sum_misfit(self, p: Position) -> float:
        """d1 + d2 - sum_dist at point p, in metres."""
        return (self.focus_enb.distance_to(p)
                + self.focus_probe.distance_to(p) - self.sum_dist)


@dataclass(frozen=True)
class CandidateArc:
    """A connected piece of an ellipse lying inside an annulus.

    Parameterized by eccentric anomaly; e_start is in [0, 2pi) and
    e_end in (e_start, e_start + 2pi]. A full ellipse is (0, 2pi).
    """

    e_start: float
    e_end: float
    midpoint: Position


@dataclass(frozen=True)
class PositionEstimate:
    position: Position
    residual_rms: float
    covariance: Optional[np.ndarray] = None
    candidates: tuple[Position, ...] = field(default_factory=tuple)


class InfeasibleSumError(ValueError):
    """Measured range sum is below the focal separation.

    Carries the deficit in metres; a large deficit usually means noise or
    a wrong eNodeB/probe association rather than a borderline rounding.
    """

    def __init__(self, deficit_m: float):
        super().__init__(f"range sum {deficit_m:.3f} m below focal distance")
        self.deficit_m = deficit_m


class ConvergenceError(RuntimeError):
    """Least squares failed to converge; .best holds the last iterate."""

    def __init__(self, best: PositionEstimate, n_iter: int):
        super().__init__(f"no convergence after {n_iter} iterations")
        self.best = best
        self.n_iter = n_iter


# ---------------------------------------------------------------------------
# Locus construction


def annulus_from_ta(enb: Position, ta: TaIndex) -> AnnulusLocus:
    """Ring of ground distance consistent with a TA index.

    Mid-radius is ta * c * 8Ts (exactly ta times the ring width); the ring
    extends half a width to each side, clamped at zero for ta = 0.
    """
    mid = ta * RING_WIDTH_M
    half = 0.5 * RING_WIDTH_M
    return AnnulusLocus(enb, max(0.0, mid - half), mid + half)


def ellipse_from_sum(enb: Position, probe: Position, sum_delay_ps: Span,
                     sigma: float = 0.0) -> EllipseLocus:
    """Ellipse with the eNodeB and uplink probe as foci.

    ``sum_delay_ps`` is the recovered ue_delay + probe_delay; the locus is
    all points whose distances to the two foci add up to c times that.
    Raises InfeasibleSumError if the sum falls short of the focal distance.
    """
    return EllipseLocus(enb, probe, ps_to_m(sum_delay_ps), sigma)


def colocated_distance(sum_delay_ps: Span) -> float:
    """UE distance when eNodeB and probe share a site: c * sum / 2."""
    if sum_delay_ps < 0:
        raise ValueError("negative delay sum")
    return 0.5 * ps_to_m(sum_delay_ps)


# ---------------------------------------------------------------------------
# Ellipse parameterization


def _ellipse_frame(e: EllipseLocus):
    """Centre, axis unit vectors and semi-axes of an ellipse locus."""
    f1 = e.focus_enb.as_array()
    f2 = e.focus_probe.as_array()
    centre = 0.5 * (f1 + f2)
    d = f2 - f1
    focal = 0.5 * float(np.hypot(*d))
    if focal > 0.0:
        u = d / (2.0 * focal)
    else:
        u = np.array([1.0, 0.0])
    v = np.array([-u[1], u[0]])
    a = 0.5 * e.sum_dist
    b = math.sqrt(max(a * a - focal * focal, 0.0))
    return centre, u, v, a, b


def ellipse_point(e: EllipseLocus, anomaly: float) -> Position:
    """Point on the ellipse at the given eccentric anomaly."""
    centre, u, v, a, b = _ellipse_frame(e)
    p = centre + a * math.cos(anomaly) * u + b * math.sin(anomaly) * v
    return Position(float(p[0]), float(p[1]))


def _ellipse_points(e: EllipseLocus, anomalies: np.ndarray) -> np.ndarray:
    centre, u, v, a, b = _ellipse_frame(e)
    ca = a * np.cos(anomalies)
    sb = b * np.sin(anomalies)
    return centre[None, :] + ca[:, None] * u[None, :] + sb[:, None] * v[None, :]


# ---------------------------------------------------------------------------
# Intersection


def intersect(annulus: AnnulusLocus, ellipse: EllipseLocus,
              samples: int = 2048) -> list[CandidateArc]:
    """Arcs of the ellipse lying inside the annulus (hard bounds).

    Walks the ellipse in eccentric anomaly, then bisects each inside/outside
    transition down to machine-level anomaly resolution. With the annulus
    centred on a focus the distance to the centre is monotone per half-turn,
    so at most two disjoint arcs come back; off-focus centres may yield more.
    """
    anomalies = np.linspace(0.0, _TWO_PI, samples, endpoint=False)
    pts = _ellipse_points(ellipse, anomalies)
    c = annulus.center.as_array()
    r = np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])
    inside = (r >= annulus.r_inner) & (r <= annulus.r_outer)

    if inside.all():
        return [CandidateArc(0.0, _TWO_PI, ellipse_point(ellipse, math.pi))]
    if not inside.any():
        return []

    def _inside(anomaly: float) -> bool:
        p = ellipse_point(ellipse, anomaly)
        return annulus.contains(p)

    def _bisect(lo: float, hi: float, lo_inside: bool) -> float:
        # Invariant: state differs at lo and hi; returns the crossing.
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _inside(mid) == lo_inside:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    step = _TWO_PI / samples
    edges = []  # (anomaly, becomes_inside)
    for i in range(samples):
        j = (i + 1) % samples
        if inside[i] != inside[j]:
            lo = anomalies[i]
            crossing = _bisect(lo, lo + step, bool(inside[i]))
            edges.append((crossing % _TWO_PI, bool(inside[j])))
    edges.sort()

    arcs = []
    # Pair each entry edge with the next exit edge, wrapping around.
    n = len(edges)
    for k, (anom, becomes_inside) in enumerate(edges):
        if not becomes_inside:
            continue
        exit_anom = edges[(k + 1) % n][0]
        end = exit_anom if exit_anom > anom else exit_anom + _TWO_PI
        mid = 0.5 * (anom + end)
        arcs.append(CandidateArc(anom, end, ellipse_point(ellipse, mid)))
    return arcs


def filter_by_polygon(points: list[Position],
                      polygon: list[Position]) -> list[Position]:
    """Keep only points inside a simple polygon (map-mask pruning).

    Standard even-odd ray casting; points exactly on an edge count as in.
    """
    if len(polygon) < 3:
        raise ValueError("polygon needs at least 3 vertices")

    def _inside(p: Position) -> bool:
        crossings = 0
        n = len(polygon)
        for i in range(n):
            a, b = polygon[i], polygon[(i + 1) % n]
            if (a.y > p.y) != (b.y > p.y):
                t = (p.y - a.y) / (b.y - a.y)
                x_cross = a.x + t * (b.x - a.x)
                if math.isclose(x_cross, p.x, abs_tol=1e-9):
                    return True
                if p.x < x_cross:
                    crossings += 1
        return crossings % 2 == 1

    return [p for p in points if _inside(p)]


# ---------------------------------------------------------------------------
# Least squares


def _residuals(loci, xy: np.ndarray, offset_m: float = 0.0,
               with_offset: bool = False):
    """Weighted residual vector and Jacobian at (x, y [, offset]).

    The optional shared offset models a UE that transmits its random access
    early on purpose: every measured range sum is inflated by the same
    unknown amount, and every TA-derived mid radius by half of it.
    """
    cols = 3 if with_offset else 2
    f = np.empty(len(loci))
    J = np.empty((len(loci), cols))
    for i, locus in enumerate(loci):
        if isinstance(locus, EllipseLocus):
            f1 = locus.focus_enb.as_array()
            f2 = locus.focus_probe.as_array()
            d1 = max(float(np.hypot(*(xy - f1))), 1e-12)
            d2 = max(float(np.hypot(*(xy - f2))), 1e-12)
            w = 1.0 / max(locus.sigma, _SIGMA_FLOOR_M)
            f[i] = (d1 + d2 - (locus.sum_dist - offset_m)) * w
            grad = (xy - f1) / d1 + (xy - f2) / d2
            J[i, :2] = grad * w
            if with_offset:
                J[i, 2] = w
        elif isinstance(locus, AnnulusLocus):
            c = locus.center.as_array()
            dc = max(float(np.hypot(*(xy - c))), 1e-12)
            w = 1.0 / ANNULUS_SIGMA_M
            f[i] = (dc - (locus.mid_radius - 0.5 * offset_m)) * w
            J[i, :2] = (xy - c) / dc * w
            if with_offset:
                J[i, 2] = 0.5 * w
        else:
            raise TypeError(f"unknown locus type {type(locus).__name__}")
    return f, J


def _metric_rms(loci, xy: np.ndarray, offset_m: float = 0.0) -> float:
    """Unweighted RMS misfit in metres at a point."""
    sq = 0.0
    p = Position(float(xy[0]), float(xy[1]))
    for locus in loci:
        if isinstance(locus, EllipseLocus):
            m = locus.sum_misfit(p) + offset_m
        else:
            m = locus.center.distance_to(p) - locus.mid_radius + 0.5 * offset_m
        sq += m * m
    return math.sqrt(sq / len(loci))


def _levenberg_marquardt(loci, x0: np.ndarray, with_offset: bool,
                         max_iter: int, xtol: float, gtol: float):
    """Minimise the weighted residual sum of squares. Returns (x, ok, it)."""
    x = x0.astype(float).copy()
    off = lambda v: (float(v[2]) if with_offset else 0.0)
    f, J = _residuals(loci, x[:2], off(x), with_offset)
    cost = float(f @ f)
    lam = 1e-3
    window = deque([cost], maxlen=11)
    for it in range(1, max_iter + 1):
        g = J.T @ f
        if float(np.max(np.abs(g))) < gtol:
            return x, True, it
        A = J.T @ J
        D = np.diag(np.maximum(np.diag(A), 1e-12))
        accepted = False
        for _ in range(50):
            try:
                step = np.linalg.solve(A + lam * D, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            f_new, J_new = _residuals(loci, x_new[:2], off(x_new), with_offset)
            cost_new = float(f_new @ f_new)
            if cost_new < cost:
                x, f, J, cost = x_new, f_new, J_new, cost_new
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # Trust region collapsed: no descent direction exists at float
            # precision, which is convergence to a stationary point.
            return x, True, it
        if float(np.linalg.norm(step)) < xtol * (float(np.linalg.norm(x)) + xtol):
            return x, True, it
        window.append(cost)
    # Rank-deficient loci (e.g. all concentric) leave a whole curve of
    # optima; the iterate then creeps along it with strictly decreasing
    # cost, so neither gtol nor xtol ever fires. A flat cost over the
    # last ten iterations is a stationary manifold, not a failure.
    stalled = (len(window) == window.maxlen
               and window[0] - cost <= 1e-4 * (cost + 1e-30))
    return x, stalled, max_iter


def _estimate_at(loci, x: np.ndarray, with_offset: bool) -> PositionEstimate:
    off = float(x[2]) if with_offset else 0.0
    f, J = _residuals(loci, x[:2], off, with_offset)
    cov = np.linalg.pinv(J.T @ J)
    return PositionEstimate(
        position=Position(float(x[0]), float(x[1])),
        residual_rms=_metric_rms(loci, x[:2], off),
        covariance=cov[:2, :2],
        candidates=(Position(float(x[0]), float(x[1])),),
    )


def _pairwise_points(loci) -> list[Position]:
    """Approximate pairwise locus intersections.

    Ellipse/annulus pairs go through intersect(); ellipse/ellipse pairs are
    probed by sampling one curve and keeping the two best-separated points
    that nearly satisfy the other.
    """
    points: list[Position] = []
    for i in range(len(loci)):
        for j in range(i + 1, len(loci)):
            a, b = loci[i], loci[j]
            if isinstance(a, AnnulusLocus) and isinstance(b, EllipseLocus):
                points.extend(arc.midpoint for arc in intersect(a, b))
            elif isinstance(a, EllipseLocus) and isinstance(b, AnnulusLocus):
                points.extend(arc.midpoint for arc in intersect(b, a))
            elif isinstance(a, EllipseLocus) and isinstance(b, EllipseLocus):
                anomalies = np.linspace(0.0, _TWO_PI, 720, endpoint=False)
                pts = _ellipse_points(a, anomalies)
                mis = np.abs(
                    np.hypot(pts[:, 0] - b.focus_enb.x, pts[:, 1] - b.focus_enb.y)
                    + np.hypot(pts[:, 0] - b.focus_probe.x,
                               pts[:, 1] - b.focus_probe.y)
                    - b.sum_dist)
                first = int(np.argmin(mis))
                picks = [first]
                away = np.hypot(pts[:, 0] - pts[first, 0],
                                pts[:, 1] - pts[first, 1]) > 50.0
                if away.any():
                    masked = np.where(away, mis, np.inf)
                    second = int(np.argmin(masked))
                    if mis[second] < 5.0:
                        picks.append(second)
                points.extend(
                    Position(float(pts[k, 0]), float(pts[k, 1])) for k in picks)
    return points


def _candidate_starts(loci) -> list[np.ndarray]:
    """Start points for the solver when the caller gives no initial.

    First the centroid of pairwise intersections (nudged off the mirror
    axis, where the cost is stationary), then the intersection points
    themselves: the centroid of a symmetric pair lands between basins,
    so the raw points keep the solver honest.
    """
    points = _pairwise_points(loci)
    if points:
        xs = np.array([[p.x, p.y] for p in points])
        centroid = xs.mean(axis=0) + _off_axis_nudge(loci)
        starts = [centroid]
        starts.extend(p.as_array() for p in points[:8])
    else:
        first = loci[0]
        anchor = (first.center if isinstance(first, AnnulusLocus)
                  else first.focus_enb)
        starts = [anchor.as_array() + _off_axis_nudge(loci)]
    return starts


def _baseline(loci):
    """Foci axis of the first proper ellipse, if any: (anchor, unit)."""
    for locus in loci:
        if isinstance(locus, EllipseLocus):
            d = locus.focus_probe.as_array() - locus.focus_enb.as_array()
            n = float(np.hypot(*d))
            if n > 1e-9:
                return locus.focus_enb.as_array(), d / n
    return None


def _off_axis_nudge(loci) -> np.ndarray:
    base = _baseline(loci)
    if base is None:
        return np.array([0.0, 0.5])
    _, u = base
    return 0.5 * np.array([-u[1], u[0]])


def _mirror_across_baseline(xy: np.ndarray, base) -> np.ndarray:
    anchor, u = base
    rel = xy - anchor
    along = float(rel @ u) * u
    return anchor + 2.0 * along - rel


def multilaterate(loci, initial: Position | None = None, *,
                  max_iter: int = 100, xtol: float = 1e-9,
                  gtol: float = 1e-9) -> PositionEstimate:
    """Weighted nonlinear least squares over a mixture of loci.

    Ellipses contribute (d1 + d2 - sum)/sigma, rings contribute their
    mid-radius as a soft range with the uniform-equivalent sigma. When the
    configuration admits the classic two-fold ambiguity, the solve is
    repeated from the mirror image across the first ellipse's foci axis
    and both fixes are reported in ``candidates`` (best first).

    Degenerate configurations (all foci collinear with the UE) are not
    rejected; they surface as a huge condition number in ``covariance``.
    Raises ConvergenceError (carrying the best iterate) if the iteration
    budget runs out.
    """
    if not loci:
        raise ValueError("need at least one locus")
    if initial is not None:
        starts = [initial.as_array()]
    else:
        starts = _candidate_starts(loci)
    x = ok = None
    for x0 in starts:
        x_k, ok_k, it = _levenberg_marquardt(loci, x0, False,
                                             max_iter, xtol, gtol)
        if x is None or (ok_k and not ok) or (
                ok_k == ok and _metric_rms(loci, x_k) < _metric_rms(loci, x)):
            x, ok = x_k, ok_k
    primary = _estimate_at(loci, x, False)
    if not ok:
        raise ConvergenceError(primary, it)

    fixes = [primary]
    base = _baseline(loci)
    if base is not None:
        xm = _mirror_across_baseline(x, base)
        if float(np.hypot(*(xm - x))) > 1e-3:
            xm, ok_m, _ = _levenberg_marquardt(
                loci, xm, False, max_iter, xtol, gtol)
            mirror = _estimate_at(loci, xm, False)
            far = float(np.hypot(*(xm - x))) > 1e-3
            if ok_m and far and (mirror.residual_rms
                                 <= 2.0 * primary.residual_rms + 0.5):
                fixes.append(mirror)
                fixes.sort(key=lambda e: e.residual_rms)
    best = fixes[0]
    return PositionEstimate(
        position=best.position,
        residual_rms=best.residual_rms,
        covariance=best.covariance,
        candidates=tuple(e.position for e in fixes),
    )


def multilaterate_with_offset(loci, initial: Position | None = None, *,
                              max_iter: int = 100, xtol: float = 1e-9,
                              gtol: float = 1e-9):
    """Joint solve for position plus a shared transmit-offset range bias.

    Needs at least three loci to be determined. Returns the estimate and
    the recovered offset in metres of range sum (c times the time offset);
    divide by c for the time value.
    """
    if len(loci) < 3:
        raise ValueError("offset recovery needs at least 3 loci")
    if initial is not None:
        xy_starts = [initial.as_array()]
    else:
        xy_starts = _candidate_starts(loci)
    x = ok = None
    for xy0 in xy_starts:
        x0 = np.array([xy0[0], xy0[1], 0.0])
        x_k, ok_k, it = _levenberg_marquardt(loci, x0, True,
                                             max_iter, xtol, gtol)
        if x is None or (ok_k and not ok) or (
                ok_k == ok and _metric_rms(loci, x_k[:2], float(x_k[2]))
                < _metric_rms(loci, x[:2], float(x[2]))):
            x, ok = x_k, ok_k
    est = _estimate_at(loci, x, True)
    if not ok:
        raise ConvergenceError(est, it)
    return est, float(x[2])
