"""Loci construction, intersection and the least-squares solver."""

import math

import numpy as np
import pytest

from tatrack import timebase as tb
from tatrack.geometry import (ANNULUS_SIGMA_M, AnnulusLocus, ConvergenceError,
                              EllipseLocus, InfeasibleSumError, Position,
                              _residuals, annulus_from_ta, colocated_distance,
                              ellipse_from_sum, ellipse_point,
                              filter_by_polygon, intersect, multilaterate,
                              multilaterate_with_offset)

from _oracle import agreement_gaps, random_config

O = Position(0.0, 0.0)


# -- annuli -----------------------------------------------------------------

def test_annulus_ta0_clamps_inner():
    ring = annulus_from_ta(O, 0)
    assert ring.r_inner == 0.0
    assert math.isclose(ring.r_outer, 39.0354762, abs_tol=1e-4)


def test_annulus_ta1():
    ring = annulus_from_ta(O, 1)
    assert math.isclose(ring.mid_radius, 78.0709525, abs_tol=1e-4)
    assert math.isclose(ring.r_inner, 39.0354762, abs_tol=1e-4)
    assert math.isclose(ring.r_outer, 117.1064287, abs_tol=1e-4)


def test_annulus_ta6_mid_radius():
    assert math.isclose(annulus_from_ta(O, 6).mid_radius, 468.425715,
                        abs_tol=1e-4)


def test_annulus_width_constant():
    for ta in range(1, tb.TA_MAX + 1, 13):
        ring = annulus_from_ta(O, ta)
        assert abs((ring.r_outer - ring.r_inner) - 78.0709) < 1e-4


# -- ellipses ---------------------------------------------------------------

def test_ellipse_pythagoras_example():
    probe = Position(1000.0, 0.0)
    ue = Position(500.0, 400.0)
    sum_d = 2 * math.hypot(500, 400)
    locus = ellipse_from_sum(O, probe, tb.m_to_ps(sum_d))
    assert math.isclose(locus.sum_dist, 1280.6248, abs_tol=1e-3)
    assert abs(locus.sum_misfit(ue)) < 1e-3


def test_ellipse_points_satisfy_sum():
    rng = np.random.default_rng(7)
    for _ in range(50):
        probe = Position(rng.uniform(-500, 500), rng.uniform(-500, 500))
        focal = O.distance_to(probe)
        locus = EllipseLocus(O, probe, focal + rng.uniform(10, 900))
        for anomaly in rng.uniform(0, 2 * math.pi, size=8):
            p = ellipse_point(locus, anomaly)
            assert abs(locus.sum_misfit(p)) < 1e-6


def test_ellipse_infeasible_sum_carries_deficit():
    with pytest.raises(InfeasibleSumError) as exc:
        EllipseLocus(O, Position(1000.0, 0.0), 900.0)
    assert math.isclose(exc.value.deficit_m, 100.0, abs_tol=1e-9)


def test_colocated_distance_values():
    assert colocated_distance(0) == 0.0
    assert math.isclose(colocated_distance(1_000_000), 149.896229,
                        abs_tol=1e-6)


def test_colocated_round_trip_60m():
    sum_ps = 2 * tb.m_to_ps(60.0)
    assert abs(colocated_distance(sum_ps) - 60.0) < 1e-3


# -- intersection -----------------------------------------------------------

def test_intersect_containment_gives_full_ellipse():
    ring = AnnulusLocus(O, 0.0, 500.0)
    locus = EllipseLocus(O, Position(50.0, 0.0), 120.0)
    arcs = intersect(ring, locus)
    assert len(arcs) == 1
    assert math.isclose(arcs[0].e_end - arcs[0].e_start, 2 * math.pi)


def test_intersect_separated_setup_two_arcs():
    # eNodeB and probe well apart, UE between them: the ring cuts the
    # ellipse into two mirror arcs, one per side of the baseline.
    probe = Position(1000.0, 0.0)
    ue = Position(480.0, 350.0)
    d_ue = O.distance_to(ue)
    ring = annulus_from_ta(O, tb.quantize_ta(2 * tb.m_to_ps(d_ue)))
    locus = EllipseLocus(O, probe, d_ue + ue.distance_to(probe))
    arcs = intersect(ring, locus)
    assert len(arcs) == 2
    ys = sorted(arc.midpoint.y for arc in arcs)
    assert ys[0] < 0 < ys[1]
    assert abs(ys[0] + ys[1]) < 1.0  # mirror pair across the baseline


def test_intersect_disjoint_is_empty():
    ring = AnnulusLocus(Position(5000.0, 5000.0), 39.0, 117.1)
    locus = EllipseLocus(O, Position(100.0, 0.0), 300.0)
    assert intersect(ring, locus) == []


def test_intersect_matches_grid_oracle():
    rng = np.random.default_rng(20260815)
    for _ in range(40):
        ring, locus = random_config(rng)
        cell_gap, mid_gap = agreement_gaps(ring, locus,
                                           intersect(ring, locus))
        assert cell_gap <= 2.0
        assert mid_gap <= 2.0


# -- least squares ----------------------------------------------------------

def test_two_ellipses_noiseless_recover_position():
    probes = [Position(800.0, 100.0), Position(-300.0, 900.0)]
    ue = Position(250.0, 420.0)
    loci = [EllipseLocus(O, p, O.distance_to(ue) + p.distance_to(ue))
            for p in probes]
    # Two confocal ellipses cross twice; start in the true basin.
    est = multilaterate(loci, initial=Position(300.0, 380.0))
    assert est.position.distance_to(ue) < 1e-3
    assert est.residual_rms < 1e-6


def test_single_probe_gives_two_candidates():
    probe = Position(1000.0, 0.0)
    ue = Position(480.0, 350.0)
    d_ue = O.distance_to(ue)
    loci = [
        EllipseLocus(O, probe, d_ue + ue.distance_to(probe)),
        annulus_from_ta(O, tb.quantize_ta(2 * tb.m_to_ps(d_ue))),
    ]
    est = multilaterate(loci)
    assert len(est.candidates) == 2
    a, b = est.candidates
    # Mirror images across the foci baseline (the x axis here).
    assert math.isclose(a.x, b.x, abs_tol=0.5)
    assert math.isclose(a.y, -b.y, abs_tol=0.5)
    assert abs(loci[0].sum_misfit(a)) < 1e-3
    assert abs(loci[0].sum_misfit(b)) < 1e-3


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(99)
    probe = Position(700.0, -200.0)
    loci = [
        EllipseLocus(O, probe, 1400.0, sigma=2.0),
        annulus_from_ta(O, 5),
    ]
    for _ in range(25):
        xy = rng.uniform(-800, 800, size=2)
        _, J = _residuals(loci, xy)
        h = 1e-4
        for k in range(2):
            dxy = np.zeros(2)
            dxy[k] = h
            f_hi, _ = _residuals(loci, xy + dxy)
            f_lo, _ = _residuals(loci, xy - dxy)
            numeric = (f_hi - f_lo) / (2 * h)
            denom = np.maximum(np.abs(numeric), 1e-3)
            assert np.max(np.abs(J[:, k] - numeric) / denom) < 1e-6


def test_covariance_predicts_monte_carlo_spread():
    probes = [Position(900.0, 50.0), Position(-200.0, 850.0),
              Position(400.0, -700.0)]
    ue = Position(300.0, 200.0)
    sums = [O.distance_to(ue) + p.distance_to(ue) for p in probes]
    rng = np.random.default_rng(4242)
    errors = []
    cov_pred = None
    for _ in range(300):
        loci = [EllipseLocus(O, p, s + rng.normal(0, 2.0), sigma=2.0)
                for p, s in zip(probes, sums)]
        est = multilaterate(loci, initial=Position(ue.x + 30, ue.y - 30))
        errors.append(est.position.distance_to(ue) ** 2)
        cov_pred = est.covariance
    rms = math.sqrt(np.mean(errors))
    predicted = math.sqrt(np.trace(cov_pred))
    assert abs(rms - predicted) / predicted < 0.25


def test_collinear_geometry_flags_condition_number():
    # UE at (1200, 0): every focus and the solution share the x axis.
    loci = [
        EllipseLocus(O, Position(1000.0, 0.0), 1400.0),
        EllipseLocus(O, Position(500.0, 0.0), 1900.0),
    ]
    est = multilaterate(loci, initial=Position(1200.5, 0.3))
    assert np.linalg.cond(est.covariance) > 1e6


def test_convergence_error_carries_best_iterate():
    probe = Position(800.0, 100.0)
    loci = [EllipseLocus(O, probe, 1500.0)]
    with pytest.raises(ConvergenceError) as exc:
        multilaterate(loci, initial=Position(5.0, 5.0), max_iter=1)
    assert isinstance(exc.value.best.position, Position)


def test_offset_recovery_with_three_probes():
    probes = [Position(700.0, 80.0), Position(-150.0, 820.0),
              Position(350.0, -650.0)]
    ue = Position(280.0, 190.0)
    s_true = 150.0  # metres of range-sum inflation from the tx offset
    loci = [EllipseLocus(O, p, O.distance_to(ue) + p.distance_to(ue) + s_true)
            for p in probes]
    est, s_hat = multilaterate_with_offset(
        loci, initial=Position(200.0, 120.0))
    assert est.position.distance_to(ue) < 0.1
    assert abs(s_hat - s_true) < 0.1


def test_annulus_sigma_is_uniform_equivalent():
    assert math.isclose(ANNULUS_SIGMA_M, 78.0709525 / math.sqrt(12),
                        abs_tol=1e-4)


def test_polygon_mask():
    square = [Position(0, 0), Position(10, 0), Position(10, 10),
              Position(0, 10)]
    inside = Position(5, 5)
    outside = Position(15, 5)
    assert filter_by_polygon([inside, outside], square) == [inside]
