import math

import numpy as np
import pytest
from scipy import integrate

from randpot.dynamics import PhaseState
from randpot.oracle1d import (PeriodicCell1D, complete_elliptic_K, critical_values_1d, drift_velocity_1d,
                              expected_drift_over_measure, linear_flow_reference, pendulum_drift, transit_time)
from randpot.randfield import (FiniteConfiguration, LatticeBasis, PotentialField, SingleSitePotential as S,
                               sample_lattice_configuration, zero_field)


def K_quad(m):
    val, _ = integrate.quad(lambda th: 1 / math.sqrt(1 - m * math.sin(th) ** 2), 0, math.pi / 2,
                            epsabs=0, epsrel=1e-13, limit=200)
    return val


def test_K_at_zero():
    assert complete_elliptic_K(0.0) == pytest.approx(math.pi / 2, rel=1e-15)


@pytest.mark.parametrize("m", [-1.0, 0.5, -40.0, 0.9])
def test_K_vs_quadrature(m):
    assert complete_elliptic_K(m) == pytest.approx(K_quad(m), rel=1e-12)


def test_K_rejects_m_ge_1():
    with pytest.raises(ValueError):
        complete_elliptic_K(1.0)


def test_drift_free_and_constant():
    assert drift_velocity_1d(PeriodicCell1D.constant(0.0), 2.0) == pytest.approx(2.0, rel=1e-12)
    assert drift_velocity_1d(PeriodicCell1D.constant(0.7), 2.0) == pytest.approx(math.sqrt(2 * 1.3), rel=1e-12)
    assert drift_velocity_1d(PeriodicCell1D.constant(0.0), 2.0, sign=-1) == pytest.approx(-2.0, rel=1e-12)


@pytest.mark.parametrize("E", [1.05, 2.0, 7.5, 40.0])
def test_pendulum_closed_form(E):
    v = drift_velocity_1d(PeriodicCell1D.cosine(), E)
    assert abs(v - pendulum_drift(E)) / v <= 1e-9


def test_below_barrier_rejected():
    with pytest.raises(ValueError):
        transit_time(PeriodicCell1D.cosine(), 0.9)


def test_field_cell_matches_analytic_cell():
    fld = PotentialField(sample_lattice_configuration(0, LatticeBasis.cubic(1), ((-5,), (5,)), (1.0,),
                                                      (S.cosine(1.0),)))
    a = drift_velocity_1d(PeriodicCell1D.from_field(fld), 3.0)
    assert a == pytest.approx(pendulum_drift(3.0), rel=1e-9)


def test_expected_drift_single_mark_reduces():
    pal = (S.cosine(1.0),)
    v, se = expected_drift_over_measure(pal, (1.0,), 2.0)
    assert se == 0.0
    assert v == pytest.approx(pendulum_drift(2.0), rel=1e-9)


def test_expected_drift_brackets_pure_drifts():
    pal = (S.bump(0.5, 0.45), S.bump(1.0, 0.45))
    E = 2.0
    v_mix, _ = expected_drift_over_measure(pal, (0.5, 0.5), E)
    v0, _ = expected_drift_over_measure(pal, (1.0, 0.0), E)
    v1, _ = expected_drift_over_measure(pal, (0.0, 1.0), E)
    assert v1 < v_mix < v0


def test_expected_drift_monte_carlo_agrees_with_exact():
    pal = (S.bump(0.5, 0.45), S.bump(1.0, 0.45))
    exact, _ = expected_drift_over_measure(pal, (0.3, 0.7), 2.0)
    mc, se = expected_drift_over_measure(pal, (0.3, 0.7), 2.0, n_configs=2000, seed=4, exact=False)
    assert se > 0
    assert abs(mc - exact) < 4 * se


def test_linear_flow_identity_and_eigenvector():
    x0 = PhaseState(0.0, [0.3, -1.0], [2.0, 0.5])
    x = linear_flow_reference(0.0, x0)
    np.testing.assert_array_equal(x.q, x0.q)
    np.testing.assert_array_equal(x.p, x0.p)
    a = np.array([0.4, -0.2])
    y = linear_flow_reference(0.7, PhaseState(0.0, a, a))
    np.testing.assert_allclose(y.q, math.exp(0.7) * a, rtol=1e-14)
    np.testing.assert_allclose(y.p, math.exp(0.7) * a, rtol=1e-14)


def test_linear_flow_series():
    ch = sum(1 / math.factorial(2 * k) for k in range(20))
    sh = sum(1 / math.factorial(2 * k + 1) for k in range(20))
    y = linear_flow_reference(1.0, PhaseState(0.0, [1.0], [0.0]))
    assert y.q[0] == pytest.approx(ch, abs=1e-14)
    assert y.p[0] == pytest.approx(sh, abs=1e-14)


def test_critical_values_degenerate():
    assert critical_values_1d(zero_field(1), (0, 1)).degenerate


def test_critical_values_single_bump():
    fld = PotentialField(FiniteConfiguration([[0.3]], [0], (S.bump(1.7, 1.0),)))
    cv = critical_values_1d(fld, (-0.5, 1.1))
    maxima = [p for p in cv.points if abs(p[1] - 1.7) < 1e-8]
    assert len(maxima) == 1
    assert maxima[0][0] == pytest.approx(0.3, abs=1e-6)


def test_critical_value_count_grows_with_window():
    pal = (S.gaussian(1.0, 0.3), S.gaussian(-0.6, 0.25), S.gaussian(0.4, 0.35))
    cfg = sample_lattice_configuration(9, LatticeBasis.cubic(1), ((-40,), (40,)), (0.4, 0.3, 0.3), pal)
    fld = PotentialField(cfg)
    counts = [len(critical_values_1d(fld, (-w, w)).distinct_values()) for w in (4, 8, 16, 32)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] > counts[0]
