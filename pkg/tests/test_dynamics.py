import numpy as np
import pytest

from randpot.dynamics import (IntegratorSpec, PhaseState, asymptotic_velocity, classify_boundedness, integrate,
                              reversibility_error, shift_commutation_error)
from randpot.oracle1d import PeriodicCell1D, drift_velocity_1d, linear_flow_reference
from randpot.randfield import (FiniteConfiguration, LatticeBasis, LatticeConfiguration, PotentialField,
                               SingleSitePotential as S, sample_lattice_configuration, zero_field)


def smooth_lattice(seed=0, n=20):
    pal = (S.bump(0.6, 0.8), S.bump(-0.4, 0.6))
    return sample_lattice_configuration(seed, LatticeBasis.cubic(2), ((-n, -n), (n, n)), (0.5, 0.5), pal)


def test_free_motion_exact():
    x0 = PhaseState(0.0, [0.5, -1.0], [0.3, 0.7])
    tr = integrate(zero_field(2), x0, 10.0, IntegratorSpec(h=1e-2, stride=100))
    np.testing.assert_allclose(tr.q, x0.q + np.outer(tr.t, x0.p), atol=1e-12)
    np.testing.assert_allclose(tr.p, np.broadcast_to(x0.p, tr.p.shape))


def test_inverted_harmonic_matches_linear_flow():
    fld = PotentialField(FiniteConfiguration([[0.0, 0.0]], [0], (S.quadratic(-1.0),)))
    x0 = PhaseState(0.0, [0.2, -0.1], [0.05, 0.3])
    tr = integrate(fld, x0, 1.0, IntegratorSpec(h=1e-4, guard=False))
    ref = linear_flow_reference(1.0, x0)
    assert np.abs(np.concatenate([tr.q[-1] - ref.q, tr.p[-1] - ref.p])).max() <= 1e-8


def test_energy_drift_small():
    pal = (S.bump(0.05, 0.7), S.zero())
    cfg = sample_lattice_configuration(5, LatticeBasis.cubic(2), ((-60, -60), (60, 60)), (0.5, 0.5), pal)
    x0 = PhaseState(0.0, [0.1, 0.2], [0.36, 0.27])
    tr = integrate(PotentialField(cfg), x0, 100.0, IntegratorSpec(h=1e-3, stride=1000))
    assert tr.reason == "time-limit"
    assert tr.rel_drift < 1e-6


def test_velocity_free():
    ve = asymptotic_velocity(zero_field(2), PhaseState(0.0, [0.0, 0.0], [0.25, -0.5]), 100.0)
    np.testing.assert_allclose(ve.v, [0.25, -0.5], rtol=1e-10)
    assert ve.gap < 1e-10


def test_velocity_cosine_matches_oracle():
    cfg = LatticeConfiguration(LatticeBasis.cubic(1), (-50,), np.zeros(800, int), (S.cosine(1.0),))
    fld = PotentialField(cfg)
    E = 2.0
    x0 = PhaseState(0.0, [0.0], [np.sqrt(2 * (E + 1))])
    ve = asymptotic_velocity(fld, x0, 300.0, IntegratorSpec(h=1e-3))
    v = drift_velocity_1d(PeriodicCell1D.cosine(), E)
    assert abs(ve.v[0] - v) / v < 1e-2


def test_boundedness_classes():
    trap = PotentialField(FiniteConfiguration([[0.0]], [0], (S.bump(1.0, 2.0, center_radius=3.0),)))
    spec = IntegratorSpec(h=1e-2, r_esc=50.0, guard=False)
    assert classify_boundedness(trap, PhaseState(0.0, [0.0], [0.5]), 100.0, spec, 10.0) == "bounded"
    assert classify_boundedness(zero_field(2), PhaseState(0.0, [0, 0], [1.0, 0.0]), 100.0, spec, 10.0) == "escaping"


def test_reversibility_free_and_lattice():
    assert reversibility_error(zero_field(2), PhaseState(0.0, [0, 0], [1.0, 2.0]), 10.0) < 1e-12
    fld = PotentialField(smooth_lattice(n=40))
    err = reversibility_error(fld, PhaseState(0.0, [0.1, 0.2], [0.6, 0.8]), 10.0, IntegratorSpec(h=1e-3))
    assert err < 1e-8


def test_shift_commutation():
    cfg = smooth_lattice(n=12)
    x0 = PhaseState(0.0, [0.3, -0.2], [0.5, 0.4])
    assert shift_commutation_error(cfg, x0, (2, -1), 5.0) <= 1e-9


def test_guard_stops_outside_window():
    cfg = LatticeConfiguration(LatticeBasis.cubic(1), (-5,), np.zeros(10, int), (S.cosine(1.0),))
    tr = integrate(PotentialField(cfg), PhaseState(0.0, [0.0], [5.0]), 100.0, IntegratorSpec(h=1e-3))
    assert tr.terminated_early


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        IntegratorSpec(h=0.0)
    with pytest.raises(ValueError):
        PhaseState(0.0, [0.0, 1.0], [1.0])
