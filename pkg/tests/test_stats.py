import math

import numpy as np
import pytest

from randpot.dynamics import IntegratorSpec, PhaseState, integrate
from randpot.randfield import (FiniteConfiguration, LatticeBasis, LatticeConfiguration, PotentialField,
                               SingleSitePotential as S, zero_field)
from randpot.stats import (EnsembleSpec, FixedFieldSampler, LatticeFieldSampler, PoissonFieldSampler,
                           energy_velocity_distribution, inversion_symmetry_test, liouville_mass_estimate,
                           make_histogram, phase_space_mass, poisson_sampler_check, recurrence_rate)


def small_spec(**kw):
    base = dict(n_configs=1, per_config=200, T=5.0, integrator=IntegratorSpec(h=1e-2), n=3.0, E_max=1.0,
                e_bins=2, v_bins=3, chunk=100)
    base.update(kw)
    return EnsembleSpec(**base)


def test_symmetric_counts_distance_zero():
    h = make_histogram(np.linspace(0, 1, 3), [np.linspace(-1, 1, 5)] * 2)
    for E in (0.2, 0.7):
        for v in ([0.3, -0.6], [-0.1, 0.9]):
            h.add(E, v)
            h.add(E, -np.asarray(v))
    r = inversion_symmetry_test(h)
    assert r.distance == 0.0 and r.passed


def test_asymmetric_counts_fail():
    h = make_histogram(np.linspace(0, 1, 2), [np.linspace(-1, 1, 3)])
    for _ in range(100):
        h.add(0.5, [0.5])
    r = inversion_symmetry_test(h)
    assert r.distance == pytest.approx(1.0) and not r.passed


def test_free_ensemble_on_paraboloid_and_symmetric():
    spec = small_spec(per_config=1000, chunk=250, e_bins=2, v_bins=4)
    hist = energy_velocity_distribution(FixedFieldSampler(zero_field(2)), spec, seed=3)
    assert hist.n_samples == 1000
    assert inversion_symmetry_test(hist).passed
    # every occupied (E, v) bin must be compatible with E = |v|^2 / 2
    for idx in zip(*np.nonzero(hist.counts)):
        e_lo, e_hi = hist.e_edges[idx[0]], hist.e_edges[idx[0] + 1]
        vmin2 = vmax2 = 0.0
        for k, e in enumerate(hist.v_edges):
            a, b = e[idx[1 + k]], e[idx[1 + k] + 1]
            vmin2 += 0.0 if a <= 0 <= b else min(a * a, b * b)
            vmax2 += max(a * a, b * b)
        assert 0.5 * vmin2 <= e_hi and 0.5 * vmax2 >= e_lo


def test_random_lattice_ensemble_symmetric_and_deterministic():
    pal = (S.bump(0.6, 0.8), S.bump(-0.4, 0.6))
    sampler = LatticeFieldSampler(LatticeBasis.cubic(2), ((-12, -12), (12, 12)), (0.5, 0.5), pal)
    spec = small_spec(per_config=400)
    a = energy_velocity_distribution(sampler, spec, seed=5)
    b = energy_velocity_distribution(sampler, spec, seed=5, workers=2)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert inversion_symmetry_test(a).passed


def test_cosine_slice_concentrates_at_oracle_drift():
    from randpot.oracle1d import PeriodicCell1D, drift_velocity_1d

    cfg = LatticeConfiguration(LatticeBasis.cubic(1), (-400,), np.zeros(800, int), (S.cosine(1.0),))
    v = drift_velocity_1d(PeriodicCell1D.cosine(), 2.0)
    # the slice [1.95, 2.05] is the top energy bin; lower energies land in bin 0
    e_edges = np.array([-1.5, 1.95, 2.05])
    v_edges = [np.array([-3.0, -v - 0.1, -v + 0.1, v - 0.1, v + 0.1, 3.0])]
    spec = small_spec(per_config=400, T=30.0, n=2.0, E_max=2.05, integrator=IntegratorSpec(h=5e-3))
    hist = energy_velocity_distribution(FixedFieldSampler(PotentialField(cfg)), spec, seed=1,
                                        e_edges=e_edges, v_edges=v_edges)
    row = hist.energy_slice(2.0)
    assert row.sum() >= 5
    assert row[1] + row[3] == row.sum()


def test_liouville_zero_field_is_pi():
    m = liouville_mass_estimate(zero_field(2), 0.5, n_samples=1000)
    assert m.value == pytest.approx(math.pi, rel=1e-14)
    assert m.stderr == 0.0


def test_liouville_constant_field_exact():
    # smoothed indicators on every lattice cell sum to a constant
    c = 0.3
    cfg = LatticeConfiguration(LatticeBasis.cubic(2), (-4, -4), np.zeros((9, 9), int), (S.smoothed_indicator(c),))
    fld = PotentialField(cfg)
    m = liouville_mass_estimate(fld, 0.5, n_samples=2000)
    assert m.value == pytest.approx(math.pi * 2 * (0.5 - c), rel=1e-12)


def test_liouville_vs_phase_space_mc():
    pal = (S.bump(0.8, 0.4), S.bump(-0.5, 0.3))
    sampler = PoissonFieldSampler(((-2, -2), (3, 3)), (1.0, 1.0), pal)
    fld = sampler(17)
    a = liouville_mass_estimate(fld, 0.3, n_samples=50000, seed=1)
    b = phase_space_mass(fld, 0.3, n_samples=50000, seed=2)
    assert abs(a.value - b.value) <= 3 * math.hypot(a.stderr, b.stderr)


def test_recurrence_librating_orbit_linear():
    trap = PotentialField(FiniteConfiguration([[0.0]], [0], (S.quadratic(1.0),)))
    spec = IntegratorSpec(h=1e-2, stride=1, guard=False)
    counts = []
    for T in (100.0, 200.0, 400.0):
        tr = integrate(trap, PhaseState(0.0, [0.5], [0.0]), T, spec)
        counts.append(recurrence_rate(tr, [0.4], [0.6], min_gap=1.0).count)
    period = 2 * math.pi
    for T, n in zip((100.0, 200.0, 400.0), counts):
        assert abs(n - T / period) <= 1.5


def test_recurrence_free_orbit_at_most_once():
    tr = integrate(zero_field(1), PhaseState(0.0, [-3.0], [1.0]), 50.0, IntegratorSpec(h=1e-2))
    assert recurrence_rate(tr, [0.0], [1.0]).count <= 1


def test_recurrence_on_torus_positive():
    tr = integrate(zero_field(2), PhaseState(0.0, [0.1, 0.1], [1.0, math.sqrt(2)]), 100.0, IntegratorSpec(h=1e-2))
    rec = recurrence_rate(tr, [0.0, 0.0], [0.5, 0.5], min_gap=0.1, basis=LatticeBasis.cubic(2))
    assert rec.count > 10


def test_poisson_sampler_statistics():
    chk = poisson_sampler_check(((0.0, 0.0), (1.0, 2.0)), (0.5, 1.0), (S.bump(), S.bump(-1)), n_draws=4000,
                                seed=2)
    assert chk.passed()
    assert chk.empty_expected[0] == pytest.approx(math.exp(-1.0))
