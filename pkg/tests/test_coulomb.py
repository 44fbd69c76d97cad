import math

import numpy as np
import pytest
from scipy.optimize import brentq

from randpot.coulomb import (BranchFunction, CoulombSystem, RegularizationSpec, SingularSite, from_chart,
                             integrate_regularized, lift_to_cover, monodromy_check, random_loops, return_distance,
                             shoot_collision_orbit, singularity_strength, to_chart, winding_count)
from randpot.dynamics import IntegratorSpec, PhaseState, integrate
from randpot.randfield import SingleSitePotential as S

CIRCLE = np.exp(1j * np.linspace(0, 2 * np.pi, 200))


def test_singularity_strength():
    assert singularity_strength(S.yukawa(1.0, 1.0)) == pytest.approx(-1.0)
    assert singularity_strength(S.finite_range(2.0, 1.0, 3)) == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        singularity_strength(S.zero())
    with pytest.raises(ValueError):
        SingularSite(0j, S.gaussian())


def test_chart_roundtrip():
    q, p = np.array([0.3, -0.4]), np.array([1.1, 0.2])
    z, w = to_chart(q, p, 0.1 + 0.2j)
    q2, p2 = from_chart(z, w, 0.1 + 0.2j)
    np.testing.assert_allclose(q2, q, atol=1e-14)
    np.testing.assert_allclose(p2, p, atol=1e-14)


def test_kepler_radial_collision_time_law():
    # V = -1/r from rest at r0 = 1: r = (1 + cos th)/2, t = (th + sin th)/sqrt(8)
    sites = [SingularSite.yukawa(0j, 1.0, 0.0)]
    tc = math.pi / 2 * math.sqrt(0.5)
    tr = integrate_regularized(sites, None, PhaseState(0.0, [1.0, 0.0], [0.0, 0.0]), 2 * tc,
                               RegularizationSpec(h=1e-4))
    assert tr.collisions == 1
    assert tr.max_drift <= 1e-6
    r = np.hypot(*tr.q.T)
    assert tr.t[np.argmin(r)] == pytest.approx(tc, abs=1e-4)

    def r_exact(t):
        th = brentq(lambda a: (a + math.sin(a)) / math.sqrt(8) - t, 0.0, math.pi)
        return 0.5 * (1 + math.cos(th))

    idx = np.nonzero(tr.t < tc)[0][::50]
    assert max(abs(r[k] - r_exact(tr.t[k])) for k in idx) <= 1e-4
    # the orbit is reflected back along the same ray
    np.testing.assert_allclose(tr.q[-1], [1.0, 0.0], atol=1e-6)


def test_radial_drop_symmetric_about_collision():
    sites = [SingularSite.yukawa(0j, 1.0, 1.0)]
    tr = integrate_regularized(sites, None, PhaseState(0.0, [0.0, 0.8], [0.0, 0.0]), 3.0,
                               RegularizationSpec(h=1e-4))
    assert tr.collisions >= 1
    r = np.hypot(*tr.q.T)
    tc = tr.t[int(np.argmin(r))]
    # chart samples are uniform in fictitious time, so compare by interpolation in t
    s = np.linspace(0.0, min(tc, tr.t[-1] - tc), 400)
    np.testing.assert_allclose(np.interp(tc - s, tr.t, r), np.interp(tc + s, tr.t, r), atol=1e-6)


def test_outside_switch_disks_matches_smooth_integrator():
    system = CoulombSystem([SingularSite.yukawa(0j, 1.0, 1.0)])
    x0 = PhaseState(0.0, [3.0, 0.0], [0.0, 1.2])
    a = integrate_regularized(system, None, x0, 5.0, RegularizationSpec(h=1e-3, stride=100))
    b = integrate(system.field, x0, 5.0, IntegratorSpec(h=1e-3, stride=100, guard=False))
    assert a.transitions == 0
    np.testing.assert_allclose(a.q, b.q, atol=1e-12)
    np.testing.assert_allclose(a.p, b.p, atol=1e-12)


def test_bound_radial_orbit_returns():
    # short-range site, no background, E < 0: the radial orbit keeps returning to the site
    sites = [SingularSite.yukawa(0j, 1.0, 2.0)]
    tr = integrate_regularized(sites, None, PhaseState(0.0, [0.3, 0.0], [0.0, 0.0]), 5.0,
                               RegularizationSpec(h=1e-4))
    assert tr.E0 < 0
    assert tr.collisions >= 2


def test_lift_to_cover_signs():
    one = BranchFunction([0j])
    assert lift_to_cover(one, 3 + 0.5 * CIRCLE).sign == 1
    assert lift_to_cover(one, CIRCLE).sign == -1
    two = BranchFunction([0j, 1j])
    assert lift_to_cover(two, 3 * CIRCLE).sign == 1
    assert lift_to_cover(two, 0.5 * CIRCLE).sign == -1
    assert lift_to_cover(one, 2 * CIRCLE).reliable


def test_winding_count():
    assert winding_count(CIRCLE, 0j) == 1
    assert winding_count(CIRCLE[::-1], 0j) == -1
    assert winding_count(CIRCLE, 2 + 0j) == 0


def test_monodromy_random_loops():
    branch = BranchFunction([0j, 0.7 + 0.2j, -0.5 - 0.6j])
    chk = monodromy_check(branch, random_loops(3, 30))
    assert chk.failures == 0
    assert chk.n_loops == 30


def test_shoot_symmetric_pair_recovers_axis():
    sites = [SingularSite.yukawa(-1.0, 1.0, 1.0), SingularSite.yukawa(1.0, 1.0, 1.0)]
    res = shoot_collision_orbit(sites, None, 1.0, 0, 1, (-0.3, 0.4), RegularizationSpec(h=1e-3), T_max=20.0)
    assert res.found
    assert abs(res.angle) <= 1e-8


def test_shoot_no_sign_change_reports_not_found():
    sites = [SingularSite.yukawa(-1.0, 1.0, 1.0), SingularSite.yukawa(1.0, 1.0, 1.0)]
    res = shoot_collision_orbit(sites, None, 1.0, 0, 1, (0.2, 0.4), RegularizationSpec(h=1e-3), T_max=20.0)
    assert not res.found


def test_shoot_retrace():
    sites = [SingularSite.yukawa(-1.0, 1.0, 1.0), SingularSite.yukawa(1.0 + 0.3j, 1.3, 0.7)]
    spec = RegularizationSpec(h=1e-3)
    axial = math.atan2(0.3, 2.0)
    res = shoot_collision_orbit(sites, None, 3.0, 0, 1, (axial - 0.2, axial + 0.2), spec, T_max=20.0)
    assert res.found
    dist, _ = return_distance(sites, None, 3.0, 0, 1, res, spec)
    assert dist <= 1e-5


def test_overlapping_switch_disks_rejected():
    with pytest.raises(ValueError):
        CoulombSystem([SingularSite.yukawa(0j), SingularSite.yukawa(0.1)], r_sw=0.2)
