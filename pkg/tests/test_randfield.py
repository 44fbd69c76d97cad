import numpy as np
import pytest

from randpot.randfield import (FiniteConfiguration, LatticeBasis, LatticeConfiguration, PotentialField,
                               SingleSitePotential as S, SingularPointError, as_finite, dumps_configuration,
                               estimate_range, evaluate_field, loads_configuration, sample_lattice_configuration,
                               sample_poisson_configuration, shift_configuration, single_site_field, zero_field)


@pytest.fixture
def lattice_cfg():
    pal = (S.bump(0.6, 0.8), S.bump(-0.4, 0.6))
    return sample_lattice_configuration(7, LatticeBasis.cubic(2), ((-6, -6), (6, 6)), (0.5, 0.5), pal)


def test_degenerate_weights_all_mark_zero():
    cfg = sample_lattice_configuration(1, LatticeBasis.cubic(2), ((0, 0), (5, 5)), (1.0, 0.0),
                                       (S.gaussian(), S.zero()))
    assert np.all(cfg.assignment == 0)


def test_lattice_frequencies_binomial():
    n = 100
    cfg = sample_lattice_configuration(3, LatticeBasis.cubic(2), ((0, 0), (n, n)), (0.5, 0.5),
                                       (S.zero(), S.gaussian()))
    frac = cfg.assignment.mean()
    sigma = np.sqrt(0.25 / n**2)
    assert abs(frac - 0.5) < 3 * sigma


def test_lattice_determinism():
    args = (LatticeBasis.cubic(1), ((0,), (50,)), (0.3, 0.7), (S.zero(), S.gaussian()))
    assert sample_lattice_configuration(5, *args) == sample_lattice_configuration(5, *args)
    assert sample_lattice_configuration(5, *args) != sample_lattice_configuration(6, *args)


def test_bad_weights_rejected():
    with pytest.raises(ValueError):
        sample_lattice_configuration(0, LatticeBasis.cubic(1), ((0,), (3,)), (0.6, 0.6), (S.zero(), S.zero()))


def test_poisson_zero_intensity_empty():
    cfg = sample_poisson_configuration(0, ((0, 0), (3, 3)), (0.0,), (S.bump(),))
    assert cfg.points.shape == (0, 2)


def test_poisson_points_in_window():
    cfg = sample_poisson_configuration(11, ((-1, 0), (2, 1)), (2.0, 3.0), (S.bump(), S.bump(-1)))
    assert np.all(cfg.points >= cfg.window_lo) and np.all(cfg.points < cfg.window_hi)
    assert cfg.counts().sum() == len(cfg.points)


def test_empty_configuration_field():
    V, g, H, lap = evaluate_field(zero_field(3), [0.3, -1.0, 2.0])
    assert V == 0 and lap == 0 and not g.any() and not H.any()


def test_single_site_exact():
    W = S.gaussian(1.3, 0.7)
    fld = single_site_field(W, [0.0, 0.0])
    q = np.array([0.4, -0.2])
    r2 = q @ q
    V, g, _, _ = evaluate_field(fld, q)
    assert V == pytest.approx(1.3 * np.exp(-r2 / (2 * 0.49)), rel=1e-13)
    np.testing.assert_allclose(g, -q / 0.49 * V, rtol=1e-12)


def test_laplacian_is_hessian_trace(lattice_cfg):
    fld = PotentialField(lattice_cfg)
    _, _, H, lap = evaluate_field(fld, [0.37, 0.11])
    assert lap == pytest.approx(np.trace(H))
    np.testing.assert_allclose(H, H.T, atol=1e-14)


def test_gradient_matches_finite_difference(lattice_cfg):
    fld = PotentialField(lattice_cfg)
    q = np.array([0.23, -0.41])
    g = fld.gradient(q)
    h = 1e-6
    fd = [(fld.value(q + h * e) - fld.value(q - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_shift_equivariance_probes(lattice_cfg):
    rng = np.random.default_rng(0)
    fld = PotentialField(lattice_cfg)
    for _ in range(10):
        ell = rng.integers(-2, 3, size=2)
        sh = PotentialField(shift_configuration(lattice_cfg, ell))
        q = rng.uniform(-2, 2, size=2)
        a, b = evaluate_field(sh, q), evaluate_field(fld, q + ell)
        assert abs(a[0] - b[0]) <= 1e-12
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)
        np.testing.assert_allclose(a[2], b[2], atol=1e-12)


def test_shift_group_laws(lattice_cfg):
    assert shift_configuration(lattice_cfg, (0, 0)) == lattice_cfg
    assert shift_configuration(shift_configuration(lattice_cfg, (2, -1)), (-2, 1)) == lattice_cfg
    a = shift_configuration(shift_configuration(lattice_cfg, (1, 3)), (2, -1))
    assert a == shift_configuration(lattice_cfg, (3, 2))


def test_shift_moves_sites_by_minus_ell():
    cfg = FiniteConfiguration([[1.0, 2.0]], [0], (S.bump(),))
    np.testing.assert_allclose(shift_configuration(cfg, (1, 1)).points, [[0.0, 1.0]])


def test_estimate_range_zero():
    r = estimate_range(zero_field(2), (0, 0), (1, 1), 8)
    assert (r.v_min, r.v_max) == (0.0, 0.0)


def test_estimate_range_bump_minimum():
    fld = single_site_field(S.bump(-1.0, 1.0), [0.5, 0.5])
    r = estimate_range(fld, (0, 0), (1, 1), 200)
    assert abs(r.v_min + 1) < 1e-3


def test_estimate_range_refinement_monotone(lattice_cfg):
    fld = PotentialField(lattice_cfg)
    prev = None
    for n in (8, 16, 32, 64):
        r = estimate_range(fld, (-3, -3), (3, 3), n)
        if prev is not None:
            assert r.v_min <= prev.v_min and r.v_max >= prev.v_max
        prev = r


def test_singular_site_raises():
    fld = single_site_field(S.yukawa(1.0, 1.0), [0.0, 0.0])
    with pytest.raises(SingularPointError):
        fld.value([0.0, 0.0])
    assert fld.value([1.0, 0.0]) == pytest.approx(-np.exp(-1.0))


def test_cosine_lattice_sums_to_cosine():
    pal = (S.cosine(1.0),)
    cfg = LatticeConfiguration(LatticeBasis.cubic(1), (-20,), np.zeros(41, int), pal)
    fld = PotentialField(cfg)
    for q in (0.0, 0.25, 0.37, 1.9):
        assert fld.value([q]) == pytest.approx(-np.cos(2 * np.pi * q), abs=1e-12)


def test_serialization_roundtrip(lattice_cfg):
    back = loads_configuration(dumps_configuration(lattice_cfg))
    fa, fb = PotentialField(lattice_cfg), PotentialField(back)
    q = [0.31, 0.77]
    assert fa.value(q) == fb.value(q)
    fin = as_finite(lattice_cfg)
    assert loads_configuration(dumps_configuration(fin)) == fin
