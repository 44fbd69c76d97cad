"""Closed-form and quadrature oracles for one-dimensional motion."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .dynamics import PhaseState
from .randfield import LatticeBasis, LatticeConfiguration, PotentialField
from .rng import stream


# --------------------------------------------------------------------------
# complete elliptic integral
# --------------------------------------------------------------------------

def _agm(a: float, b: float) -> float:
    for _ in range(64):
        if abs(a - b) <= 1e-16 * a:
            break
        a, b = 0.5 * (a + b), math.sqrt(a * b)
    return 0.5 * (a + b)


def complete_elliptic_K(m: float) -> float:
    """K(m) = int_0^{pi/2} (1 - m sin^2)^{-1/2}, parameter convention, m < 1."""
    m = float(m)
    if not m < 1.0:
        raise ValueError("K(m) requires m < 1")
    if m < 0.0:
        # imaginary-modulus transformation: K(m) = K(-m/(1-m)) / sqrt(1-m)
        return complete_elliptic_K(-m / (1.0 - m)) / math.sqrt(1.0 - m)
    return 0.5 * math.pi / _agm(1.0, math.sqrt(1.0 - m))


def pendulum_drift(E: float) -> float:
    """Drift for V(q) = -cos(2 pi q), period 1, E > 1: pi sqrt(E-1) / (sqrt2 K(2/(1-E)))."""
    if not E > 1.0:
        raise ValueError("pendulum drift needs E > 1")
    return math.pi * math.sqrt(E - 1.0) / (math.sqrt(2.0) * complete_elliptic_K(2.0 / (1.0 - E)))


# --------------------------------------------------------------------------
# periodic cells and drift
# --------------------------------------------------------------------------

@dataclass
class PeriodicCell1D:
    """One period [a, a + period) of a 1D potential."""

    period: float
    V: Callable[[float], float]
    start: float = 0.0
    breakpoints: tuple = ()
    _vmax: float | None = field(default=None, repr=False)

    @classmethod
    def cosine(cls, amplitude: float = 1.0, period: float = 1.0) -> "PeriodicCell1D":
        return cls(period, lambda q: -amplitude * math.cos(2 * math.pi * q / period), 0.0, (), abs(amplitude))

    @classmethod
    def constant(cls, c: float, period: float = 1.0) -> "PeriodicCell1D":
        return cls(period, lambda q: c, 0.0, (), c)

    @classmethod
    def from_field(cls, fld: PotentialField, start: float = 0.0, period: float = 1.0) -> "PeriodicCell1D":
        return cls(period, lambda q: fld.value(np.array([q])), start)

    @property
    def v_max(self) -> float:
        if self._vmax is None:
            self._vmax = _cell_max(self)
        return self._vmax


def _cell_max(cell: PeriodicCell1D, n: int = 2049) -> float:
    xs = cell.start + cell.period * np.linspace(0.0, 1.0, n)
    vs = np.array([cell.V(x) for x in xs])
    i = int(np.argmax(vs))
    lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, n - 1)]
    res = optimize.minimize_scalar(lambda x: -cell.V(x), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
    return float(max(vs[i], -res.fun))


def transit_time(cell: PeriodicCell1D, E: float) -> float:
    """tau = int over one cell of dq / sqrt(2 (E - V(q)))."""
    if not E > cell.v_max:
        raise ValueError(f"E={E} does not exceed the cell maximum {cell.v_max}; motion does not transit")
    f = lambda q: 1.0 / math.sqrt(2.0 * (E - cell.V(q)))
    a, b = cell.start, cell.start + cell.period
    pts = [p for p in cell.breakpoints if a < p < b] or None
    val, err = integrate.quad(f, a, b, points=pts, epsabs=0.0, epsrel=1e-13, limit=400)
    return float(val)


def drift_velocity_1d(cell: PeriodicCell1D, E: float, sign: float = 1.0) -> float:
    """sigma * period / tau."""
    return math.copysign(1.0, sign) * cell.period / transit_time(cell, E)


def _cell_tau(palette, key, E, spacing, k, cache):
    if key not in cache:
        basis = LatticeBasis.cubic(1, spacing)
        cfg = LatticeConfiguration(basis, (-k,), np.array(key), tuple(palette))
        cache[key] = transit_time(PeriodicCell1D.from_field(PotentialField(cfg), 0.0, spacing), E)
    return cache[key]


def expected_drift_over_measure(palette, weights, E: float, sign: float = 1.0, n_configs: int = 1000,
                                seed: int = 0, spacing: float = 1.0, exact: bool | None = None,
                                max_exact: int = 4096) -> tuple[float, float]:
    """sigma * l1 / E_beta(tau) for the product measure with the given weights.

    tau of the cell [0, l1) depends on the marks of the cells whose sites
    reach it.  When the number of such local mark tuples is at most
    ``max_exact`` (and ``exact`` is not False) the expectation is an exact
    weighted sum; otherwise it is a Monte Carlo mean over ``n_configs`` draws.
    Returns (v, standard error); the error is 0 for the exact sum.
    """
    basis = LatticeBasis.cubic(1, spacing)
    reach = max((W.support_radius(basis) for W in palette if not W.is_zero), default=0.0)
    if not math.isfinite(reach):
        raise ValueError("palette must be compactly supported")
    k = int(math.ceil(reach / spacing)) + 1
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    cache: dict[tuple, float] = {}
    live = [j for j in range(len(palette)) if w[j] > 0]
    n_local = len(live) ** (2 * k + 1)
    if exact or (exact is None and n_local <= max_exact):
        tm = 0.0
        for key in itertools.product(live, repeat=2 * k + 1):
            tm += float(np.prod(w[list(key)])) * _cell_tau(palette, key, E, spacing, k, cache)
        return math.copysign(1.0, sign) * spacing / tm, 0.0
    rng = stream(seed, "expected-drift")
    local = rng.choice(len(palette), size=(n_configs, 2 * k + 1), p=w)
    taus = np.array([_cell_tau(palette, tuple(int(m) for m in marks), E, spacing, k, cache) for marks in local])
    tm = taus.mean()
    v = math.copysign(1.0, sign) * spacing / tm
    se = spacing / tm ** 2 * (taus.std(ddof=1) / math.sqrt(n_configs) if n_configs > 1 else 0.0)
    return v, se


def linear_flow_reference(t: float, x0: PhaseState) -> PhaseState:
    """Exact flow of H = |p|^2/2 - |q|^2/2: (p, q) -> [[cosh, sinh], [sinh, cosh]] (p, q)."""
    c, s = math.cosh(t), math.sinh(t)
    return PhaseState(x0.t + t, s * x0.p + c * x0.q, c * x0.p + s * x0.q)


# --------------------------------------------------------------------------
# critical values
# --------------------------------------------------------------------------

@dataclass
class CriticalValues:
    points: list  # sorted (q*, V(q*))
    degenerate: bool = False
    coarse: bool = False

    def __len__(self):
        return len(self.points)

    def distinct_values(self, tol: float = 1e-8) -> np.ndarray:
        v = np.sort([p[1] for p in self.points])
        if v.size == 0:
            return v
        keep = np.r_[True, np.diff(v) > tol * (1 + np.abs(v[1:]))]
        return v[keep]


def _sign_changes(dv: np.ndarray) -> np.ndarray:
    s = np.sign(dv)
    return np.nonzero((s[:-1] * s[1:] < 0) | ((s[:-1] != 0) & (s[1:] == 0)))[0]


def critical_values_1d(V: PotentialField | Callable, interval, resolution: int = 4096,
                       xtol: float = 1e-10) -> CriticalValues:
    """Zeros of V' located by sign changes on a grid and refined by bisection."""
    if isinstance(V, PotentialField):
        fld = V
        val = lambda x: fld.value(np.array([x]))
        der = lambda x: float(fld.gradient(np.array([x]))[0])
        der_v = lambda xs: fld.evaluate_many(xs[:, None])[1][:, 0]
    else:
        val = V
        der = lambda x: (V(x + 1e-6) - V(x - 1e-6)) / 2e-6
        der_v = lambda xs: np.array([der(x) for x in xs])
    a, b = map(float, interval)
    xs = np.linspace(a, b, resolution + 1)
    dv = der_v(xs)
    scale = max(np.max(np.abs(dv)), 0.0)
    if scale < 1e-14:
        return CriticalValues([], degenerate=True)
    idx = _sign_changes(dv)
    xs2 = np.linspace(a, b, 2 * resolution + 1)
    coarse = len(_sign_changes(der_v(xs2))) > len(idx)
    pts = []
    for i in idx:
        lo, hi = xs[i], xs[i + 1]
        if dv[i + 1] == 0.0:
            r = hi
        else:
            r = optimize.bisect(der, lo, hi, xtol=xtol, maxiter=200)
        pts.append((float(r), float(val(r))))
    if dv[0] == 0.0:
        pts.insert(0, (a, float(val(a))))
    return CriticalValues(sorted(pts), degenerate=False, coarse=coarse)
