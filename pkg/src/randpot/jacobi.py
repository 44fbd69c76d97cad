"""Jacobi-Maupertuis geometry of the conformal metric (E - V) g_Euclid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .dynamics import IntegratorSpec, PhaseState
from .dynamics import integrate as integrate_flow
from .randfield import PotentialField


class DegenerateMetricError(ValueError):
    """E <= V(q): the conformal factor vanishes or is negative."""


class CurvatureMismatchError(RuntimeError):
    """The two scalar-curvature expressions disagree beyond tolerance."""


class NonMonotonePredicateError(RuntimeError):
    def __init__(self, message, offending):
        super().__init__(message)
        self.offending = offending


@dataclass(frozen=True)
class JacobiMetric:
    """g = (E - V) g_Euclid, or (1 - V/E) g_Euclid when ``normalized``.

    The normalized metric is the absolute one divided by E, so its curvatures
    are E times larger.
    """

    field: PotentialField
    E: float
    normalized: bool = False

    @property
    def d(self) -> int:
        return self.field.d

    @property
    def _scale(self) -> float:
        return self.E if self.normalized else 1.0

    def factor(self, q) -> float:
        lam = self.E - self.field.value(q)
        if not lam > 0:
            raise DegenerateMetricError(f"E={self.E} <= V(q) at {np.asarray(q).tolist()}")
        return lam / self.E if self.normalized else lam

    def factors(self, Q) -> np.ndarray:
        lam = self.E - self.field.values(Q)
        return lam / self.E if self.normalized else lam


def _lambda_derivs(metric: JacobiMetric, q):
    fv = metric.field.evaluate(q)
    lam = metric.E - fv.V
    if not lam > 0:
        raise DegenerateMetricError(f"E={metric.E} <= V(q) at {np.asarray(q).tolist()}")
    return lam, fv


def gaussian_curvature(metric: JacobiMetric, q) -> float:
    """[(E - V) Lap V + |grad V|^2] / (2 (E - V)^3), d = 2."""
    if metric.d != 2:
        raise ValueError("gaussian curvature needs d = 2")
    lam, fv = _lambda_derivs(metric, q)
    g2 = float(fv.grad @ fv.grad)
    return metric._scale * (lam * fv.lap + g2) / (2.0 * lam ** 3)


def _lap_fd(f, q, h):
    """Fourth-order 5-point Laplacian of a scalar function."""
    q = np.asarray(q, dtype=float)
    f0 = f(q)
    tot = 0.0
    for e in np.eye(q.size):
        tot += (-f(q + 2 * h * e) + 16 * f(q + h * e) - 30 * f0 + 16 * f(q - h * e) - f(q - 2 * h * e)) / (12 * h * h)
    return tot


def scalar_curvature_conformal(metric: JacobiMetric, q, h: float = 1e-3) -> float:
    """4(1-d)/(d-2) u^{-(d+2)/(d-2)} Lap u, u = (E-V)^{(d-2)/4}, Lap u by finite differences of V."""
    d = metric.d
    a = (d - 2) / 4.0
    u = lambda x: (metric.E - metric.field.value(x)) ** a
    u0 = u(q)
    return metric._scale * 4.0 * (1 - d) / (d - 2) * u0 ** (-(d + 2) / (d - 2)) * _lap_fd(u, q, h)


def scalar_curvature(metric: JacobiMetric, q, rtol: float = 1e-4, check: bool = True) -> float:
    """(1-d)/(E-V)^3 [(V-E) Lap V + (d-6)/4 |grad V|^2], cross-checked against the conformal form."""
    d = metric.d
    if d < 3:
        raise ValueError("scalar curvature formula needs d >= 3")
    lam, fv = _lambda_derivs(metric, q)
    g2 = float(fv.grad @ fv.grad)
    R = metric._scale * (1 - d) / lam ** 3 * (-lam * fv.lap + (d - 6) / 4.0 * g2)
    if check:
        h = 1e-3
        R2 = scalar_curvature_conformal(metric, q, h)
        scale = max(abs(R), metric._scale * (abs(fv.lap) + g2) / lam ** 2 * 1e-6, 1e-300)
        # roundoff floor of the 5-point Laplacian (flat metrics have R = 0 exactly)
        atol = metric._scale * 4.0 * (d - 1) / (d - 2) * 64 * d * np.finfo(float).eps / (h * h * lam)
        if abs(R - R2) > rtol * scale and abs(R - R2) > atol:
            raise CurvatureMismatchError(f"scalar curvature mismatch {R} vs {R2} at {np.asarray(q).tolist()}")
    return float(R)


# --------------------------------------------------------------------------
# Brioschi oracle
# --------------------------------------------------------------------------

def _d1(f, q, k, h):
    e = np.zeros(2)
    e[k] = h
    return (-f(q + 2 * e) + 8 * f(q + e) - 8 * f(q - e) + f(q - 2 * e)) / (12 * h)


def _d2(f, q, k, h):
    e = np.zeros(2)
    e[k] = h
    return (-f(q + 2 * e) + 16 * f(q + e) - 30 * f(q) + 16 * f(q - e) - f(q - 2 * e)) / (12 * h * h)


def _d11(f, q, h):
    """Mixed second derivative by nested first differences."""
    return _d1(lambda x: _d1(f, x, 1, h), q, 0, h)


def _richardson(fn, h):
    a, b = fn(h), fn(h / 2)
    return (16 * b - a) / 15


def brioschi_curvature(metric: JacobiMetric, q, h: float = 1e-4) -> float:
    """Gaussian curvature of the first fundamental form (E, F, G) = (lam, 0, lam) from
    the Brioschi formula, derivatives by 5-point stencils with Richardson extrapolation."""
    q = np.asarray(q, dtype=float)
    lam = lambda x: metric.factor(x)
    Ef = Gf = lam
    Ff = lambda x: 0.0
    E, F, G = Ef(q), Ff(q), Gf(q)
    D = lambda f, k: _richardson(lambda s: _d1(f, q, k, s), h)
    DD = lambda f, k: _richardson(lambda s: _d2(f, q, k, s), h)
    Eu, Ev, Gu, Gv = D(Ef, 0), D(Ef, 1), D(Gf, 0), D(Gf, 1)
    Fu, Fv = 0.0, 0.0
    Evv, Guu = DD(Ef, 1), DD(Gf, 0)
    Fuv = 0.0
    M1 = np.array([[-0.5 * Evv + Fuv - 0.5 * Guu, 0.5 * Eu, Fu - 0.5 * Ev],
                   [Fv - 0.5 * Gu, E, F],
                   [0.5 * Gv, F, G]])
    M2 = np.array([[0.0, 0.5 * Ev, 0.5 * Gu],
                   [0.5 * Ev, E, F],
                   [0.5 * Gu, F, G]])
    return float((np.linalg.det(M1) - np.linalg.det(M2)) / (E * G - F * F) ** 2)


# --------------------------------------------------------------------------
# curvature threshold
# --------------------------------------------------------------------------

@dataclass
class ThresholdResult:
    lo: float  # predicate false (or lower scan bound when always true)
    hi: float  # predicate true
    energies: np.ndarray
    predicate: np.ndarray
    monotone: bool
    grid_points: int
    excluded: int

    @property
    def estimate(self) -> float:
        return 0.5 * (self.lo + self.hi)


def curvature_grid(field: PotentialField, lo, hi, n: int, exclusion_radius: float = 0.0):
    """Half-open n x n probe grid with points near singular sites removed; returns
    (Q, V, |grad V|^2, Lap V, excluded_count)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    ax = [lo[k] + (hi[k] - lo[k]) * (np.arange(n) + 0.5) / n for k in range(2)]
    Q = np.stack([g.ravel() for g in np.meshgrid(*ax, indexing="ij")], axis=1)
    keep = np.ones(len(Q), bool)
    for s in field.singular_points:
        keep &= np.linalg.norm(Q - s, axis=1) > exclusion_radius
    Qk = Q[keep]
    V, G, H, sing = field.evaluate_many(Qk, hessian=True)
    ok = ~sing
    return Qk[ok], V[ok], np.einsum("ij,ij->i", G[ok], G[ok]), np.trace(H[ok], axis1=1, axis2=2), int(len(Q) - ok.sum())


def _grid_predicate(E, V, g2, lap):
    lam = E - V
    if np.any(lam <= 0):
        return False
    K = (lam * lap + g2) / (2 * lam ** 3)
    return bool(np.max(K) <= 0.0)


def curvature_threshold(field: PotentialField, lo, hi, n: int = 200, exclusion_radius: float = 1e-2,
                        E_max: float | None = None, n_scan: int = 48, rtol: float = 1e-3,
                        strict: bool = True) -> ThresholdResult:
    """Smallest E with max-grid Gaussian curvature <= 0, bracketed by bisection.

    The predicate is first scanned on a geometric E grid above max V; a
    true -> false transition along increasing E is reported as non-monotone.
    """
    Q, V, g2, lap, excl = curvature_grid(field, lo, hi, n, exclusion_radius)
    vmax = float(V.max())
    base = vmax + max(1e-9, 1e-9 * abs(vmax))
    if E_max is None:
        E_max = base + 1e4 * (1.0 + abs(vmax))
    offs = np.geomspace(max(1e-6, 1e-6 * abs(base)), E_max - base, n_scan)
    Es = np.r_[base, base + offs]
    P = np.array([_grid_predicate(E, V, g2, lap) for E in Es])
    first = int(np.argmax(P)) if P.any() else -1
    monotone = first >= 0 and bool(P[first:].all())
    if first >= 0 and not monotone:
        bad = Es[first:][~P[first:]]
        if strict:
            raise NonMonotonePredicateError(f"curvature predicate not monotone in E at {bad.tolist()}", bad)
    if first < 0:
        raise ValueError(f"no non-positive curvature energy found below E_max={E_max}")
    if first == 0:
        return ThresholdResult(Es[0], Es[0], Es, P, monotone, len(Q), excl)
    a, b = Es[first - 1], Es[first]
    while b - a > rtol * abs(b):
        m = 0.5 * (a + b)
        if _grid_predicate(m, V, g2, lap):
            b = m
        else:
            a = m
    return ThresholdResult(a, b, Es, P, monotone, len(Q), excl)


def curvature_map(metric: JacobiMetric, lo, hi, n: int, exclusion_radius: float = 0.0):
    """Rows (x, y, K) over the half-open grid; points with E <= V or near singular sites get NaN."""
    Q, V, g2, lap, _ = curvature_grid(metric.field, lo, hi, n, exclusion_radius)
    lam = metric.E - V
    with np.errstate(divide="ignore", invalid="ignore"):
        K = np.where(lam > 0, metric._scale * (lam * lap + g2) / (2 * lam ** 3), np.nan)
    return np.column_stack([Q, K])


# --------------------------------------------------------------------------
# geodesic vs trajectory
# --------------------------------------------------------------------------

@dataclass
class GeodesicComparison:
    max_deviation: float
    arclength: float
    complete: bool


def geodesic_vs_trajectory(metric: JacobiMetric, x0: PhaseState, S: float, h: float = 1e-4,
                           floor: float = 1e-6) -> GeodesicComparison:
    """Max distance between the Hamiltonian orbit (reparametrized by Jacobi arclength
    ds = sqrt(2) (E - V) dt) and the metric geodesic with the same initial direction.

    The metric is the absolute (E - V) g_Euclid one; E is taken from x0.
    """
    fld = metric.field
    E = 0.5 * float(x0.p @ x0.p) + fld.value(x0.q)
    lam0 = E - fld.value(x0.q)
    if not lam0 > floor:
        raise DegenerateMetricError("initial point at a turning point")
    d = fld.d

    def rhs(s, y):
        x, v = y[:d], y[d:]
        fv = fld.evaluate(x)
        lam = E - fv.V
        if lam < floor:
            raise DegenerateMetricError("turning point")
        gphi = -0.5 * fv.grad / lam  # grad of phi = log(lam)/2
        acc = -2.0 * (gphi @ v) * v + (v @ v) * gphi
        return np.concatenate([v, acc])

    v0 = x0.p / np.linalg.norm(x0.p) / math.sqrt(lam0)
    # integrate the trajectory long enough to cover arclength S
    T_guess = 1.5 * S / (math.sqrt(2.0) * max(lam0, floor))
    complete = True
    s_acc, t_acc = [0.0], [0.0]
    q_traj = [x0.q.copy()]
    state = x0
    while s_acc[-1] < S:
        tr = integrate_flow(fld, state, T_guess, IntegratorSpec(h=h, stride=1, guard=False))
        lam = E - fld.values(tr.q)
        if np.any(lam < floor):
            complete = False
            cut = int(np.argmax(lam < floor))
            tr.q, tr.t, lam = tr.q[:cut], tr.t[:cut], lam[:cut]
        ds = math.sqrt(2.0) * 0.5 * (lam[1:] + lam[:-1]) * np.diff(tr.t)
        s_acc.extend((s_acc[-1] + np.cumsum(ds)).tolist())
        q_traj.extend(tr.q[1:])
        if not complete or tr.terminated_early:
            complete = False
            break
        state = tr.final
    s_arr = np.array(s_acc)
    q_arr = np.array(q_traj)
    complete = complete and bool(s_arr[-1] >= S)
    sel = s_arr <= S
    s_arr, q_arr = s_arr[sel], q_arr[sel]
    try:
        sol = integrate.solve_ivp(rhs, (0.0, s_arr[-1]), np.concatenate([x0.q, v0]), method="DOP853",
                                  rtol=1e-12, atol=1e-13, dense_output=True)
    except DegenerateMetricError:
        return GeodesicComparison(math.nan, float(s_arr[-1]), False)
    geo = sol.sol(s_arr)[:d].T
    dev = float(np.max(np.linalg.norm(geo - q_arr, axis=1)))
    return GeodesicComparison(dev, float(s_arr[-1]), complete)
