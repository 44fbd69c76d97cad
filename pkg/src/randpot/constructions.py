"""Explicit configurations behind the non-ergodicity arguments.

* density point sets approximating a radial profile U by scaled translates of
  a single site W (I = int W > 0), and the confining barrier built from them;
* the effective radial potential and circular-orbit design (I < 0), with a
  Floquet ellipticity check of the periodic orbit;
* two focusing mirrors made from hyperplane sums of W (I = 0);
* the slowly varying lattice configuration without asymptotic velocity;
* scaling operators (motions, spatial and energy scalings).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import integrate as sint
from scipy.interpolate import CubicHermiteSpline

from .dynamics import IntegratorSpec, PhaseState, flow_map, integrate
from .randfield import (Configuration, FiniteConfiguration, LatticeBasis, LatticeConfiguration, PotentialField,
                        SingleSitePotential, as_finite)


# --------------------------------------------------------------------------
# single-site scaling and scaling operators
# --------------------------------------------------------------------------

def scale_potential(W: SingleSitePotential, a: float, d: int) -> SingleSitePotential:
    """W_a(q) = a^{-d} W(q / a); the integral over R^d is unchanged."""
    if not a > 0:
        raise ValueError("scale a must be positive")
    return W.with_scaling(amplitude_factor=a ** (-d), length_factor=a)


@dataclass(frozen=True)
class ScalingOp:
    """A motion q -> O q + v, a spatial scaling by c, or an energy scaling by e.

    Each op maps states of the transformed system (potential V o M, V(c q),
    e V respectively) to states of the original one:

        motion:  (t, p, q) -> (t, O p, O q + v)
        spatial: (t, p, q) -> (c t, p, c q)
        energy:  (t, p, q) -> (sqrt(e) t, p / sqrt(e), q)
    """

    kind: str
    O: np.ndarray | None = None
    v: np.ndarray | None = None
    c: float = 1.0
    e: float = 1.0

    def __post_init__(self):
        if self.kind == "motion":
            O = np.atleast_2d(np.asarray(self.O, dtype=float))
            if O.shape[0] != O.shape[1] or not np.allclose(O.T @ O, np.eye(O.shape[0]), atol=1e-12):
                raise ValueError("motion matrix must be orthogonal")
            if np.linalg.det(O) < 0:
                raise ValueError("motion matrix must be a rotation (det +1)")
            v = np.zeros(O.shape[0]) if self.v is None else np.asarray(self.v, dtype=float).reshape(O.shape[0])
            object.__setattr__(self, "O", O)
            object.__setattr__(self, "v", v)
        elif self.kind == "spatial":
            if not self.c > 0:
                raise ValueError("spatial scaling needs c > 0")
        elif self.kind == "energy":
            if not self.e > 0:
                raise ValueError("energy scaling needs e > 0")
        elif self.kind != "identity":
            raise ValueError(f"unknown scaling {self.kind!r}")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def motion(cls, O, v=None):
        return cls("motion", O=O, v=v)

    @classmethod
    def spatial(cls, c: float):
        return cls("spatial", c=float(c))

    @classmethod
    def energy(cls, e: float):
        return cls("energy", e=float(e))

    # transformed -> original
    def forward(self, t: float, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        if self.kind == "motion":
            return t, self.O @ p, self.O @ q + self.v
        if self.kind == "spatial":
            return self.c * t, p.copy(), self.c * q
        if self.kind == "energy":
            s = math.sqrt(self.e)
            return s * t, p / s, q.copy()
        return t, p.copy(), q.copy()

    # original -> transformed
    def pullback(self, t: float, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        if self.kind == "motion":
            return t, self.O.T @ p, self.O.T @ (q - self.v)
        if self.kind == "spatial":
            return t / self.c, p.copy(), q / self.c
        if self.kind == "energy":
            s = math.sqrt(self.e)
            return t / s, s * p, q.copy()
        return t, p.copy(), q.copy()

    def time_factor(self) -> float:
        """d(original time) / d(transformed time)."""
        return {"spatial": self.c, "energy": math.sqrt(self.e)}.get(self.kind, 1.0)

    def transform_configuration(self, cfg: Configuration) -> FiniteConfiguration:
        """Site list whose potential is the transformed V."""
        fin = as_finite(cfg)
        pts, pal, basis = fin.points, fin.palette, fin.basis
        if self.kind == "motion":
            pts = (pts - self.v) @ self.O  # O^T (x - v) row-wise
            if basis is not None:
                basis = LatticeBasis(basis.vectors @ self.O)
        elif self.kind == "spatial":
            pts = pts / self.c
            pal = tuple(W.with_scaling(1.0, 1.0 / self.c) for W in pal)
        elif self.kind == "energy":
            pal = tuple(W.with_scaling(self.e, 1.0) for W in pal)
        return FiniteConfiguration(pts, fin.marks, pal, basis)


@dataclass
class ScaledSystem:
    field: PotentialField
    state: PhaseState
    T: float
    h: float
    op: ScalingOp

    def to_original(self, t: float, p, q) -> PhaseState:
        t0, p0, q0 = self.op.forward(t, p, q)
        return PhaseState(t0, q0, p0)


def apply_scaling(op: ScalingOp, cfg: Configuration, state: PhaseState, T: float, h: float = 1e-3) -> ScaledSystem:
    """Transformed potential, pulled-back initial state, time span and matching step.

    Integrating the returned system for ``T`` and mapping the end state with
    ``to_original`` reproduces the original flow; with the step scaled the
    same way the Verlet maps are conjugate as well.
    """
    new = op.transform_configuration(cfg)
    t, p, q = op.pullback(state.t, state.p, state.q)
    f = op.time_factor()
    return ScaledSystem(PotentialField(new), PhaseState(t, q, p), T / f, h / f, op)


# --------------------------------------------------------------------------
# radial profiles
# --------------------------------------------------------------------------

@dataclass
class RadialProfile:
    """U(q) = Ũ(|q|) with derivative access ``derivative(r, k)``, k <= 4."""

    fn: Callable[[np.ndarray, int], np.ndarray]
    support: tuple[float, float]  # Ũ vanishes outside [r_in, r_out]
    sign: int  # +1 nonnegative, -1 nonpositive
    name: str = "profile"
    meta: dict = field(default_factory=dict)

    def __call__(self, r):
        return self.fn(np.asarray(r, dtype=float), 0)

    def derivative(self, r, k: int = 1):
        if not 0 <= k <= 4:
            raise ValueError("derivatives up to order 4")
        return self.fn(np.asarray(r, dtype=float), k)

    @property
    def maximum(self) -> float:
        r = np.linspace(*self.support, 20001)
        return float(np.max(self(r)))

    @property
    def minimum(self) -> float:
        r = np.linspace(*self.support, 20001)
        return float(np.min(self(r)))

    @classmethod
    def polynomial_ring(cls, r_center: float, half_width: float, height: float, power: int = 4) -> "RadialProfile":
        """height * (1 - u^2)^power with u = (r - r_center) / half_width, |u| < 1 (C^{power-1})."""
        if not (half_width > 0 and r_center - half_width >= 0):
            raise ValueError("ring must lie in r >= 0")
        coef = height * P.polypow([1.0, 0.0, -1.0], power)
        ders = [coef]
        for _ in range(4):
            ders.append(P.polyder(ders[-1]))
        rc, w = float(r_center), float(half_width)

        def fn(r, k):
            u = (r - rc) / w
            return np.where(np.abs(u) < 1.0, P.polyval(u, ders[k]) / w ** k, 0.0)

        return cls(fn, (rc - w, rc + w), 1 if height >= 0 else -1, "polynomial-ring",
                   {"r_center": rc, "half_width": w, "height": float(height), "power": power})

    @classmethod
    def circular_orbit_design(cls, r: float = 1.0, ell: float = 2.0, E: float = 1.0, u0: float = 0.3,
                              power: int = 4) -> "RadialProfile":
        """Well -A (1 - u^2)^power placed so that a circular orbit of radius r and
        angular momentum ell has energy E: Ũ(r) = E - ell^2/(2 r^2), Ũ'(r) = ell^2 / r^3.
        The orbit sits at u = u0 on the inner flank of the well."""
        target = E - ell ** 2 / (2 * r ** 2)
        if not target < 0:
            raise ValueError("design needs E < ell^2 / (2 r^2)")
        s = 1.0 - u0 * u0
        A = -target / s ** power
        # Ũ'(r) = 2 power A u0 s^(power-1) / w
        w = 2 * power * A * u0 * s ** (power - 1) / (ell ** 2 / r ** 3)
        prof = cls.polynomial_ring(r - u0 * w, w, -A, power)
        prof.name = "circular-orbit-design"
        prof.meta.update({"r": r, "ell": ell, "E": E, "u0": u0, "A": A})
        return prof

    @classmethod
    def kepler(cls, c: float = 1.0) -> "RadialProfile":
        """-c / r (not compactly supported; for orbit formulas only)."""
        fac = [1.0, -1.0, 2.0, -6.0, 24.0]

        def fn(r, k):
            return -c * fac[k] / r ** (k + 1)

        return cls(fn, (0.0, math.inf), -1, "kepler", {"c": c})

    @classmethod
    def harmonic(cls, k: float = 1.0) -> "RadialProfile":
        def fn(r, n):
            return [0.5 * k * r ** 2, k * r, k + 0 * r, 0 * r, 0 * r][n]

        return cls(fn, (0.0, math.inf), 1, "harmonic", {"k": k})

    def as_site(self, n_knots: int = 20001) -> SingleSitePotential:
        """Clamped-spline single site U(|q - x|) (profile must vanish beyond its support)."""
        r_out = self.support[1]
        if not math.isfinite(r_out):
            raise ValueError("profile must be compactly supported")
        r = np.linspace(0.0, r_out, n_knots)
        vals = self(r)
        vals[-1] = 0.0
        return SingleSitePotential.radial_profile(r, vals)


# --------------------------------------------------------------------------
# density map and point sets
# --------------------------------------------------------------------------

class DensityMap:
    """g(q) = g̃(|q|) q/|q| with g̃(r) = (d int_0^r x^{d-1} Ũ(x) dx)^{1/d}, so det Dg = U.

    F(r) = g̃(r)^d is tabulated with its exact derivative d r^{d-1} Ũ(r) as a
    cubic Hermite interpolant (monotone because F' >= 0 at every knot on a
    fine grid); the inverse of g̃ is found by bisection.
    """

    def __init__(self, profile: RadialProfile, d: int, n_table: int = 8001):
        if profile.sign < 0:
            raise ValueError("density map needs a nonnegative profile")
        self.profile = profile
        self.d = int(d)
        r_in, r_out = profile.support
        if not math.isfinite(r_out):
            raise ValueError("profile must be compactly supported")
        self.r_in, self.r_out = float(r_in), float(r_out)
        r = np.linspace(self.r_in, self.r_out, n_table)
        dF = self.d * r ** (self.d - 1) * profile(r)
        # cumulative 8-point Gauss-Legendre per table cell
        x, wq = np.polynomial.legendre.leggauss(8)
        a, b = r[:-1], r[1:]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        nodes = mid[:, None] + half[:, None] * x[None, :]
        cell = (self.d * nodes ** (self.d - 1) * profile(nodes.ravel()).reshape(nodes.shape) * wq).sum(1) * half
        F = np.concatenate([[0.0], np.cumsum(cell)])
        if np.any(np.diff(F) < 0):
            raise ValueError("profile must be nonnegative")
        self._r = r
        self._F = CubicHermiteSpline(r, F, dF)
        self.F_max = float(F[-1])
        self.image_radius = self.F_max ** (1.0 / self.d)

    def g_tilde(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        rc = np.clip(r, self.r_in, self.r_out)
        F = np.maximum(self._F(rc), 0.0)
        return F ** (1.0 / self.d)

    def forward(self, q) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        n = np.linalg.norm(q, axis=1)
        gt = self.g_tilde(n)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(n[:, None] > 0, q * (gt / np.where(n > 0, n, 1.0))[:, None], 0.0)
        return out

    def g_tilde_inverse(self, rho, iters: int = 100) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        if np.any(rho <= 0) or np.any(rho >= self.image_radius):
            raise ValueError("radius outside the image (0, g̃(r_out))")
        target = rho ** self.d
        lo = np.full(rho.shape, self.r_in)
        hi = np.full(rho.shape, self.r_out)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = self._F(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-15 * np.maximum(1.0, hi)):
                break
        return 0.5 * (lo + hi)

    def inverse(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rho = np.linalg.norm(x, axis=1)
        r = self.g_tilde_inverse(rho)
        return x * (r / rho)[:, None]

    def jacobian_det(self, q, h: float = 1e-6) -> np.ndarray:
        """det Dg by central differences."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        out = np.empty(len(q))
        for i, x in enumerate(q):
            J = np.empty((self.d, self.d))
            for k in range(self.d):
                e = np.zeros(self.d)
                e[k] = h
                J[:, k] = (self.forward(x + e)[0] - self.forward(x - e)[0]) / (2 * h)
            out[i] = np.linalg.det(J)
        return out


def lattice_in_ball(eps: float, radius: float, d: int) -> np.ndarray:
    """Nonzero points of eps Z^d with norm < radius."""
    m = int(math.floor(radius / eps))
    ax = np.arange(-m, m + 1) * eps
    grid = np.stack([g.ravel() for g in np.meshgrid(*([ax] * d), indexing="ij")], axis=1)
    n = np.linalg.norm(grid, axis=1)
    return grid[(n > 0) & (n < radius)]


@dataclass
class DensityPointSet:
    points: np.ndarray  # g^{-1}(l), l in eps Z^d ∩ Im
    eps: float
    c: float
    I: float
    site: SingleSitePotential  # I^{-1} eps^d W_{eps^c}
    error: float  # sup over the probe grid of |A_eps - U|
    probe_count: int
    meta: dict = field(default_factory=dict)

    def configuration(self) -> FiniteConfiguration:
        return FiniteConfiguration(self.points, np.zeros(len(self.points), np.int64), (self.site,))

    def field(self) -> PotentialField:
        return PotentialField(self.configuration())

    def report(self) -> dict:
        return {"eps": self.eps, "c": self.c, "I": self.I, "n_points": len(self.points),
                "sup_error": self.error, "probe_count": self.probe_count}


def density_exponent(d: int, k: int) -> float:
    return 1.0 / (2.0 * (d + k + 1))


def build_density_point_set(profile: RadialProfile, W: SingleSitePotential, eps: float, k: int = 0,
                            d: int = 2, n_probe: int = 81, dmap: DensityMap | None = None) -> DensityPointSet:
    """Points g^{-1}(l) for l in eps Z^d ∩ Im and the sup error of A_eps = I^{-1} D_eps * W_{eps^c}.

    A_eps(q) = I^{-1} sum_l eps^d W_{eps^c}(q - g^{-1}(l)) is evaluated as a
    field of translates of one scaled site; the error is measured on an
    n_probe^d grid over the box of half-width r_out + supp(W_{eps^c}).
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    I = W.integral(d)
    if not I > 0:
        raise ValueError(f"density approximation needs I = int W > 0, got {I:.6g}")
    dmap = dmap or DensityMap(profile, d)
    c = density_exponent(d, k)
    a = eps ** c
    ell = lattice_in_ball(eps, dmap.image_radius, d)
    pts = dmap.inverse(ell) if len(ell) else np.zeros((0, d))
    site = scale_potential(W, a, d).with_scaling(amplitude_factor=eps ** d / I)
    out = DensityPointSet(pts, eps, c, I, site, math.nan, 0, {"scale": a})
    if len(pts):
        fld = out.field()
        half = dmap.r_out + site.support_radius()
        ax = np.linspace(-half, half, n_probe)
        Q = np.stack([g.ravel() for g in np.meshgrid(*([ax] * d), indexing="ij")], axis=1)
        A = fld.values(Q)
        U = profile(np.linalg.norm(Q, axis=1))
        out.error = float(np.max(np.abs(A - U)))
        out.probe_count = len(Q)
    return out


def convergence_sweep(profile: RadialProfile, W: SingleSitePotential, eps_list: Sequence[float], k: int = 0,
                      d: int = 2, n_probe: int = 81) -> tuple[np.ndarray, float]:
    """Sup errors along eps_list and the least-squares log-log slope."""
    dmap = DensityMap(profile, d)
    errs = np.array([build_density_point_set(profile, W, e, k, d, n_probe, dmap).error for e in eps_list])
    slope = float(np.polyfit(np.log(eps_list), np.log(errs), 1)[0])
    return errs, slope


# --------------------------------------------------------------------------
# I > 0: confining barrier
# --------------------------------------------------------------------------

@dataclass
class BarrierReport:
    eps: float
    barrier_min_on_ring: float
    ring_radius: float
    contained_count: int
    n_orbits: int
    control_escaped: bool
    retries: int
    passed: bool
    points: DensityPointSet | None = field(repr=False, default=None)

    def lines(self) -> list[str]:
        return [f"eps={self.eps!r}", f"barrier_min_on_ring={self.barrier_min_on_ring!r}",
                f"ring_radius={self.ring_radius!r}", f"contained_count={self.contained_count}",
                f"n_orbits={self.n_orbits}", f"control_escaped={str(self.control_escaped).lower()}",
                f"retries={self.retries}", f"passed={str(self.passed).lower()}"]


def barrier_on_circles(fld: PotentialField, r_lo: float, r_hi: float, n_r: int = 200,
                       n_theta: int = 720) -> tuple[float, float]:
    """max over circles |q| = r of min_theta V: a circle on which V exceeds that value."""
    rs = np.linspace(r_lo, r_hi, n_r)
    th = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    Q = np.stack([np.outer(rs, np.cos(th)).ravel(), np.outer(rs, np.sin(th)).ravel()], axis=1)
    V = fld.values(Q).reshape(n_r, n_theta).min(axis=1)
    i = int(np.argmax(V))
    return float(V[i]), float(rs[i])


def _contained_orbit(args):
    fld, q, p, T, h, r_out = args
    tr = integrate(fld, PhaseState(0.0, q, p), T, IntegratorSpec(h=h, stride=max(1, int(round(T / h))),
                                                                   r_esc=r_out, guard=False))
    return tr.reason == "time-limit"


def build_confining_barrier(W: SingleSitePotential, E: float, *, k: int = 0, eps: float = 0.1, ring_width: float = 1.5,
                            inner_radius: float | None = None, height_factor: float = 2.5, n_orbits: int = 100,
                            T: float = 1e3, h: float = 1e-2, seed: int = 0, max_retries: int = 3,
                            workers: int = 1) -> tuple[FiniteConfiguration, BarrierReport]:
    """Ring-shaped barrier of scaled translates of W with max Ũ >= 2E (d = 2).

    Verification: (a) V > E on a circle around the origin (grid scan);
    (b) n_orbits orbits of energy E started inside stay inside for time T;
    plus one orbit started outside with outward momentum escapes.  On
    failure eps is halved, up to ``max_retries`` times.
    """
    from .parallel import parallel_map
    from .rng import stream

    d = 2
    if not E > 0:
        raise ValueError("barrier energy must be positive")
    height = max(height_factor, 2.0) * E
    retries = 0
    while True:
        a = eps ** density_exponent(d, k)
        diam = 2 * W.support_radius() * a
        r_in = inner_radius if inner_radius is not None else max(1.0, 2 * diam)
        prof = RadialProfile.polynomial_ring(r_in + 0.5 * ring_width, 0.5 * ring_width, height)
        dps = build_density_point_set(prof, W, eps, k, d, n_probe=41)
        fld = dps.field()
        reach = prof.support[1] + dps.site.support_radius()
        bmin, rr = barrier_on_circles(fld, prof.support[0], prof.support[1])
        rng = stream(seed, "barrier-orbits")
        tasks = []
        r_start = 0.9 * prof.support[0] - dps.site.support_radius()
        r_start = max(r_start, 0.25 * prof.support[0])
        while len(tasks) < n_orbits:
            q = rng.uniform(-r_start, r_start, 2)
            if np.linalg.norm(q) >= r_start:
                continue
            V = fld.value(q)
            if V >= E:
                continue
            th = rng.uniform(0, 2 * np.pi)
            p = math.sqrt(2 * (E - V)) * np.array([math.cos(th), math.sin(th)])
            tasks.append((fld, q, p, T, h, rr))
        res = parallel_map(_contained_orbit, tasks, workers)
        contained = sum(1 for r in res if r is True)
        # control: outside the ring, moving outward
        q = np.array([reach + 0.5, 0.0])
        p = np.array([math.sqrt(2 * max(E - fld.value(q), 0.0)), 0.0])
        ctrl = integrate(fld, PhaseState(0.0, q, p), T, IntegratorSpec(h=h, stride=int(round(T / h)),
                                                                       r_esc=reach + 5.0, guard=False))
        escaped = ctrl.reason == "escaped"
        ok = bmin > E and contained == n_orbits and escaped
        rep = BarrierReport(eps, bmin, rr, contained, n_orbits, escaped, retries, ok, dps)
        if ok or retries >= max_retries:
            return dps.configuration(), rep
        eps *= 0.5
        retries += 1


# --------------------------------------------------------------------------
# I < 0: effective potential, periodic orbits, Floquet multipliers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectiveOrbit:
    E: float
    dU: float  # Ũ_l'(r); circular orbit iff 0
    d2U: float  # Ũ_l''(r); > 0 for linear ellipticity of the radial motion
    d4U: float
    omega: float  # angular frequency l / r^2

    @property
    def circular(self) -> bool:
        return abs(self.dU) <= 1e-12 * max(1.0, abs(self.E))


def effective_potential_orbit(profile: RadialProfile, ell: float, r: float) -> EffectiveOrbit:
    """Ũ_l(r) = Ũ(r) + l^2 / (2 r^2) and the circular-orbit data at radius r."""
    if not r > 0:
        raise ValueError("radius must be positive")
    L2 = ell * ell
    U = [float(profile.derivative(r, k)) for k in range(5)]
    E = U[0] + L2 / (2 * r * r)
    d1 = U[1] - L2 / r ** 3
    d2 = U[2] + 3 * L2 / r ** 4
    d4 = U[4] + 60 * L2 / r ** 6
    return EffectiveOrbit(E, d1, d2, d4, ell / (r * r))


@dataclass
class FloquetResult:
    multipliers: np.ndarray  # all eigenvalues of the monodromy matrix
    transverse: np.ndarray  # eigenvalues of the reduced (Poincaré) map
    period: float
    q0: np.ndarray
    p0: np.ndarray
    closure: float
    newton_steps: int
    elliptic: bool

    @property
    def max_modulus_defect(self) -> float:
        return float(np.max(np.abs(np.abs(self.transverse) - 1.0)))


class OrbitRefinementError(RuntimeError):
    pass


def _vector_field(fld: PotentialField, x: np.ndarray) -> np.ndarray:
    d = len(x) // 2
    return np.concatenate([x[d:], -fld.gradient(x[:d])])


def _monodromy(fld, x, T, n, fd_step):
    d = len(x) // 2
    h = T / n
    m = len(x)
    M = np.empty((m, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = fd_step
        qa, pa = flow_map(fld, (x + e)[:d], (x + e)[d:], T, h)
        qb, pb = flow_map(fld, (x - e)[:d], (x - e)[d:], T, h)
        M[:, k] = (np.concatenate([qa, pa]) - np.concatenate([qb, pb])) / (2 * fd_step)
    return M


def linear_stability(fld: PotentialField, q0, p0, period: float, h: float = 1e-3, fd_step: float = 1e-6,
                     closure_tol: float = 1e-8, max_newton: int = 20, unit_tol: float = 1e-4) -> FloquetResult:
    """Refine a periodic orbit by single shooting and return its Floquet multipliers.

    The Verlet flow map with a fixed number of steps n = ceil(T/h) is used
    throughout, so the refined orbit is a periodic orbit of the integrator.
    The transverse multipliers are those of the monodromy restricted to the
    energy surface modulo the flow direction.
    """
    x = np.concatenate([np.asarray(q0, float), np.asarray(p0, float)])
    d = len(x) // 2
    T = float(period)
    n = max(1, int(math.ceil(T / h - 1e-9)))
    res = np.inf
    it = 0
    for it in range(max_newton + 1):
        qT, pT = flow_map(fld, x[:d], x[d:], T, T / n)
        r = np.concatenate([qT, pT]) - x
        res = float(np.max(np.abs(r)))
        if res < closure_tol or it == max_newton:
            break
        M = _monodromy(fld, x, T, n, fd_step)
        f_end = _vector_field(fld, np.concatenate([qT, pT]))
        J = np.hstack([M - np.eye(2 * d), f_end[:, None]])
        dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        x = x + dx[:-1]
        T = T + dx[-1]
    if not res < closure_tol:
        raise OrbitRefinementError(f"periodic orbit did not close: residual {res:.3g}")
    M = _monodromy(fld, x, T, n, fd_step)
    mult = np.linalg.eigvals(M)
    # reduced map on {grad H}^perp modulo the flow direction
    f = _vector_field(fld, x)
    gH = np.concatenate([fld.gradient(x[:d]), x[d:]])
    basis = np.linalg.svd(np.vstack([f, gH]))[2][2:].T  # orthonormal complement of span{f, grad H}
    frame = np.hstack([f[:, None], basis])
    coeff = np.linalg.lstsq(frame, M @ basis, rcond=None)[0]
    B = coeff[1:, :]
    trans = np.linalg.eigvals(B)
    elliptic = bool(np.all(np.abs(np.abs(trans) - 1.0) <= unit_tol))
    return FloquetResult(mult, trans, T, x[:d].copy(), x[d:].copy(), res, it, elliptic)


def circular_orbit_state(r: float, ell: float) -> PhaseState:
    """q = (r, 0), p = (0, l / r): the circular orbit of angular momentum l (d = 2)."""
    return PhaseState(0.0, [r, 0.0], [0.0, ell / r])


# --------------------------------------------------------------------------
# I = 0: mirrors
# --------------------------------------------------------------------------

def hyperplane_integral(W: SingleSitePotential, d: int, direction, offset: float = 0.0) -> float:
    """I' = integral of W over the hyperplane {x : <x, e1> = offset} (d = 2: a line)."""
    if d != 2:
        raise NotImplementedError("hyperplane integrals are implemented for d = 2")
    e1 = np.asarray(direction, dtype=float)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.array([-e1[1], e1[0]])
    fld = PotentialField(FiniteConfiguration.single(W, np.zeros(2)))
    R = W.support_radius()
    if not math.isfinite(R):
        raise ValueError("W must be compactly supported")
    f = lambda s: fld.value(offset * e1 + s * e2)
    return float(sint.quad(f, -R, R, epsabs=1e-13, epsrel=1e-11, limit=400)[0])


def scan_hyperplanes(W: SingleSitePotential, d: int = 2, n_rot: int = 180) -> tuple[np.ndarray, float]:
    """Normal e1 with the largest positive I' over n_rot rotations (error if none)."""
    best, val = None, -math.inf
    for k in range(n_rot):
        th = math.pi * k / n_rot
        e1 = np.array([math.cos(th), math.sin(th)])
        v = hyperplane_integral(W, d, e1)
        if v > val:
            best, val = e1, v
    if not val > 0:
        raise ValueError("no hyperplane with positive integral found")
    return best, val


def mirror_difference_site(A1: float = 10.0, R1: float = 0.5, R2: float = 1.0, order: float = 4.0) -> tuple:
    """Palette (B1, B2) with B1 - B2 of zero integral in d = 2: narrow tall minus wide low bump."""
    B1 = SingleSitePotential.bump(A1, R1, 0.0, order)
    A2 = A1 * B1.integral(2) / SingleSitePotential.bump(A1, R2, 0.0, order).integral(2)
    B2 = SingleSitePotential.bump(-A2, R2, 0.0, order)
    return B1, B2


@dataclass
class MirrorReport:
    I: float
    I_prime: float
    normal: np.ndarray
    E: float
    bounce_count: int
    in_tube: bool
    T: float
    ensemble_bounces: list = field(default_factory=list)
    control_escaped: bool | None = None
    meta: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"I={self.I!r}", f"I_prime={self.I_prime!r}", f"E={self.E!r}", f"bounce_count={self.bounce_count}",
               f"in_tube={str(self.in_tube).lower()}", f"T={self.T!r}"]
        if self.control_escaped is not None:
            out.append(f"control_escaped={str(self.control_escaped).lower()}")
        return out


def build_mirror_configuration(palette: Sequence[SingleSitePotential], weights: Sequence[float], *, r: float = 3.0,
                               R: float = 10.0, eps: float = 0.05, sag: bool = True, d: int = 2,
                               n_rot: int = 180, integral_tol: float = 1e-8) -> tuple[FiniteConfiguration, dict]:
    """Two mirrors eps^{d-1} sum_l W(q -/+ R e1 - l -/+ Q(l) e1), l in eps span(e2) ∩ B_2r.

    W = sum_j weights_j palette_j must have zero integral.  Q(l) = |l|^2/(4R)
    bends both mirrors towards the centre (curvature 1/(2R) < 1/R).
    """
    if d != 2:
        raise NotImplementedError("mirror construction is implemented for d = 2")
    w = np.asarray(weights, float)
    I = float(sum(wj * W.integral(d) for wj, W in zip(w, palette)))
    scale = max(abs(wj * W.integral(d)) for wj, W in zip(w, palette))
    if abs(I) > integral_tol * max(1.0, scale):
        raise ValueError(f"mirror construction needs I = 0, got {I:.3g}")
    combo = FiniteConfiguration(np.zeros((len(palette), 2)), np.arange(len(palette)),
                                tuple(W.with_scaling(wj) for wj, W in zip(w, palette)))
    fld0 = PotentialField(combo)
    Rs = max(W.support_radius() for W in palette)
    best, Ip = None, -math.inf
    for k in range(n_rot):
        th = math.pi * k / n_rot
        e1 = np.array([math.cos(th), math.sin(th)])
        e2 = np.array([-e1[1], e1[0]])
        v = float(sint.quad(lambda s: fld0.value(s * e2), -Rs, Rs, epsabs=1e-13, epsrel=1e-11, limit=400)[0])
        if v > Ip + 1e-12:
            best, Ip = e1, v
    if not Ip > 0:
        raise ValueError("no hyperplane with positive integral found")
    e1 = best
    e2 = np.array([-e1[1], e1[0]])
    m = int(math.floor(2 * r / eps))
    ls = np.arange(-m, m + 1) * eps
    ls = ls[np.abs(ls) < 2 * r]
    Q = ls ** 2 / (4 * R) if sag else np.zeros_like(ls)
    pts, marks = [], []
    for side in (+1.0, -1.0):
        base = side * (R - Q)[:, None] * e1[None, :] + ls[:, None] * e2[None, :]
        for j in range(len(palette)):
            pts.append(base)
            marks.append(np.full(len(ls), j))
    pal = tuple(W.with_scaling(wj * eps ** (d - 1)) for wj, W in zip(w, palette))
    cfg = FiniteConfiguration(np.vstack(pts), np.concatenate(marks), pal)
    return cfg, {"I": I, "I_prime": Ip, "normal": e1, "R": R, "r": r, "eps": eps, "sag": sag}


def count_bounces(traj, e1) -> int:
    """Sign changes of the axial momentum."""
    v = traj.p @ np.asarray(e1, float)
    s = np.sign(v)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def verify_mirrors(cfg: FiniteConfiguration, info: dict, E: float, *,
                   launches: Sequence[tuple[float, float]] = ((0.0, 0.0),), min_bounces: int = 50,
                   T: float | None = None, h: float = 5e-3) -> MirrorReport:
    """Launch from the midpoint plane with (transverse offset, angle to the axis) pairs.

    For each launch the bounces are counted up to the first time the orbit
    leaves the tube |<q, e2>| < r (or the end of the run).  The report's
    bounce_count / in_tube refer to the first launch.
    """
    fld = PotentialField(cfg)
    e1 = np.asarray(info["normal"], float)
    e2 = np.array([-e1[1], e1[0]])
    R, r = info["R"], info["r"]
    speed = math.sqrt(2 * max(E - fld.value(np.zeros(2)), 0.0))
    if T is None:
        T = 1.3 * min_bounces * 2 * R / speed
    counts, tubes = [], []
    for off, ang in launches:
        q = off * e2
        v = math.sqrt(2 * max(E - fld.value(q), 0.0))
        p = v * (math.cos(ang) * e1 + math.sin(ang) * e2)
        tr = integrate(fld, PhaseState(0.0, q, p), T, IntegratorSpec(h=h, stride=10, guard=False,
                                                                     r_esc=R + 10.0))
        out = np.nonzero(np.abs(tr.q @ e2) >= r)[0]
        inside = tr.reason == "time-limit" and out.size == 0
        if out.size:
            tr = SimpleNamespace(p=tr.p[:out[0]], q=tr.q[:out[0]])
        counts.append(count_bounces(tr, e1))
        tubes.append(inside)
    rep = MirrorReport(info["I"], info["I_prime"], e1, E, counts[0], tubes[0], T, counts)
    rep.meta = {"in_tube": tubes}
    return rep


def mirror_escape_control(cfg: FiniteConfiguration, info: dict, E: float, h: float = 5e-3) -> bool:
    """An axial orbit with E above the barrier passes through a mirror."""
    fld = PotentialField(cfg)
    e1 = np.asarray(info["normal"], float)
    R = info["R"]
    p = math.sqrt(2 * max(E - fld.value(np.zeros(2)), 0.0)) * e1
    T = 4 * R / np.linalg.norm(p) + 20.0
    tr = integrate(fld, PhaseState(0.0, np.zeros(2), p), T, IntegratorSpec(h=h, stride=10, guard=False,
                                                                             r_esc=R + 5.0))
    return tr.reason == "escaped"


# --------------------------------------------------------------------------
# slowly varying configuration
# --------------------------------------------------------------------------

def slowly_varying_profile(n) -> np.ndarray:
    """ω̃(n) = round((1 + cos(log(|n| + 1))) / 2), a 0/1 profile with exponentially growing runs."""
    n = np.asarray(n)
    return np.floor((1.0 + np.cos(np.log(np.abs(n) + 1.0))) / 2.0 + 0.5).astype(np.int64)


def build_slowly_varying_configuration(d: int, window, height: float = 1.0) -> LatticeConfiguration:
    """Marks ω(l) = sum_k ω̃(l_k) with palette W_j = j * height * F (F the smoothed cell indicator).

    Since the translates of F form a partition of unity, V(q) = height * sum_k v(q_k)
    with v(x) = sum_n ω̃(n) f(x - n) inside the window.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    lo, hi = window
    lo = np.broadcast_to(np.asarray(lo, np.int64), (d,))
    hi = np.broadcast_to(np.asarray(hi, np.int64), (d,))
    if np.any(hi <= lo):
        raise ValueError("empty window")
    axes = [slowly_varying_profile(np.arange(lo[k], hi[k])) for k in range(d)]
    marks = np.zeros(tuple(hi - lo), np.int64)
    for k, a in enumerate(axes):
        shape = [1] * d
        shape[k] = len(a)
        marks = marks + a.reshape(shape)
    F = SingleSitePotential.smoothed_indicator(height)
    palette = tuple(F.with_scaling(float(j)) for j in range(d + 1))
    return LatticeConfiguration(LatticeBasis.cubic(d), tuple(int(x) for x in lo), marks, palette)


def run_lengths(marks) -> list[tuple[int, int, int]]:
    """(start index, length, value) of maximal constant runs."""
    m = np.asarray(marks)
    out = []
    i = 0
    while i < len(m):
        j = i
        while j + 1 < len(m) and m[j + 1] == m[i]:
            j += 1
        out.append((i, j - i + 1, int(m[i])))
        i = j + 1
    return out


def format_report(items) -> str:
    """key=value lines."""
    if isinstance(items, dict):
        lines = []
        for k, v in items.items():
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, np.ndarray):
                v = ",".join(repr(float(x)) for x in v.ravel())
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"
    return "\n".join(items) + "\n"
