"""Planar motion with attractive Coulombic singularities.

Near a singular site s the orbit is continued through collisions in the
Levi-Civita chart q = z^2 + s with conjugate variable w = 2 conj(z) p and
fictitious time ds = dt / |z|^2.  On the energy surface H = E the chart
Hamiltonian

    K(z, w) = |w|^2 / 8 + f(|z|^2) + |z|^2 (U(z^2 + s) - E)

vanishes, where f(rho) = rho W(rho) is the regularized site profile and U is
the rest of the potential.  K is separable, so a symmetric (Yoshida) splitting
integrates it; physical time is the exact integral of |z|^2 over each drift.

Complex numbers represent points of the plane throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from . import _kernels as K
from .dynamics import PhaseState, Trajectory, write_trajectory_csv
from .randfield import (FiniteConfiguration, PotentialField, SingleSitePotential, SingularPointError,
                        as_finite, superpose)
from .rng import stream

R_THRASH = 5
R_TARGET = 6
R_MAXSTEPS = 7

REASONS = {K.R_TIME: "time-limit", K.R_NAN: "nan", K.R_SINGULAR: "singular",
           R_THRASH: "chart-thrashing", R_TARGET: "target-reached", R_MAXSTEPS: "max-steps"}

# 4th-order symmetric composition of leapfrog (Yoshida)
_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = -(2.0 ** (1.0 / 3.0)) * _W1
_YC = np.array([0.5 * _W1, 0.5 * (_W0 + _W1), 0.5 * (_W0 + _W1), 0.5 * _W1])
_YD = np.array([_W1, _W0, _W1])


# --------------------------------------------------------------------------
# sites
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SingularSite:
    """An attractive Coulombic single-site potential centred at ``position``."""

    position: complex
    potential: SingleSitePotential

    def __post_init__(self):
        object.__setattr__(self, "position", complex(self.position))
        if not self.potential.is_singular:
            raise ValueError(f"{self.potential.kind!r} has no Coulombic singularity")
        singularity_strength(self.potential)

    @classmethod
    def yukawa(cls, position, c: float = 1.0, mu: float = 1.0) -> "SingularSite":
        return cls(position, SingleSitePotential.yukawa(c, mu))

    @classmethod
    def finite_range(cls, position, c: float = 1.0, lam: float = 1.0, eta: int = 3,
                     sign: float = 1.0) -> "SingularSite":
        return cls(position, SingleSitePotential.finite_range(c, lam, eta, sign))

    @property
    def strength(self) -> float:
        return singularity_strength(self.potential)

    @property
    def decay_radius(self) -> float:
        W = self.potential
        if W.kind == "yukawa":
            mu = W.params[1]
            return W.length / mu if mu > 0 else math.inf
        return W.support_radius()

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.position.real, self.position.imag])


def singularity_strength(site) -> float:
    """lim_{z->0} |z|^2 W(z^2 + s); must be negative (attractive)."""
    W = site.potential if isinstance(site, SingularSite) else site
    if W.is_zero or W.kind not in ("yukawa", "finite-range"):
        raise ValueError(f"{W.kind!r} potential has no Coulombic singularity")
    a, b = W.length, W.amplitude
    if W.kind == "yukawa":
        val = -a * b * W.params[0]
    else:
        val = -a * b * W.params[3] * W.params[0]
    if not val < 0.0:
        raise ValueError(f"singularity strength {val} >= 0: site is not attractive")
    return float(val)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _freg(kind, par, amp, ln, rho):
    """f(rho) = rho * W(rho) and f'(rho) for the active site."""
    if kind == K.K_YUKAWA:
        c, mu = par[0], par[1]
        e = math.exp(-mu * rho / ln)
        return -ln * amp * c * e, amp * c * mu * e
    c, lam, m, sg = par[0], par[1], par[2], par[3]
    x = lam * rho / ln
    if x >= 0.5 * math.pi:
        return 0.0, 0.0
    co = math.cos(x)
    return -ln * amp * sg * c * co ** m, amp * sg * c * m * lam * co ** (m - 1.0) * math.sin(x)


@njit(cache=True)
def _chart_force(z, E, j, fd, spos, skind, spar, samp, slen):
    """(-dK/dz as a complex number, potential part of K, status)."""
    rho = z.real * z.real + z.imag * z.imag
    zz = z * z
    qa = np.empty(2)
    qa[0] = zz.real + spos[j, 0]
    qa[1] = zz.imag + spos[j, 1]
    U, g, _, st = K.field_eval_skip(qa, fd, False, j)
    f, f1 = _freg(skind[j], spar[j], samp[j], slen[j], rho)
    gc = complex(g[0], g[1])
    F = -(2.0 * (f1 + U - E) * z + 2.0 * rho * (z.conjugate() * gc))
    return F, f + rho * (U - E), st


@njit(cache=True)
def _yoshida(z, w, ds, E, j, fd, spos, skind, spar, samp, slen):
    """One composed step in fictitious time; returns (z, w, elapsed physical time, status)."""
    dt = 0.0
    st = K.ST_OK
    for k in range(4):
        c = _YC[k] * ds
        v = 0.25 * w
        rz = z.real * z.real + z.imag * z.imag
        dt += c * (rz + c * (z.conjugate() * v).real + c * c * (v.real * v.real + v.imag * v.imag) / 3.0)
        z = z + c * v
        if k < 3:
            F, _, s = _chart_force(z, E, j, fd, spos, skind, spar, samp, slen)
            if s != K.ST_OK:
                st = s
            w = w + _YD[k] * ds * F
    return z, w, dt, st


@njit(cache=True)
def _cut_cross(ax, ay, bx, by, sx, sy):
    """Segment a->b crosses the principal branch cut {s + x : x < 0} of sqrt(q - s)."""
    ya = ay - sy
    yb = by - sy
    if (ya >= 0.0) == (yb >= 0.0):
        return False
    xc = ax + (bx - ax) * ya / (ya - yb) - sx
    return xc < 0.0


@njit(cache=True)
def _seg_min(a, b):
    v = b - a
    vv = v.real * v.real + v.imag * v.imag
    s = 0.0
    if vv > 0.0:
        s = -(a.conjugate() * v).real / vv
        s = min(max(s, 0.0), 1.0)
    m = a + s * v
    return m.real * m.real + m.imag * m.imag


@njit(cache=True)
def _grow(a, n):
    out = np.empty((2 * n,) + a.shape[1:], a.dtype)
    out[:n] = a[:n]
    return out


@njit(cache=True)
def _reg_run(fd, spos, skind, spar, samp, slen, rsw, dss,
             mode0, q0, p0, z0, w0, Ec0, sheet0, t0, T, h, stride,
             target, stop_at_target, coll_tol, max_rate, max_steps):
    ns = spos.shape[0]
    cap = 1024
    RT = np.empty(cap)
    RX = np.empty((cap, 5))  # q1 q2 p1 p2 E
    RI = np.empty((cap, 2), np.int64)  # chart, sheet
    ecap = 64
    EV = np.empty((ecap, 4))  # t, site, rho_min, angular momentum
    nev = 0
    nrec = 0

    mode = mode0
    q = q0.copy()
    p = p0.copy()
    z = z0
    w = w0
    Ec = Ec0
    sheet = sheet0
    t = t0
    reason = K.R_TIME
    steps = 0
    transitions = 0
    ncoll = 0
    drift = 0.0
    g = np.zeros(2)
    tmin = math.inf
    tL = 0.0
    tt = t0

    if mode < 0:
        V, g, _, st = K.field_eval_skip(q, fd, False, -1)
        if st != K.ST_OK:
            return (RT[:0], RX[:0], RI[:0], EV[:0], K.R_SINGULAR, 0, 0.0, 0, 0,
                    mode, q, p, z, w, Ec, sheet, t, tmin, tL, tt)
        E0 = V + 0.5 * (p[0] * p[0] + p[1] * p[1])
        for k in range(ns):
            dx = q[0] - spos[k, 0]
            dy = q[1] - spos[k, 1]
            if dx * dx + dy * dy < rsw[k] * rsw[k]:
                mode = k
                z = np.sqrt(complex(dx, dy))
                w = 2.0 * z.conjugate() * complex(p[0], p[1])
                Ec = E0
                break
    else:
        E0 = Ec

    hist = 0
    za = z
    wa = w
    zb = z
    wb = w
    tb = t
    if mode >= 0:
        hist = 1
    rec_now = True
    while True:
        if rec_now:
            # record current state in physical coordinates
            if nrec >= RT.shape[0]:
                RT = _grow(RT, nrec)
                RX = _grow(RX, nrec)
                RI = _grow(RI, nrec)
            RT[nrec] = t
            if mode < 0:
                Vr, _, _, _ = K.field_eval_skip(q, fd, False, -1)
                RX[nrec, 0] = q[0]
                RX[nrec, 1] = q[1]
                RX[nrec, 2] = p[0]
                RX[nrec, 3] = p[1]
                RX[nrec, 4] = Vr + 0.5 * (p[0] * p[0] + p[1] * p[1])
            else:
                zz = z * z
                rho = z.real * z.real + z.imag * z.imag
                RX[nrec, 0] = zz.real + spos[mode, 0]
                RX[nrec, 1] = zz.imag + spos[mode, 1]
                if rho > 0.0:
                    pc = w / (2.0 * z.conjugate())
                    _, P, _ = _chart_force(z, Ec, mode, fd, spos, skind, spar, samp, slen)
                    RX[nrec, 2] = pc.real
                    RX[nrec, 3] = pc.imag
                    RX[nrec, 4] = Ec + (0.125 * (w.real * w.real + w.imag * w.imag) + P) / rho
                else:
                    RX[nrec, 2] = math.nan
                    RX[nrec, 3] = math.nan
                    RX[nrec, 4] = math.nan
            RI[nrec, 0] = mode
            RI[nrec, 1] = sheet
            nrec += 1
            rec_now = False
        if t >= T or reason != K.R_TIME:
            break
        if steps >= max_steps:
            reason = R_MAXSTEPS
            break
        last = False
        if mode < 0:
            hh = h
            rem = T - t
            if rem <= h * (1.0 + 1e-9):
                if abs(rem - h) > 1e-12 * h:
                    hh = rem
                last = True
            ox = q[0]
            oy = q[1]
            half = 0.5 * hh
            for i in range(2):
                p[i] -= half * g[i]
                q[i] += hh * p[i]
            V, g, _, st = K.field_eval_skip(q, fd, False, -1)
            for i in range(2):
                p[i] -= half * g[i]
            steps += 1
            t = T if last else t + hh
            if st != K.ST_OK:
                reason = K.R_SINGULAR
                rec_now = True
                continue
            H = V + 0.5 * (p[0] * p[0] + p[1] * p[1])
            if not math.isfinite(H):
                reason = K.R_NAN
                rec_now = True
                continue
            if abs(H - E0) > drift:
                drift = abs(H - E0)
            for k in range(ns):
                if _cut_cross(ox, oy, q[0], q[1], spos[k, 0], spos[k, 1]):
                    sheet = -sheet
            if target >= 0:
                dx = q[0] - spos[target, 0]
                dy = q[1] - spos[target, 1]
                dist = math.sqrt(dx * dx + dy * dy)
                if dist < tmin:
                    tmin = dist
                    tL = dx * p[1] - dy * p[0]
                    tt = t
            for k in range(ns):
                dx = q[0] - spos[k, 0]
                dy = q[1] - spos[k, 1]
                if dx * dx + dy * dy < rsw[k] * rsw[k]:
                    mode = k
                    z = np.sqrt(complex(dx, dy))
                    w = 2.0 * z.conjugate() * complex(p[0], p[1])
                    Ec = H
                    transitions += 1
                    hist = 1
                    zb, wb, tb = z, w, t
                    break
        else:
            j = mode
            z1, w1, dt, st = _yoshida(z, w, dss[j], Ec, j, fd, spos, skind, spar, samp, slen)
            if t + dt >= T:
                # shorten the step so that the physical time lands on T
                lo = 0.0
                hi = 1.0
                for _it in range(80):
                    mid = 0.5 * (lo + hi)
                    zm, wm, dtm, stm = _yoshida(z, w, mid * dss[j], Ec, j, fd, spos, skind, spar, samp, slen)
                    if t + dtm >= T:
                        hi = mid
                        z1, w1, st = zm, wm, stm
                    else:
                        lo = mid
                    if hi - lo < 1e-16:
                        break
                t = T
                last = True
            else:
                t += dt
            steps += 1
            if st != K.ST_OK:
                reason = K.R_SINGULAR
            if (z.real >= 0.0) != (z1.real >= 0.0):
                sheet = -sheet
            qo = z * z
            qn = z1 * z1
            for k in range(ns):
                if k != j and _cut_cross(qo.real + spos[j, 0], qo.imag + spos[j, 1],
                                         qn.real + spos[j, 0], qn.imag + spos[j, 1], spos[k, 0], spos[k, 1]):
                    sheet = -sheet
            # pericentre passages: |z|^2 has a local minimum at the middle state
            rho = z1.real * z1.real + z1.imag * z1.imag
            if hist >= 2:
                ra = za.real * za.real + za.imag * za.imag
                rb = zb.real * zb.real + zb.imag * zb.imag
                if rb < ra and rb <= rho:
                    rmin = min(_seg_min(za, zb), _seg_min(zb, z1))
                    if nev >= EV.shape[0]:
                        EV = _grow(EV, nev)
                    EV[nev, 0] = tb
                    EV[nev, 1] = j
                    EV[nev, 2] = rmin
                    EV[nev, 3] = 0.5 * (zb.conjugate() * wb).imag
                    nev += 1
                    if rmin < coll_tol:
                        ncoll += 1
                    if j == target:
                        if rmin < tmin:
                            tmin = rmin
                            tL = 0.5 * (zb.conjugate() * wb).imag
                            tt = tb
                        if stop_at_target:
                            reason = R_TARGET
            za, wa = zb, wb
            zb, wb, tb = z1, w1, t
            hist += 1
            z, w = z1, w1
            if not math.isfinite(rho):
                reason = K.R_NAN
            if rho >= rsw[j]:
                zz = z * z
                q[0] = zz.real + spos[j, 0]
                q[1] = zz.imag + spos[j, 1]
                pc = w / (2.0 * z.conjugate())
                p[0] = pc.real
                p[1] = pc.imag
                V, g, _, st = K.field_eval_skip(q, fd, False, -1)
                H = V + 0.5 * (p[0] * p[0] + p[1] * p[1])
                if abs(H - E0) > drift:
                    drift = abs(H - E0)
                mode = -1
                transitions += 1
        if transitions > 100 and transitions > max_rate * (t - t0):
            reason = R_THRASH
        if last or steps % stride == 0 or reason != K.R_TIME:
            rec_now = True
    return (RT[:nrec], RX[:nrec], RI[:nrec], EV[:nev], reason, steps, drift, transitions, ncoll,
            mode, q, p, z, w, Ec, sheet, t, tmin, tL, tt)


# --------------------------------------------------------------------------
# regularized integration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularizationSpec:
    """Step sizes and chart parameters.

    ``h`` is the physical Verlet step outside the switch disks; ``ds`` the
    fictitious-time step inside a chart (default h / r_sw, at most 1e-2).
    ``r_sw`` is a scalar or one radius per site (default: 0.1 x the smallest
    site distance, capped by each site's decay radius).
    """

    h: float = 1e-3
    ds: float | None = None
    r_sw: float | Sequence[float] | None = None
    stride: int = 1
    collision_tol: float = 1e-24  # |z|^2 below this counts as an exact collision
    max_transition_rate: float = 1e4
    max_steps: int = 10 ** 9

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.ds is not None and not self.ds > 0:
            raise ValueError("ds must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class RegularizedTrajectory(Trajectory):
    chart_id: np.ndarray = None
    sheet: np.ndarray = None
    events: np.ndarray = None  # rows (t, site, min |q - s|, angular momentum about s)
    collisions: int = 0
    transitions: int = 0
    chart_state: tuple = ()  # (mode, z, w, E_chart, sheet) at the end, for continuation

    def to_csv(self, path, extra: dict | None = None) -> None:
        cols = {"chart_id": self.chart_id, "sheet": self.sheet}
        cols.update(extra or {})
        write_trajectory_csv(path, self, cols)


class CoulombSystem:
    """Singular sites plus a smooth background, prepared for the chart integrator."""

    def __init__(self, sites: Sequence[SingularSite], background=None, r_sw=None):
        self.sites = tuple(sites)
        if not self.sites:
            raise ValueError("at least one singular site is required")
        pos = np.array([s.xy for s in self.sites])
        m = len(self.sites)
        dmin = math.inf
        for i in range(m):
            for j in range(i + 1, m):
                dmin = min(dmin, float(np.hypot(*(pos[i] - pos[j]))))
        if dmin == 0.0:
            raise ValueError("two singular sites share a position")
        if r_sw is None:
            base = 0.1 * dmin if m > 1 else 0.5
            rsw = np.array([min(base, s.decay_radius) for s in self.sites])
        else:
            rsw = np.broadcast_to(np.asarray(r_sw, dtype=float), (m,)).copy()
        if np.any(~(rsw > 0)):
            raise ValueError("switch radii must be positive")
        for i in range(m):
            for j in range(i + 1, m):
                if np.hypot(*(pos[i] - pos[j])) < rsw[i] + rsw[j]:
                    raise ValueError(f"switch disks of sites {i} and {j} overlap")
        self.r_sw = rsw
        own = FiniteConfiguration(pos, np.arange(m), tuple(s.potential for s in self.sites))
        if background is None:
            cfg = own
        else:
            src = background.source if isinstance(background, PotentialField) else background
            bg = as_finite(src)
            if bg.d != 2:
                raise ValueError("background must be two-dimensional")
            if any(W.is_singular for W in bg.palette):
                raise ValueError("background must be smooth; pass singular sites explicitly")
            cfg = superpose(own, bg) if len(bg.marks) else own
        self.field = PotentialField(cfg)
        fd = self.field.fd
        self._spos = np.ascontiguousarray(fd[0][:m])
        self._skind = np.ascontiguousarray(fd[1][:m])
        self._spar = np.ascontiguousarray(fd[2][:m])
        self._samp = np.ascontiguousarray(fd[3][:m])
        self._slen = np.ascontiguousarray(fd[4][:m])

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sites])

    def ds(self, spec: RegularizationSpec) -> np.ndarray:
        if spec.ds is not None:
            return np.full(len(self.sites), float(spec.ds))
        return np.minimum(spec.h / self.r_sw, 1e-2)

    def energy(self, q, p) -> float:
        return 0.5 * float(np.dot(p, p)) + self.field.value(np.asarray(q, float))

    def run(self, spec: RegularizationSpec, T: float, *, q0=None, p0=None, chart=None,
            t0: float = 0.0, sheet: int = 1, target: int = -1, stop_at_target: bool = False):
        """Low-level run from a physical state or from chart = (site, z, w, E)."""
        if chart is None:
            mode, z0, w0, Ec = -1, 0j, 0j, 0.0
            q0 = np.asarray(q0, float).reshape(2).copy()
            p0 = np.asarray(p0, float).reshape(2).copy()
        else:
            mode, z0, w0, Ec = int(chart[0]), complex(chart[1]), complex(chart[2]), float(chart[3])
            q0 = np.zeros(2)
            p0 = np.zeros(2)
        return _reg_run(self.field.fd, self._spos, self._skind, self._spar, self._samp, self._slen,
                        self.r_sw, self.ds(spec), mode, q0, p0, z0, w0, Ec, int(sheet), float(t0),
                        float(t0 + T), float(spec.h), int(spec.stride), int(target), bool(stop_at_target),
                        float(spec.collision_tol), float(spec.max_transition_rate), int(spec.max_steps))

    def trajectory(self, out, spec: RegularizationSpec, E0: float) -> RegularizedTrajectory:
        (RT, RX, RI, EV, reason, steps, drift, trans, ncoll, mode, q, p, z, w, Ec, sheet, t,
         _tmin, _tL, _tt) = out
        return RegularizedTrajectory(
            t=RT, q=RX[:, :2].copy(), p=RX[:, 2:4].copy(), E=RX[:, 4].copy(), E0=E0, max_drift=drift,
            reason=REASONS[reason], steps=steps, h=spec.h,
            max_displacement=float(np.max(np.hypot(*(RX[:, :2] - RX[0, :2]).T))) if len(RT) else 0.0,
            meta={"r_sw": self.r_sw.tolist()}, chart_id=RI[:, 0].copy(), sheet=RI[:, 1].copy(),
            events=EV, collisions=int(ncoll), transitions=int(trans),
            chart_state=(int(mode), complex(z), complex(w), float(Ec), int(sheet)))


def integrate_regularized(sites, background, x0: PhaseState, T: float,
                          spec: RegularizationSpec | None = None) -> RegularizedTrajectory:
    """Integrate H = |p|^2/2 + V for time T > 0, continuing through collisions.

    ``sites`` is a list of SingularSite or a prepared CoulombSystem.  Outside
    the switch disks the steps are those of the smooth Verlet integrator.
    """
    spec = spec or RegularizationSpec()
    sys_ = sites if isinstance(sites, CoulombSystem) else CoulombSystem(sites, background, spec.r_sw)
    if x0.d != 2:
        raise ValueError("regularized integration is planar (d = 2)")
    if not T > 0:
        raise ValueError("T must be positive; integrate backwards by negating the momentum")
    if sys_.field.evaluate_many(x0.q[None, :])[-1][0]:
        raise SingularPointError("initial point is a singular site")
    n = max(1, int(math.ceil(T / spec.h - 1e-9)))
    spec_eff = replace(spec, h=T / n)
    E0 = sys_.energy(x0.q, x0.p)
    out = sys_.run(spec_eff, T, q0=x0.q, p0=x0.p, t0=x0.t)
    traj = sys_.trajectory(out, spec_eff, E0)
    if traj.reason == "chart-thrashing":
        raise RuntimeError(f"chart thrashing: {traj.transitions} transitions by t={traj.t[-1]:.6g}")
    if traj.reason == "singular":
        raise SingularPointError("orbit hit a singular point outside the charts")
    return traj


def to_chart(q, p, s: complex) -> tuple[complex, complex]:
    """(q, p) -> (z, w) with z = sqrt(q - s) (principal branch), w = 2 conj(z) p."""
    z = complex(np.sqrt(complex(q[0] - s.real, q[1] - s.imag)))
    return z, 2.0 * z.conjugate() * complex(p[0], p[1])


def from_chart(z: complex, w: complex, s: complex) -> tuple[np.ndarray, np.ndarray]:
    q = z * z + s
    p = w / (2.0 * z.conjugate())
    return np.array([q.real, q.imag]), np.array([p.real, p.imag])


# --------------------------------------------------------------------------
# double cover
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchFunction:
    """f(q) = prod_j (q - s_j) over the window singularities."""

    zeros: tuple

    def __init__(self, zeros):
        zs = tuple(complex(z) for z in np.asarray(zeros).ravel()) if not isinstance(zeros, tuple) else \
            tuple(complex(z) for z in zeros)
        if len(set(zs)) != len(zs):
            raise ValueError("zeros must be simple")
        object.__setattr__(self, "zeros", zs)

    @classmethod
    def from_sites(cls, sites: Sequence[SingularSite]) -> "BranchFunction":
        return cls(tuple(s.position for s in sites))

    def __call__(self, q):
        q = np.asarray(q, dtype=complex)
        out = np.ones_like(q)
        for s in self.zeros:
            out = out * (q - s)
        return out

    def principal_root(self, q):
        """prod_j sqrt(q - s_j), principal branches (the sheet +1 reference)."""
        q = np.asarray(q, dtype=complex)
        out = np.ones_like(q)
        for s in self.zeros:
            out = out * np.sqrt(q - s)
        return out

    def distance(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=complex)
        if not self.zeros:
            return np.full(q.shape, np.inf)
        return np.min(np.abs(q[..., None] - np.asarray(self.zeros)), axis=-1)


@dataclass
class SheetTrack:
    Q: np.ndarray  # continued square root at the path vertices
    sign: int  # sheet at the end relative to the start (+1 / -1)
    min_distance: float
    reliable: bool
    subdivisions: int


def _as_complex_path(path) -> np.ndarray:
    a = np.asarray(path)
    if np.iscomplexobj(a):
        return a.ravel().astype(complex)
    a = a.reshape(-1, 2).astype(float)
    return a[:, 0] + 1j * a[:, 1]


def _segment_distance(a: complex, b: complex, s: complex) -> float:
    v = b - a
    vv = abs(v) ** 2
    t = 0.0 if vv == 0 else min(max(((s - a).conjugate() * v).real / vv, 0.0), 1.0)
    return abs(a + t * v - s)


def lift_to_cover(branch: BranchFunction, path, margin: float = 1e-6, strict: bool = False,
                  max_rel_step: float = 0.25) -> SheetTrack:
    """Continue Q with Q^2 = f(q) along a polyline by nearest-root continuation.

    The start is placed on the principal sheet; the returned sign compares the
    continued Q at the end with the principal root there (for a closed loop:
    with Q at the start).  Segments are bisected until Q changes by less than
    ``max_rel_step`` of its modulus per piece.
    """
    qs = _as_complex_path(path)
    if qs.size < 2:
        raise ValueError("path needs at least two points")
    dmin = math.inf
    for a, b in zip(qs[:-1], qs[1:]):
        for s in branch.zeros:
            dmin = min(dmin, _segment_distance(a, b, s))
    reliable = dmin > margin
    if not reliable and strict:
        raise ValueError(f"path passes within {dmin:.3g} of a branch point (margin {margin})")
    Q = complex(branch.principal_root(qs[0]))
    out = [Q]
    nsub = 0
    for a, b in zip(qs[:-1], qs[1:]):
        stack = [(a, b, 0)]
        while stack:
            x, y, depth = stack.pop()
            r = complex(np.sqrt(branch(y)))
            cand = r if abs(r - Q) <= abs(-r - Q) else -r
            scale = min(abs(Q), abs(cand))
            if abs(cand - Q) > max_rel_step * scale and depth < 60:
                m = 0.5 * (x + y)
                stack.append((m, y, depth + 1))
                stack.append((x, m, depth + 1))
                nsub += 1
                continue
            Q = cand
        out.append(Q)
    Q = np.array(out)
    ref = complex(branch.principal_root(qs[-1]))
    ratio = Q[-1] / ref if ref != 0 else 1.0
    return SheetTrack(Q, 1 if ratio.real > 0 else -1, float(dmin), bool(reliable), nsub)


def winding_count(path, point: complex) -> int:
    """Winding number of a closed polyline around ``point``."""
    qs = _as_complex_path(path) - point
    ang = np.angle(qs[1:] / qs[:-1])
    return int(round(ang.sum() / (2 * math.pi)))


@dataclass(frozen=True)
class MonodromyCheck:
    n_loops: int
    failures: int
    unreliable: int
    min_distance: float


def random_loops(seed: int, n: int, center_box: float = 1.5, radius=(0.5, 2.5), n_vertices: int = 200):
    """Closed star-shaped polylines r(t) = r0 (1 + 0.3 sin(k t + phi)) around random centres."""
    rng = stream(seed, "monodromy-loops")
    th = np.linspace(0.0, 2 * math.pi, n_vertices)
    loops = []
    for _ in range(n):
        c = complex(rng.uniform(-center_box, center_box), rng.uniform(-center_box, center_box))
        r = rng.uniform(*radius) * (1 + 0.3 * np.sin(rng.integers(1, 4) * th + rng.uniform(0, 2 * math.pi)))
        path = c + r * np.exp(1j * th)
        path[-1] = path[0]
        loops.append(path)
    return loops


def monodromy_check(branch: BranchFunction, loops, margin: float = 1e-6) -> MonodromyCheck:
    """Sheet after each closed loop vs (-1)^(number of zeros with odd winding)."""
    bad = unrel = 0
    dmin = math.inf
    for path in loops:
        tr = lift_to_cover(branch, path, margin=margin)
        n_odd = sum(winding_count(path, s) % 2 for s in branch.zeros)
        dmin = min(dmin, tr.min_distance)
        if not tr.reliable:
            unrel += 1
        elif tr.sign != (-1) ** n_odd:
            bad += 1
    return MonodromyCheck(len(loops), bad, unrel, dmin)


# --------------------------------------------------------------------------
# collision orbits
# --------------------------------------------------------------------------

@dataclass
class ShootingResult:
    found: bool
    angle: float | None
    flight_time: float | None
    miss: float  # closest approach |q - s_b|
    iterations: int
    reason: str = ""

    def __iter__(self):
        return iter((self.angle, self.flight_time))


@dataclass
class Approach:
    angle: float
    signed: float  # angular momentum about the target at closest approach
    distance: float
    time: float
    hit_chart: bool
    out: tuple = field(repr=False, default=())


def launch_state(system: CoulombSystem, a: int, angle: float) -> tuple[complex, complex]:
    """Chart state (z, w) at a collision with site a whose outgoing direction is ``angle``.

    On K = 0 at z = 0, |w|^2 / 8 = -f(0); q - s = z^2 leaves along arg w^2.
    """
    wabs = math.sqrt(-8.0 * system.sites[a].strength)
    return 0j, wabs * complex(math.cos(0.5 * angle), math.sin(0.5 * angle))


def approach(system: CoulombSystem, E: float, a: int, b: int, angle: float, T_max: float,
             spec: RegularizationSpec) -> Approach:
    """Launch from a collision at a and report the first pericentre at b (or the closest approach)."""
    z, w = launch_state(system, a, angle)
    out = system.run(spec, T_max, chart=(a, z, w, E), target=b, stop_at_target=True)
    reason = out[4]
    tmin, tL, tt = out[17], out[18], out[19]
    return Approach(angle, float(tL), float(tmin), float(tt - 0.0), reason == R_TARGET, out)


def shoot_collision_orbit(sites, background, E: float, a: int, b: int, bracket: tuple[float, float],
                          spec: RegularizationSpec | None = None, T_max: float = 50.0, tol: float = 1e-6,
                          xtol: float = 1e-14, max_iter: int = 200) -> ShootingResult:
    """Bisect the launch angle from site a on the signed miss at site b.

    The signed miss is the angular momentum about s_b at closest approach; a
    zero is an orbit that hits s_b.  No sign change in the bracket gives
    ``found=False`` (which does not prove that no collision orbit exists).
    """
    if a == b:
        raise ValueError("shooting needs two distinct sites")
    spec = spec or RegularizationSpec()
    sys_ = sites if isinstance(sites, CoulombSystem) else CoulombSystem(sites, background, spec.r_sw)
    lo, hi = map(float, bracket)
    A = approach(sys_, E, a, b, lo, T_max, spec)
    B = approach(sys_, E, a, b, hi, T_max, spec)
    best = min((A, B), key=lambda x: x.distance)
    if A.distance < tol or B.distance < tol:
        return ShootingResult(True, best.angle, best.time, best.distance, 0, "endpoint")
    if A.signed * B.signed > 0 or not (math.isfinite(A.distance) and math.isfinite(B.distance)):
        return ShootingResult(False, None, None, best.distance, 0, "no sign change in bracket")
    it = 0
    while it < max_iter and hi - lo > xtol:
        it += 1
        M = approach(sys_, E, a, b, 0.5 * (lo + hi), T_max, spec)
        if M.distance < best.distance:
            best = M
        if M.signed == 0.0:
            break
        if (M.signed > 0) == (A.signed > 0):
            lo, A = M.angle, M
        else:
            hi = M.angle
    if best.distance < tol:
        return ShootingResult(True, best.angle, best.time, best.distance, it, "hit")
    return ShootingResult(False, None, None, best.distance, it, "bracket converged to a non-collision")


def return_distance(sites, background, E: float, a: int, b: int, result: ShootingResult,
                    spec: RegularizationSpec | None = None, T_max: float | None = None) -> tuple[float, float]:
    """Continue a found a->b collision orbit through b; closest return to a and its time.

    A collision orbit is reflected at b and retraces itself, so the return
    distance measures how periodic the numerical orbit is.
    """
    spec = spec or RegularizationSpec()
    sys_ = sites if isinstance(sites, CoulombSystem) else CoulombSystem(sites, background, spec.r_sw)
    first = approach(sys_, E, a, b, result.angle, 2 * result.flight_time + 1.0, spec)
    mode, z, w, Ec, sheet = first.out[9], first.out[12], first.out[13], first.out[14], first.out[15]
    t_now = first.out[16]
    T = T_max if T_max is not None else 1.5 * result.flight_time + 1.0
    out = sys_.run(spec, T, chart=(mode, z, w, Ec), t0=t_now, sheet=sheet, target=a, stop_at_target=True)
    return float(out[17]), float(out[19])
