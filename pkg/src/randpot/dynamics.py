"""Hamiltonian flow of H(p, q) = |p|^2/2 + V(q) by fixed-step velocity Verlet."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .randfield import Configuration, PotentialField, SingularPointError, shift_configuration

REASONS = {K.R_TIME: "time-limit", K.R_ESCAPED: "escaped", K.R_GUARD: "margin-guard",
           K.R_NAN: "nan", K.R_SINGULAR: "singular"}


class IntegrationError(RuntimeError):
    """Step produced NaN/overflow (step too large)."""


class TrajectoryTerminated(RuntimeError):
    """A diagnostic needed the full time interval but the orbit stopped early."""


@dataclass(frozen=True)
class PhaseState:
    t: float
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape:
            raise ValueError("q and p must have equal shape")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p)) and math.isfinite(self.t)):
            raise ValueError("phase state must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t", float(self.t))

    @property
    def d(self) -> int:
        return self.q.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


@dataclass(frozen=True)
class IntegratorSpec:
    h: float = 1e-3
    stride: int = 1
    r_esc: float = math.inf
    margin: float = 0.0
    guard: bool = True
    scheme: str = "velocity-verlet"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if not self.r_esc > 0:
            raise ValueError("escape radius must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.scheme != "velocity-verlet":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


@dataclass
class Trajectory:
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    E: np.ndarray
    E0: float
    max_drift: float
    reason: str
    steps: int
    h: float
    max_displacement: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def rel_drift(self) -> float:
        return self.max_drift / abs(self.E0) if self.E0 != 0 else self.max_drift

    @property
    def final(self) -> PhaseState:
        return PhaseState(self.t[-1], self.q[-1], self.p[-1])

    @property
    def terminated_early(self) -> bool:
        return self.reason != "time-limit"

    def __len__(self):
        return len(self.t)

    def to_csv(self, path, extra: dict | None = None) -> None:
        write_trajectory_csv(path, self, extra)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def trajectory_rows(traj: Trajectory, extra: dict | None = None):
    d = traj.q.shape[1]
    head = ["t"] + [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)] + ["E"]
    extra = extra or {}
    head += list(extra)
    yield ",".join(head)
    for k in range(len(traj.t)):
        row = [_fmt(traj.t[k])] + [_fmt(x) for x in traj.q[k]] + [_fmt(x) for x in traj.p[k]] + [_fmt(traj.E[k])]
        row += [str(v[k]) for v in extra.values()]
        yield ",".join(row)


def write_trajectory_csv(path, traj: Trajectory, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in trajectory_rows(traj, extra):
            fh.write(line + "\n")


def energy(field: PotentialField, q, p) -> float:
    return 0.5 * float(np.dot(p, p)) + field.value(q)


def _guard_arrays(field: PotentialField, spec: IntegratorSpec):
    d = field.d
    if not spec.guard or field.guard is None:
        return False, np.eye(d), np.full(d, -np.inf), np.full(d, np.inf)
    binv, lo, hi = field.guard
    m = spec.margin * np.linalg.norm(binv, axis=1)
    return True, np.ascontiguousarray(binv, dtype=float), lo + m, hi - m


def _nsteps(T: float, h: float) -> tuple[int, float]:
    """Number of steps and the step actually used (h adjusted so steps divide T)."""
    n = max(1, int(math.ceil(abs(T) / h - 1e-9)))
    return n, abs(T) / n


def integrate(field: PotentialField, x0: PhaseState, T: float, spec: IntegratorSpec = IntegratorSpec()) -> Trajectory:
    """Velocity-Verlet trajectory on [0, T] (T < 0: backward, via momentum reversal)."""
    if not isinstance(x0, PhaseState):
        x0 = PhaseState(0.0, *x0)
    if x0.d != field.d:
        raise ValueError("state dimension differs from field dimension")
    if T == 0:
        E = energy(field, x0.q, x0.p)
        return Trajectory(np.array([x0.t]), x0.q[None].copy(), x0.p[None].copy(), np.array([E]), E, 0.0,
                          "time-limit", 0, spec.h)
    field.value(x0.q)  # raises at a singular point
    sign = 1.0 if T > 0 else -1.0
    n, h = _nsteps(T, spec.h)
    use_guard, gb, glo, ghi = _guard_arrays(field, spec)
    t, Q, P, E, steps, reason, drift, disp = K.verlet(
        field.fd, np.ascontiguousarray(x0.q), np.ascontiguousarray(sign * x0.p), h, n, int(spec.stride),
        float(spec.r_esc), use_guard, gb, glo, ghi)
    reason = REASONS[reason]
    if reason == "nan":
        raise IntegrationError(f"non-finite state after {steps} steps (h={h:g} too large?)")
    if reason == "singular":
        raise SingularPointError("trajectory hit a singular point; use the coulomb module")
    return Trajectory(x0.t + sign * t, Q, sign * P, E, float(E[0]), float(drift), reason, int(steps), h,
                      float(disp))


def flow_map(field: PotentialField, q, p, T: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint of the Verlet flow (no guards, no recording)."""
    n, hh = _nsteps(T, h)
    s = 1.0 if T >= 0 else -1.0
    qT, pT, st = K.verlet_final(field.fd, np.ascontiguousarray(q, dtype=float),
                                np.ascontiguousarray(s * np.asarray(p, dtype=float)), hh, n)
    if st != K.ST_OK:
        raise SingularPointError("flow hit a singular point")
    return qT, s * pT


@dataclass(frozen=True)
class VelocityEstimate:
    v: np.ndarray
    gap: float
    reliable: bool
    reason: str
    rel_drift: float


def asymptotic_velocity(field: PotentialField, x0: PhaseState, T: float,
                        spec: IntegratorSpec = IntegratorSpec()) -> VelocityEstimate:
    """v = (q(T) - q0)/T and the Cauchy gap |v(T) - v(T/2)| of displacement averages."""
    if not isinstance(x0, PhaseState):
        x0 = PhaseState(0.0, *x0)
    n, _ = _nsteps(T, spec.h)
    n += n % 2
    h = abs(T) / n
    spec2 = IntegratorSpec(h=h, stride=n // 2, r_esc=spec.r_esc, margin=spec.margin, guard=spec.guard)
    tr = integrate(field, x0, T, spec2)
    dq = tr.q - x0.q
    if tr.terminated_early:
        tt = tr.t[-1] - x0.t
        v = dq[-1] / tt if tt != 0 else np.zeros(field.d)
        return VelocityEstimate(v, math.nan, False, tr.reason, tr.rel_drift)
    v_full = dq[-1] / T
    v_half = dq[1] / (T / 2)
    return VelocityEstimate(v_full, float(np.linalg.norm(v_full - v_half)), True, tr.reason, tr.rel_drift)


def classify_boundedness(field: PotentialField, x0: PhaseState, T: float, spec: IntegratorSpec,
                         r_b: float, samples: int = 1024) -> str:
    """'bounded' | 'escaping' | 'undecided' on [0, T]."""
    if not r_b < spec.r_esc:
        raise ValueError("r_b must be smaller than the escape radius")
    if not isinstance(x0, PhaseState):
        x0 = PhaseState(0.0, *x0)
    n, _ = _nsteps(T, spec.h)
    stride = max(1, n // samples)
    tr = integrate(field, x0, T, IntegratorSpec(spec.h, stride, spec.r_esc, spec.margin, spec.guard))
    if tr.reason == "time-limit" and tr.max_displacement <= r_b:
        return "bounded"
    if tr.reason == "escaped":
        return "escaping"
    r = np.linalg.norm(tr.q, axis=1)
    tail = r[tr.t - tr.t[0] >= 0.75 * (tr.t[-1] - tr.t[0])]
    if tr.reason == "time-limit" and len(tail) >= 2 and np.all(np.diff(tail) > 0) and tail[-1] > r_b:
        return "escaping"
    return "undecided"


def reversibility_error(field: PotentialField, x0: PhaseState, T: float,
                        spec: IntegratorSpec = IntegratorSpec()) -> float:
    """Distance to x0 after integrating T, reversing momentum, integrating T, reversing again."""
    if not isinstance(x0, PhaseState):
        x0 = PhaseState(0.0, *x0)
    n, _ = _nsteps(T, spec.h)
    s = IntegratorSpec(spec.h, n, spec.r_esc, spec.margin, spec.guard)
    a = integrate(field, x0, T, s)
    if a.terminated_early:
        raise TrajectoryTerminated(a.reason)
    b = integrate(field, PhaseState(0.0, a.q[-1], -a.p[-1]), T, s)
    if b.terminated_early:
        raise TrajectoryTerminated(b.reason)
    return float(np.linalg.norm(np.concatenate([b.q[-1] - x0.q, -b.p[-1] - x0.p])))


def shift_commutation_error(cfg: Configuration, x0: PhaseState, ell, T: float, h: float = 1e-3) -> float:
    """|Phi^{theta_l omega}_T(q0, p0) - (Phi^omega_T(q0 + l, p0) - (l, 0))|.

    theta_l moves sites by -l, so its flow is the original flow conjugated by
    the translation q -> q + l.
    """
    ell = np.asarray(ell, dtype=float).ravel()
    f0 = PotentialField(cfg)
    f1 = PotentialField(shift_configuration(cfg, ell))
    qa, pa = flow_map(f1, x0.q, x0.p, T, h)
    qb, pb = flow_map(f0, x0.q + ell, x0.p, T, h)
    return float(np.linalg.norm(np.concatenate([qa - (qb - ell), pa - pb])))
