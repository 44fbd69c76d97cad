"""Ensemble statistics: energy-velocity histograms, inversion symmetry,
Liouville mass, recurrence counts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .dynamics import IntegratorSpec, PhaseState, Trajectory, asymptotic_velocity
from .parallel import TaskFailure, parallel_map
from .randfield import (sample_poisson_configuration, LatticeBasis, PotentialField, ball_volume, estimate_range,
                        sample_lattice_configuration, sample_poisson_configuration)
from .rng import derive_seed, stream


class SamplingError(RuntimeError):
    """Rejection sampling is hopeless (E_max inconsistent with the field)."""


# --------------------------------------------------------------------------
# field samplers (picklable recipes for per-configuration fields)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeFieldSampler:
    basis: LatticeBasis
    window: tuple
    weights: tuple
    palette: tuple

    def __call__(self, seed: int) -> PotentialField:
        return PotentialField(sample_lattice_configuration(seed, self.basis, self.window, self.weights, self.palette))


@dataclass(frozen=True)
class PoissonFieldSampler:
    window: tuple
    intensities: tuple
    palette: tuple

    def __call__(self, seed: int) -> PotentialField:
        return PotentialField(sample_poisson_configuration(seed, self.window, self.intensities, self.palette))


@dataclass(frozen=True)
class FixedFieldSampler:
    """Same field for every seed (e.g. V = 0)."""

    build: object  # zero-argument callable or PotentialField

    def __call__(self, seed: int) -> PotentialField:
        return self.build if isinstance(self.build, PotentialField) else self.build()


_FIELD_CACHE: dict = {}


def _field_for(sampler, seed: int) -> PotentialField:
    key = (sampler, seed)
    try:
        return _FIELD_CACHE[key]
    except (KeyError, TypeError):
        pass
    f = sampler(seed)
    try:
        if len(_FIELD_CACHE) > 4:
            _FIELD_CACHE.clear()
        _FIELD_CACHE[key] = f
    except TypeError:
        pass
    return f


# --------------------------------------------------------------------------
# histogram
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleSpec:
    n_configs: int = 1
    per_config: int = 1000
    T: float = 10.0
    integrator: IntegratorSpec = IntegratorSpec(h=1e-2)
    n: float = 4.0
    E_max: float = 1.0
    e_bins: int = 4
    v_bins: int = 4
    E_min: float | None = None
    gap_tol: float = math.inf
    strict: bool = False
    chunk: int = 250

    def __post_init__(self):
        if min(self.n_configs, self.per_config, self.e_bins, self.v_bins, self.chunk) < 1:
            raise ValueError("ensemble counts must be >= 1")
        if not self.T > 0 or not self.n > 0:
            raise ValueError("T and n must be positive")


@dataclass
class EnergyVelocityHistogram:
    e_edges: np.ndarray
    v_edges: list
    counts: np.ndarray
    flagged: np.ndarray
    n_samples: int
    clipped: int = 0
    attempts: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return len(self.v_edges)

    def empty_like(self) -> "EnergyVelocityHistogram":
        return EnergyVelocityHistogram(self.e_edges, self.v_edges, np.zeros_like(self.counts),
                                       np.zeros_like(self.flagged), 0, 0, 0, dict(self.meta))

    def merge(self, other: "EnergyVelocityHistogram") -> "EnergyVelocityHistogram":
        if not (np.array_equal(self.e_edges, other.e_edges)
                and all(np.array_equal(a, b) for a, b in zip(self.v_edges, other.v_edges))):
            raise ValueError("cannot merge histograms with different bins")
        return EnergyVelocityHistogram(self.e_edges, self.v_edges, self.counts + other.counts,
                                       self.flagged + other.flagged, self.n_samples + other.n_samples,
                                       self.clipped + other.clipped, self.attempts + other.attempts,
                                       dict(self.meta))

    def add(self, E: float, v, flagged: bool = False) -> None:
        idx, clipped = _bin_index(self.e_edges, self.v_edges, E, v)
        self.counts[idx] += 1
        if flagged:
            self.flagged[idx] += 1
        self.n_samples += 1
        self.clipped += int(clipped)

    def negated(self) -> np.ndarray:
        """Counts with all velocity axes reversed."""
        return np.flip(self.counts, axis=tuple(range(1, self.counts.ndim)))

    def energy_slice(self, E: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self.e_edges, E, side="right") - 1, 0, len(self.e_edges) - 2))
        return self.counts[i]

    def rows(self):
        d = self.d
        head = ["E_lo", "E_hi"]
        for k in range(d):
            head += [f"v{k + 1}_lo", f"v{k + 1}_hi"]
        head += ["count", "flagged_count"]
        out = []
        for key, v in sorted(self.meta.items()):
            out.append(f"# {key}={v}")
        out.append(f"# n_samples={self.n_samples}")
        out.append(f"# clipped={self.clipped}")
        out.append(",".join(head))
        for idx in np.ndindex(*self.counts.shape):
            row = [_f(self.e_edges[idx[0]]), _f(self.e_edges[idx[0] + 1])]
            for k in range(d):
                e = self.v_edges[k]
                row += [_f(e[idx[k + 1]]), _f(e[idx[k + 1] + 1])]
            row += [str(int(self.counts[idx])), str(int(self.flagged[idx]))]
            out.append(",".join(row))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.rows()) + "\n")


def _f(x) -> str:
    return format(float(x), ".17g")


def _bin_index(e_edges, v_edges, E, v):
    clipped = False
    i = int(np.searchsorted(e_edges, E, side="right")) - 1
    if i < 0 or i > len(e_edges) - 2:
        clipped = True
        i = min(max(i, 0), len(e_edges) - 2)
    idx = [i]
    for k, edges in enumerate(v_edges):
        j = int(np.searchsorted(edges, v[k], side="right")) - 1
        if j < 0 or j > len(edges) - 2:
            clipped = True
            j = min(max(j, 0), len(edges) - 2)
        idx.append(j)
    return tuple(idx), clipped


def make_histogram(e_edges, v_edges) -> EnergyVelocityHistogram:
    e_edges = np.asarray(e_edges, dtype=float)
    v_edges = [np.asarray(e, dtype=float) for e in v_edges]
    shape = (len(e_edges) - 1,) + tuple(len(e) - 1 for e in v_edges)
    return EnergyVelocityHistogram(e_edges, v_edges, np.zeros(shape, np.int64), np.zeros(shape, np.int64), 0)


def _box_sample(rng, basis: LatticeBasis, n: float) -> np.ndarray:
    x = rng.uniform(-n, n, basis.d)
    return basis.matrix @ x


def _ball_sample(rng, d: int, R: float) -> np.ndarray:
    while True:
        p = rng.uniform(-R, R, d)
        if p @ p < R * R:
            return p


def _ev_task(args):
    sampler, spec, seed, c, j0, j1, e_edges, v_edges, basis = args
    fseed = derive_seed(seed, "configuration", c)
    fld = _field_for(sampler, fseed)
    lo = basis.matrix @ np.full(fld.d, -spec.n)
    hi = basis.matrix @ np.full(fld.d, spec.n)
    box_lo, box_hi = np.minimum(lo, hi), np.maximum(lo, hi)
    res = max(8, int(8 * spec.n))
    rng_est = estimate_range(fld, box_lo, box_hi, n=min(res, 256))
    pad = 0.05 * (rng_est.v_max - rng_est.v_min) + 1e-12
    v_min = rng_est.v_min - pad
    if not spec.E_max > v_min:
        raise SamplingError("E_max below the potential minimum")
    R = math.sqrt(2.0 * (spec.E_max - v_min))
    h = make_histogram(e_edges, v_edges)
    attempts = 0
    for j in range(j0, j1):
        rng = stream(seed, "ev-sample", c, j)
        while True:
            attempts += 1
            q = _box_sample(rng, basis, spec.n)
            p = _ball_sample(rng, fld.d, R)
            H = 0.5 * p @ p + fld.value(q)
            if H <= spec.E_max:
                break
            if attempts > 1000 and (j - j0 + 1) / attempts < 0.01:
                raise SamplingError("rejection rate above 99%: E_max inconsistent with the field")
        est = asymptotic_velocity(fld, PhaseState(0.0, q, p), spec.T, spec.integrator)
        flagged = (not est.reliable) or not (est.gap <= spec.gap_tol)
        if flagged and spec.strict:
            continue
        h.add(H, est.v, flagged)
    h.attempts = attempts
    return h


def energy_velocity_distribution(sampler, spec: EnsembleSpec, seed: int, basis: LatticeBasis | None = None,
                                 e_edges=None, v_edges=None, workers: int = 1) -> EnergyVelocityHistogram:
    """Empirical law of (H(x0), v(x0)) for x0 uniform on {H <= E_max} over Q_n x R^d."""
    f0 = _field_for(sampler, derive_seed(seed, "configuration", 0))
    d = f0.d
    basis = basis or LatticeBasis.cubic(d)
    if e_edges is None or v_edges is None:
        lo = basis.matrix @ np.full(d, -spec.n)
        hi = basis.matrix @ np.full(d, spec.n)
        r = estimate_range(f0, np.minimum(lo, hi), np.maximum(lo, hi), n=min(256, max(8, int(8 * spec.n))))
        E_lo = spec.E_min if spec.E_min is not None else r.v_min - 0.05 * (r.v_max - r.v_min) - 1e-12
        vmax = math.sqrt(2.0 * (spec.E_max - E_lo)) * (1 + 1e-6)
        if e_edges is None:
            e_edges = np.linspace(E_lo, spec.E_max * (1 + 1e-12) + 1e-12, spec.e_bins + 1)
        if v_edges is None:
            v_edges = [np.linspace(-vmax, vmax, spec.v_bins + 1)] * d
    tasks = []
    for c in range(spec.n_configs):
        for j0 in range(0, spec.per_config, spec.chunk):
            tasks.append((sampler, spec, seed, c, j0, min(j0 + spec.chunk, spec.per_config),
                          np.asarray(e_edges, float), [np.asarray(e, float) for e in v_edges], basis))
    parts = parallel_map(_ev_task, tasks, workers)
    bad = [p for p in parts if isinstance(p, TaskFailure)]
    if bad:
        raise RuntimeError(f"{len(bad)} ensemble task(s) failed: {bad[0].error}")
    hist = make_histogram(e_edges, v_edges)
    for p in parts:
        hist = hist.merge(p)
    hist.meta.update({"seed": seed, "n_configs": spec.n_configs, "per_config": spec.per_config, "T": spec.T,
                      "h": spec.integrator.h, "n": spec.n, "E_max": spec.E_max, "strict": spec.strict,
                      "attempts": hist.attempts})
    return hist


@dataclass(frozen=True)
class SymmetryResult:
    distance: float
    threshold: float
    passed: bool


def inversion_symmetry_test(hist: EnergyVelocityHistogram, threshold: float | None = None) -> SymmetryResult:
    """Total-variation distance between the histogram and its velocity reversal."""
    for e in hist.v_edges:
        if not np.allclose(e, -e[::-1], rtol=0, atol=1e-12 * (1 + np.max(np.abs(e)))):
            raise ValueError("velocity bins are not symmetric about 0")
    N = hist.counts.sum()
    if N == 0:
        raise ValueError("empty histogram")
    tv = 0.5 * float(np.abs(hist.counts - hist.negated()).sum()) / N
    thr = 4.0 / math.sqrt(N) if threshold is None else threshold
    return SymmetryResult(tv, thr, tv <= thr)


# --------------------------------------------------------------------------
# Liouville mass
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MassEstimate:
    value: float
    stderr: float
    n: int


def _domain_points(rng, basis: LatticeBasis, origin, n: int) -> np.ndarray:
    u = rng.random((n, basis.d))
    return np.asarray(origin, dtype=float) + u @ basis.matrix.T


def liouville_mass_estimate(field: PotentialField, E: float, basis: LatticeBasis | None = None, origin=None,
                            n_samples: int = 100000, seed: int = 0) -> MassEstimate:
    """tau_d |D| <(2(E - V))_+^{d/2}> over q uniform in the cell D = origin + B[0,1)^d."""
    d = field.d
    basis = basis or LatticeBasis.cubic(d)
    origin = np.zeros(d) if origin is None else origin
    rng = stream(seed, "liouville", 0)
    Q = _domain_points(rng, basis, origin, n_samples)
    V = field.values(Q)
    w = np.maximum(2.0 * (E - V), 0.0) ** (d / 2)
    c = ball_volume(d) * basis.volume
    se = c * w.std(ddof=1) / math.sqrt(n_samples) if n_samples > 1 else 0.0
    return MassEstimate(float(c * w.mean()), float(se), n_samples)


def phase_space_mass(field: PotentialField, E: float, basis: LatticeBasis | None = None, origin=None,
                     n_samples: int = 100000, seed: int = 0, v_min: float | None = None) -> MassEstimate:
    """Independent estimate: hit fraction of {H <= E} in D x ball(sqrt(2(E - V_min)))."""
    d = field.d
    basis = basis or LatticeBasis.cubic(d)
    origin = np.zeros(d) if origin is None else origin
    rng = stream(seed, "phase-space-mass", 0)
    if v_min is None:
        Qg = _domain_points(stream(seed, "phase-space-mass", 1), basis, origin, 20000)
        v_min = float(field.values(Qg).min())
        v_min -= 0.1 * (abs(v_min) + 1.0)
    R = math.sqrt(max(2.0 * (E - v_min), 0.0))
    Q = _domain_points(rng, basis, origin, n_samples)
    g = rng.normal(size=(n_samples, d))
    g /= np.linalg.norm(g, axis=1)[:, None]
    P = g * (R * rng.random(n_samples) ** (1.0 / d))[:, None]
    H = 0.5 * np.einsum("ij,ij->i", P, P) + field.values(Q)
    hit = (H <= E).astype(float)
    vol = basis.volume * ball_volume(d) * R ** d
    f = hit.mean()
    return MassEstimate(float(vol * f), float(vol * math.sqrt(max(f * (1 - f), 0.0) / n_samples)), n_samples)


# --------------------------------------------------------------------------
# recurrence
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Recurrence:
    count: int
    times: np.ndarray


def recurrence_rate(traj: Trajectory, lo, hi, min_gap: float = 0.0, basis: LatticeBasis | None = None) -> Recurrence:
    """Entries of the sampled orbit into the box [lo, hi) separated by at least ``min_gap``.

    With ``basis``, positions are reduced modulo the lattice first (torus quotient)
    and the box is given in basis coordinates.
    """
    Q = traj.q
    if basis is not None:
        Q = Q @ basis.inverse.T
        Q = Q - np.floor(Q)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inside = np.all((Q >= lo) & (Q < hi), axis=1)
    entries = np.nonzero(inside[1:] & ~inside[:-1])[0] + 1
    times = []
    last = -math.inf
    for i in entries:
        t = traj.t[i]
        if t - last >= min_gap:
            times.append(t)
            last = t
    return Recurrence(len(times), np.array(times))


# --------------------------------------------------------------------------
# Poisson sampler check
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoissonCheck:
    n_draws: int
    volume: float
    chi2_p: tuple  # per mark
    empty_observed: tuple  # per mark, then the whole window
    empty_expected: tuple
    empty_z: tuple
    uniform_p: float  # KS p-value of the pooled first coordinate

    def passed(self, alpha: float = 0.01, z_max: float = 3.0) -> bool:
        return min(self.chi2_p) > alpha and max(abs(z) for z in self.empty_z) <= z_max


def _poisson_gof(counts: np.ndarray, mean: float) -> float:
    """Chi-square p-value of counts against Poisson(mean); tail cells merged to expected >= 5."""
    n = counts.size
    kmax = int(counts.max())
    obs = np.bincount(counts, minlength=kmax + 1).astype(float)
    pk = sps.poisson.pmf(np.arange(kmax + 1), mean)
    exp = n * pk
    exp[-1] = n * sps.poisson.sf(kmax - 1, mean)  # last cell holds the upper tail
    o, e = [], []
    acc_o = acc_e = 0.0
    for a, b in zip(obs, exp):
        acc_o += a
        acc_e += b
        if acc_e >= 5.0:
            o.append(acc_o)
            e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0:
        if e:
            o[-1] += acc_o
            e[-1] += acc_e
        else:
            o.append(acc_o)
            e.append(acc_e)
    if len(e) < 2:
        return 1.0
    return float(sps.chisquare(o, e).pvalue)


def poisson_sampler_check(window, intensities, palette, n_draws: int = 10000, seed: int = 0) -> PoissonCheck:
    """Goodness of fit of the marked Poisson sampler over ``n_draws`` independent windows."""
    lo, hi = (np.asarray(x, dtype=float).ravel() for x in window)
    rho = np.asarray(intensities, dtype=float)
    vol = float(np.prod(hi - lo))
    counts = np.zeros((n_draws, rho.size), dtype=np.int64)
    xs = []
    for i in range(n_draws):
        cfg = sample_poisson_configuration(derive_seed(seed, "poisson-check", i), window, intensities, palette)
        counts[i] = cfg.counts()
        xs.append((cfg.points[:, 0] - lo[0]) / (hi[0] - lo[0]))
    chi = tuple(_poisson_gof(counts[:, j], rho[j] * vol) for j in range(rho.size))
    emp_obs, emp_exp, z = [], [], []
    for lam, empty in [(rho[j] * vol, counts[:, j] == 0) for j in range(rho.size)] + [(rho.sum() * vol, counts.sum(1) == 0)]:
        pe = math.exp(-lam)
        po = float(empty.mean())
        sd = math.sqrt(pe * (1 - pe) / n_draws)
        emp_obs.append(po)
        emp_exp.append(pe)
        z.append((po - pe) / sd if sd > 0 else 0.0)
    x = np.concatenate(xs) if xs else np.zeros(0)
    up = float(sps.kstest(x, "uniform").pvalue) if x.size else 1.0
    return PoissonCheck(n_draws, vol, chi, tuple(emp_obs), tuple(emp_exp), tuple(z), up)
