"""Random potentials: single-site zoo, lattice and marked Poisson configurations,
windowed field evaluation with derivatives and tail bookkeeping.

V(omega, q) = sum_l W_{omega(l)}(q - l) over the sites of a configuration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, interpolate, special

from . import _kernels as K
from .rng import stream

TAIL_TARGET = 1e-12

_KIND_CODES = {
    "zero": K.K_ZERO,
    "gaussian": K.K_GAUSS,
    "bump": K.K_BUMP,
    "yukawa": K.K_YUKAWA,
    "finite-range": K.K_FINITE,
    "quadratic": K.K_QUAD,
    "smoothed-indicator": K.K_INDICATOR,
    "cosine": K.K_COSINE,
    "radial-profile": K.K_TABLE,
}
CELL_KINDS = ("smoothed-indicator", "cosine")
SINGULAR_KINDS = ("yukawa", "finite-range")


class SingularPointError(ValueError):
    """Field evaluated exactly at a Coulombic singularity."""


def ball_volume(d: int) -> float:
    """Lebesgue measure of the unit ball in R^d."""
    return math.pi ** (d / 2) / special.gamma(1 + d / 2)


def sphere_area(d: int) -> float:
    return d * ball_volume(d)


# --------------------------------------------------------------------------
# lattice basis
# --------------------------------------------------------------------------

class LatticeBasis:
    """Basis l_1..l_d of a lattice; ``vectors[k]`` is l_{k+1}."""

    def __init__(self, vectors):
        v = np.atleast_2d(np.asarray(vectors, dtype=float))
        if v.shape[0] != v.shape[1]:
            raise ValueError(f"basis must be d x d, got {v.shape}")
        det = float(np.linalg.det(v))
        if not abs(det) > 1e-14:
            raise ValueError("basis vectors are linearly dependent")
        self.vectors = v
        self.matrix = v.T.copy()  # columns are basis vectors: position = matrix @ index
        self.inverse = np.linalg.inv(self.matrix)
        self.det = det

    @classmethod
    def cubic(cls, d: int, spacing: float = 1.0) -> "LatticeBasis":
        return cls(spacing * np.eye(d))

    @property
    def d(self) -> int:
        return self.vectors.shape[0]

    @property
    def volume(self) -> float:
        """Volume of the fundamental domain."""
        return abs(self.det)

    @property
    def diameter(self) -> float:
        corners = np.array(np.meshgrid(*[[0.0, 1.0]] * self.d, indexing="ij")).reshape(self.d, -1)
        pts = self.matrix @ corners
        return float(max(np.linalg.norm(pts[:, i] - pts[:, j]) for i in range(pts.shape[1]) for j in range(pts.shape[1])))

    def position(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=float) @ self.vectors

    def coordinates(self, q) -> np.ndarray:
        return np.asarray(q, dtype=float) @ self.inverse.T

    def lattice_index(self, ell, tol: float = 1e-9) -> np.ndarray:
        """Integer coordinates of a lattice vector; raises if ``ell`` is off-lattice."""
        x = self.coordinates(ell)
        n = np.rint(x)
        if np.max(np.abs(x - n), initial=0.0) > tol:
            raise ValueError(f"{ell!r} is not a lattice vector")
        return n.astype(np.int64)

    def __eq__(self, other):
        return isinstance(other, LatticeBasis) and np.array_equal(self.vectors, other.vectors)

    def __hash__(self):
        return hash(self.vectors.tobytes())

    def __repr__(self):
        return f"LatticeBasis({self.vectors.tolist()})"


# --------------------------------------------------------------------------
# single-site potentials
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SingleSitePotential:
    """One entry of the single-site zoo: ``amplitude * W_kind(x / length)``.

    Radial kinds use x = q - site; cell kinds use lattice-basis coordinates
    x = B^{-1}(q - site) and require the field's basis.
    """

    kind: str
    params: tuple = ()
    amplitude: float = 1.0
    length: float = 1.0
    table_r: np.ndarray | None = field(default=None, compare=False, repr=False)
    table_c: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown single-site kind {self.kind!r}")
        if self.length <= 0:
            raise ValueError("length scale must be positive")

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def gaussian(cls, height: float = 1.0, sigma: float = 1.0):
        return cls("gaussian", (float(sigma),), float(height))

    @classmethod
    def bump(cls, height: float = 1.0, radius: float = 1.0, center_radius: float = 0.0, order: float = 4.0):
        """height * (1 - u^2)^order, u = (r - center_radius)/radius; C^{order-1}."""
        return cls("bump", (float(center_radius), float(radius), float(order)), float(height))

    @classmethod
    def smoothed_indicator(cls, height: float = 1.0):
        """height * (1_D * f): mollified indicator of the fundamental cell."""
        return cls("smoothed-indicator", (), float(height))

    @classmethod
    def cosine(cls, amplitude: float = 1.0):
        """-amplitude * sum_k cos(2 pi x_k) * F(x); sums over the lattice to -sum_k cos(2 pi x_k)."""
        return cls("cosine", (), float(amplitude))

    @classmethod
    def yukawa(cls, c: float = 1.0, mu: float = 1.0):
        """-c exp(-mu r)/r (mu = 0: Kepler)."""
        return cls("yukawa", (float(c), float(mu)))

    @classmethod
    def finite_range(cls, c: float = 1.0, lam: float = 1.0, eta: int = 3, sign: float = 1.0):
        """-g(r)/r with g(r) = sign * c * cos^{eta+1}(lam r) for r < pi/(2 lam)."""
        return cls("finite-range", (float(c), float(lam), float(eta + 1), float(sign)))

    @classmethod
    def quadratic(cls, k: float = 1.0):
        """k r^2 / 2 (harmonic trap, or inverted for k < 0)."""
        return cls("quadratic", (float(k),))

    @classmethod
    def radial_profile(cls, r, values, amplitude: float = 1.0):
        """Clamped cubic spline through (r_i, values_i) on a uniform grid starting at 0.

        Slope is zero at both ends; the profile is zero beyond the last knot, so
        the last value should be 0 for continuity.
        """
        r = np.asarray(r, dtype=float)
        values = np.asarray(values, dtype=float)
        dr = np.diff(r)
        if r[0] != 0.0 or not np.allclose(dr, dr[0], rtol=1e-9, atol=0):
            raise ValueError("radial-profile knots must be uniform and start at 0")
        sp = interpolate.CubicSpline(r, values, bc_type=((1, 0.0), (1, 0.0)))
        coef = sp.c[::-1].T.copy()  # rows: c0 + c1 x + c2 x^2 + c3 x^3
        return cls("radial-profile", (0.0, float(len(r)), float(dr[0])), float(amplitude),
                   table_r=r, table_c=coef)

    # -- properties ---------------------------------------------------------
    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def is_cell(self) -> bool:
        return self.kind in CELL_KINDS

    @property
    def is_singular(self) -> bool:
        return self.kind in SINGULAR_KINDS

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.amplitude == 0.0

    def with_scaling(self, amplitude_factor: float = 1.0, length_factor: float = 1.0) -> "SingleSitePotential":
        return replace(self, amplitude=self.amplitude * amplitude_factor, length=self.length * length_factor)

    def support_radius(self, basis: LatticeBasis | None = None) -> float:
        """Radius (length units) outside of which W vanishes identically; inf if none."""
        a = self.length
        if self.is_zero:
            return 0.0
        if self.kind == "bump":
            rc, w, _ = self.params
            return a * (rc + w)
        if self.kind == "finite-range":
            return a * 0.5 * math.pi / self.params[1]
        if self.kind == "radial-profile":
            return a * float(self.table_r[-1])
        if self.is_cell:
            basis = basis or LatticeBasis.cubic(1)
            d = basis.d
            corners = np.array(np.meshgrid(*[[-0.25, 1.25]] * d, indexing="ij")).reshape(d, -1)
            return a * float(np.max(np.linalg.norm(basis.matrix @ corners, axis=0))) * (1 + 1e-12)
        return math.inf

    def envelope(self, r) -> np.ndarray:
        """Bound on max(|W|, |grad W|, |Hess W|) at distance >= r (decreasing for large r)."""
        r = np.asarray(r, dtype=float)
        a, b = self.length, abs(self.amplitude)
        scale = b * max(1.0, 1.0 / a, 1.0 / a ** 2)
        rho = r / a
        if self.is_zero:
            return np.zeros_like(r)
        if self.kind == "gaussian":
            s = self.params[0]
            return scale * np.exp(-0.5 * rho ** 2 / s ** 2) * (1 + rho / s ** 2 + rho ** 2 / s ** 4 + 1 / s ** 2)
        if self.kind == "yukawa":
            c, mu = self.params
            with np.errstate(divide="ignore"):
                poly = 1 / rho + (1 + mu * rho) / rho ** 2 + (mu ** 2 * rho ** 2 + 2 * mu * rho + 2) / rho ** 3
            return scale * abs(c) * np.exp(-mu * rho) * poly
        if self.kind == "quadratic":
            k = abs(self.params[0])
            return scale * k * (0.5 * rho ** 2 + rho + 1)
        R = self.support_radius()
        return np.where(r >= R, 0.0, math.inf)

    def integral(self, d: int, basis: LatticeBasis | None = None) -> float:
        """I = integral of W over R^d."""
        a, b = self.length, self.amplitude
        if self.is_zero:
            return 0.0
        if self.kind == "smoothed-indicator":
            basis = basis or LatticeBasis.cubic(d)
            return b * a ** d * basis.volume
        if self.kind == "cosine":
            basis = basis or LatticeBasis.cubic(d)
            c1 = integrate.quad(lambda x: math.cos(2 * math.pi * x) * K.indicator_1d(x)[0], -0.25, 1.25,
                                epsabs=1e-14, epsrel=1e-13, limit=200)[0]
            return -b * a ** d * basis.volume * d * c1
        if self.kind == "quadratic" or (self.kind == "yukawa" and self.params[1] == 0.0):
            return math.nan
        f = lambda rho: float(K._radial_profile(self.code, np.array(self.params + (0.0,) * (4 - len(self.params))),
                                                  rho, self._table())[0]) * rho ** (d - 1)
        R = self.support_radius() / a
        if not math.isfinite(R):
            R = 1.0
            while float(self.envelope(np.array(R * a))) * (R * a) ** (d - 1) > 1e-18 * (1 + abs(b)):
                R *= 2
        pts = [x for x in (self.params[0] if self.kind == "bump" else None,) if x is not None and 0 < x < R]
        val = integrate.quad(f, 0.0, R, points=pts or None, epsabs=1e-15, epsrel=1e-12, limit=500)[0]
        return b * a ** d * sphere_area(d) * val

    def _table(self):
        return self.table_c if self.table_c is not None else np.zeros((1, 4))


# --------------------------------------------------------------------------
# configurations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeConfiguration:
    """Windowed lattice assignment l -> mark; cells outside the window contribute nothing."""

    basis: LatticeBasis
    window_lo: tuple
    assignment: np.ndarray = field(compare=False)
    palette: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if a.ndim != self.basis.d:
            raise ValueError("assignment rank must equal lattice dimension")
        if a.size == 0:
            raise ValueError("empty window")
        if a.min() < 0 or a.max() >= len(self.palette):
            raise ValueError("assignment contains marks outside the palette")
        object.__setattr__(self, "window_lo", tuple(int(x) for x in self.window_lo))
        object.__setattr__(self, "assignment", np.ascontiguousarray(a, dtype=np.int64))
        object.__setattr__(self, "palette", tuple(self.palette))

    @property
    def d(self) -> int:
        return self.basis.d

    @property
    def window_hi(self) -> tuple:
        return tuple(lo + n for lo, n in zip(self.window_lo, self.assignment.shape))

    def indices(self) -> np.ndarray:
        grids = np.meshgrid(*[np.arange(lo, hi) for lo, hi in zip(self.window_lo, self.window_hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)

    def mark(self, idx) -> int:
        rel = tuple(int(i) - lo for i, lo in zip(idx, self.window_lo))
        if any(r < 0 or r >= n for r, n in zip(rel, self.assignment.shape)):
            return 0
        return int(self.assignment[rel])

    def __eq__(self, other):
        return (isinstance(other, LatticeConfiguration) and self.basis == other.basis
                and self.window_lo == other.window_lo and np.array_equal(self.assignment, other.assignment)
                and self.palette == other.palette)


@dataclass(frozen=True)
class PoissonConfiguration:
    """Marked point set in the box window [lo, hi)."""

    window_lo: np.ndarray = field(compare=False)
    window_hi: np.ndarray = field(compare=False)
    points: np.ndarray = field(compare=False)
    marks: np.ndarray = field(compare=False)
    intensities: tuple = ()
    palette: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.window_lo, dtype=float)
        hi = np.asarray(self.window_hi, dtype=float)
        pts = np.asarray(self.points, dtype=float).reshape(-1, lo.size)
        marks = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        if pts.shape[0] != marks.size:
            raise ValueError("points and marks differ in length")
        if np.any(pts < lo) or np.any(pts >= hi):
            raise ValueError("points must lie in the window")
        if marks.size and (marks.min() < 0 or marks.max() >= len(self.palette)):
            raise ValueError("mark outside palette")
        for W in self.palette:
            if not math.isfinite(W.support_radius()):
                raise ValueError("Poisson palette potentials must be compactly supported")
        for name, v in (("window_lo", lo), ("window_hi", hi), ("points", pts), ("marks", marks)):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "palette", tuple(self.palette))
        object.__setattr__(self, "intensities", tuple(float(x) for x in self.intensities))

    @property
    def d(self) -> int:
        return self.window_lo.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.window_hi - self.window_lo))

    def counts(self) -> np.ndarray:
        return np.bincount(self.marks, minlength=len(self.palette))

    def __eq__(self, other):
        return (isinstance(other, PoissonConfiguration) and np.array_equal(self.window_lo, other.window_lo)
                and np.array_equal(self.window_hi, other.window_hi) and np.array_equal(self.points, other.points)
                and np.array_equal(self.marks, other.marks) and self.palette == other.palette)


@dataclass(frozen=True)
class FiniteConfiguration:
    """Explicit finite list of sites (exact sum, no window)."""

    points: np.ndarray = field(compare=False)
    marks: np.ndarray = field(compare=False)
    palette: tuple = ()
    basis: LatticeBasis | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        marks = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        if pts.shape[0] != marks.size:
            raise ValueError("points and marks differ in length")
        if marks.size and (marks.min() < 0 or marks.max() >= len(self.palette)):
            raise ValueError("mark outside palette")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "palette", tuple(self.palette))

    @classmethod
    def single(cls, W: SingleSitePotential, at) -> "FiniteConfiguration":
        return cls(np.atleast_2d(np.asarray(at, dtype=float)), [0], (W,))

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other):
        return (isinstance(other, FiniteConfiguration) and np.array_equal(self.points, other.points)
                and np.array_equal(self.marks, other.marks) and self.palette == other.palette)


Configuration = LatticeConfiguration | PoissonConfiguration | FiniteConfiguration


def sample_lattice_configuration(seed: int, basis: LatticeBasis, window, weights, palette) -> LatticeConfiguration:
    """I.i.d. marks from ``weights`` on the index box ``window = (lo, hi)`` (hi exclusive)."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be a nonnegative probability vector")
    if len(palette) != w.size:
        raise ValueError("palette and weights differ in length")
    lo, hi = (np.asarray(x, dtype=np.int64).reshape(basis.d) for x in window)
    shape = tuple(int(x) for x in hi - lo)
    if any(n <= 0 for n in shape):
        raise ValueError("empty window")
    rng = stream(seed, "lattice-configuration")
    marks = rng.choice(w.size, size=shape, p=w / w.sum()) if w.size > 1 else np.zeros(shape, dtype=np.int64)
    return LatticeConfiguration(basis, tuple(lo), marks, tuple(palette))


def sample_poisson_configuration(seed: int, window, intensities, palette) -> PoissonConfiguration:
    """Independent Poisson(rho_j |K|) counts per mark, uniform positions in the box K."""
    lo, hi = (np.asarray(x, dtype=float).ravel() for x in window)
    rho = np.asarray(intensities, dtype=float).ravel()
    if np.any(rho < 0):
        raise ValueError("negative intensity")
    if lo.size != hi.size or np.any(~(hi > lo)) or not np.all(np.isfinite(hi - lo)):
        raise ValueError("degenerate window")
    if len(palette) != rho.size:
        raise ValueError("palette and intensities differ in length")
    vol = float(np.prod(hi - lo))
    rng = stream(seed, "poisson-configuration")
    counts = rng.poisson(rho * vol)
    pts = lo + (hi - lo) * rng.random((int(counts.sum()), lo.size))
    # guard against rounding up to the open upper face
    pts = np.minimum(pts, np.nextafter(hi, lo))
    marks = np.repeat(np.arange(rho.size), counts)
    return PoissonConfiguration(lo, hi, pts, marks, tuple(rho), tuple(palette))


def shift_configuration(cfg: Configuration, ell) -> Configuration:
    """Action theta_l: (theta_l omega)(l') = omega(l' + l), i.e. sites move by -l."""
    ell = np.asarray(ell, dtype=float).ravel()
    if isinstance(cfg, LatticeConfiguration):
        n = cfg.basis.lattice_index(ell)
        return LatticeConfiguration(cfg.basis, tuple(int(a - b) for a, b in zip(cfg.window_lo, n)),
                                    cfg.assignment, cfg.palette)
    if isinstance(cfg, PoissonConfiguration):
        return PoissonConfiguration(cfg.window_lo - ell, cfg.window_hi - ell, cfg.points - ell, cfg.marks,
                                    cfg.intensities, cfg.palette)
    return FiniteConfiguration(cfg.points - ell, cfg.marks, cfg.palette, cfg.basis)


# --------------------------------------------------------------------------
# potential field
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldValue:
    V: float
    grad: np.ndarray
    hess: np.ndarray
    lap: float


def _lattice_tail(W: SingleSitePotential, R: float, basis: LatticeBasis) -> float:
    """Bound on sum over lattice points beyond distance R of the envelope."""
    if not math.isfinite(R):
        return 0.0
    D = basis.diameter
    d = basis.d
    vb = ball_volume(d)
    total = 0.0
    k = 0
    while True:
        a = R + k * D
        env = float(W.envelope(np.array(a)))
        if env == 0.0:
            break
        n = vb * ((a + 2 * D) ** d - max(a - D, 0.0) ** d) / basis.volume
        total += env * n
        if env * n < 1e-3 * TAIL_TARGET * 1e-6 and k > 4:
            break
        k += 1
        if k > 100000:
            return math.inf
    return total


def _choose_cutoff(W: SingleSitePotential, tail: Callable[[float], float]) -> float:
    R = W.support_radius()
    if math.isfinite(R):
        return R
    if W.kind == "quadratic" or (W.kind == "yukawa" and W.params[1] == 0.0):
        return math.inf
    R = W.length
    while tail(R) > TAIL_TARGET:
        R *= 1.25
        if R > 1e8:
            return math.inf  # slow decay: sum every site of the (finite) window

    return R


class PotentialField:
    """Evaluator for V, grad V, Hess V, Laplacian V of a configuration."""

    def __init__(self, source: Configuration, r_trunc: float | None = None):
        self.source = source
        d = source.d
        self.d = d
        palette = source.palette
        basis = None
        if isinstance(source, LatticeConfiguration):
            basis = source.basis
            live = np.array([not W.is_zero for W in palette], dtype=bool)
            mask = live[source.assignment]
            idx = np.argwhere(mask) + np.asarray(source.window_lo, dtype=np.int64)
            marks = source.assignment[mask]
            centers = basis.position(idx) if idx.size else np.zeros((0, d))
        else:
            basis = getattr(source, "basis", None)
            centers = source.points
            marks = source.marks
        if basis is None:
            basis = LatticeBasis.cubic(d)
        self.basis = basis

        # per-palette cutoffs and tail bounds
        cut = np.zeros(len(palette))
        tails = np.zeros(len(palette))
        n_sites = np.bincount(marks, minlength=len(palette)) if marks.size else np.zeros(len(palette), int)
        for j, W in enumerate(palette):
            if W.is_zero or n_sites[j] == 0:
                continue
            if isinstance(source, LatticeConfiguration):
                tail = lambda R, W=W: _lattice_tail(W, R, basis)
            else:
                tail = lambda R, W=W, n=n_sites[j]: float(n * W.envelope(np.array(R)))
            R = _choose_cutoff(W, tail) if r_trunc is None else min(float(r_trunc), W.support_radius(basis))
            if W.is_cell:
                R = W.support_radius(basis)
            cut[j] = R
            tails[j] = tail(R) if math.isfinite(R) else 0.0
        self.r_trunc = float(cut.max(initial=0.0))
        self.tail_bound = float(tails.sum())

        keep = np.array([not palette[m].is_zero for m in marks], dtype=bool) if marks.size else np.zeros(0, bool)
        centers = np.ascontiguousarray(centers[keep], dtype=float).reshape(-1, d)
        marks = marks[keep]
        n = centers.shape[0]
        kinds = np.zeros(n, np.int64)
        params = np.zeros((n, K.NPARAM))
        amps = np.zeros(n)
        lens = np.ones(n)
        cutoffs = np.zeros(n)
        tables = []
        offsets = {}
        off = 0
        for j, W in enumerate(palette):
            if W.kind == "radial-profile":
                offsets[j] = off
                tables.append(W.table_c)
                off += W.table_c.shape[0]
        for j, W in enumerate(palette):
            sel = marks == j
            if not np.any(sel):
                continue
            kinds[sel] = W.code
            p = list(W.params) + [0.0] * (K.NPARAM - len(W.params))
            if W.kind == "radial-profile":
                p[0] = float(offsets[j])
            params[sel] = p
            amps[sel] = W.amplitude
            lens[sel] = W.length
            cutoffs[sel] = cut[j]
        table = np.vstack(tables) if tables else np.zeros((1, 4))
        self.n_sites = n
        self.singular_points = centers[np.isin(kinds, [K.K_YUKAWA, K.K_FINITE])]
        self.centers = centers
        self._site_marks = marks

        finite = np.isfinite(cutoffs)
        use_grid = n >= 32 and d <= 3 and finite.sum() >= 32
        if use_grid:
            cell = float(cutoffs[finite].max())
            glo = centers[finite].min(axis=0) - cell
            span = centers[finite].max(axis=0) - glo
            dims = np.floor(span / cell).astype(np.int64) + 2
            if np.prod(dims.astype(float)) > 5e7:
                use_grid = False
        if use_grid:
            ids = np.nonzero(finite)[0]
            cidx = np.floor((centers[ids] - glo) / cell).astype(np.int64)
            lin = np.ravel_multi_index(tuple(cidx.T), tuple(dims))
            order = np.argsort(lin, kind="stable")
            items = ids[order]
            start = np.searchsorted(lin[order], np.arange(int(np.prod(dims)) + 1)).astype(np.int64)
            glob = np.nonzero(~finite)[0].astype(np.int64)
        else:
            cell, glo, dims = 1.0, np.zeros(d), np.zeros(d, np.int64)
            start = np.zeros(1, np.int64)
            items = np.zeros(0, np.int64)
            glob = np.arange(n, dtype=np.int64)
        self.fd = (centers, kinds, params, amps, lens, cutoffs,
                   np.ascontiguousarray(basis.inverse), np.ascontiguousarray(table, dtype=float),
                   np.ascontiguousarray(glo, dtype=float), float(cell), dims.astype(np.int64),
                   start, items.astype(np.int64), glob)
        self.guard = self._faithful_region(cut)

    # region where truncation to the window is exact
    def _faithful_region(self, cut):
        src = self.source
        if isinstance(src, FiniteConfiguration):
            return None
        if isinstance(src, LatticeConfiguration):
            B = src.basis
            lo = np.array(src.window_lo, dtype=float)
            hi = np.array(src.window_hi, dtype=float)
            m_lo, m_hi = 0.0, 0.0
            rad_b = np.linalg.norm(B.inverse, axis=1)  # |x_k| <= R * |row_k|
            for j, W in enumerate(src.palette):
                if W.is_zero:
                    continue
                if W.is_cell:
                    m_lo, m_hi = max(m_lo, 0.25 * W.length), max(m_hi, 0.25 * W.length)
                else:
                    r = float(np.max(rad_b)) * cut[j]
                    m_lo, m_hi = max(m_lo, r), max(m_hi, r + 1.0)
            if not (math.isfinite(m_lo) and math.isfinite(m_hi)):
                return (B.inverse, lo + np.inf, hi - np.inf)
            return (B.inverse, lo + m_lo, hi - m_hi)
        R = max((W.support_radius() for W in src.palette if not W.is_zero), default=0.0)
        return (np.eye(self.d), src.window_lo + R, src.window_hi - R)

    def in_faithful_region(self, q, margin: float = 0.0) -> bool:
        if self.guard is None:
            return True
        binv, lo, hi = self.guard
        x = binv @ np.asarray(q, dtype=float)
        m = margin * np.linalg.norm(binv, axis=1)
        return bool(np.all(x >= lo + m) and np.all(x <= hi - m))

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, q) -> FieldValue:
        q = np.ascontiguousarray(np.asarray(q, dtype=float).reshape(self.d))
        if not np.all(np.isfinite(q)):
            raise ValueError("non-finite evaluation point")
        V, g, H, st = K.field_eval(q, self.fd, True)
        if st == K.ST_SINGULAR:
            raise SingularPointError(f"field evaluated at a singular point {q.tolist()}")
        return FieldValue(V, g, H, float(np.trace(H)))

    def value(self, q) -> float:
        q = np.ascontiguousarray(np.asarray(q, dtype=float).reshape(self.d))
        V, _, _, st = K.field_eval(q, self.fd, False)
        if st == K.ST_SINGULAR:
            raise SingularPointError(f"field evaluated at a singular point {q.tolist()}")
        return V

    def gradient(self, q) -> np.ndarray:
        q = np.ascontiguousarray(np.asarray(q, dtype=float).reshape(self.d))
        _, g, _, st = K.field_eval(q, self.fd, False)
        if st == K.ST_SINGULAR:
            raise SingularPointError(f"field evaluated at a singular point {q.tolist()}")
        return g

    def evaluate_many(self, Q, hessian: bool = False):
        """Vectorized evaluation; returns (V, grad, hess, singular_mask)."""
        Q = np.ascontiguousarray(np.asarray(Q, dtype=float).reshape(-1, self.d))
        V, G, H, S = K.field_eval_many(Q, self.fd, hessian)
        return V, G, H, S != K.ST_OK

    def values(self, Q) -> np.ndarray:
        V, _, _, sing = self.evaluate_many(Q)
        if np.any(sing):
            raise SingularPointError("field evaluated at a singular point")
        return V

    def __call__(self, q) -> float:
        return self.value(q)

    def __repr__(self):
        return f"PotentialField(d={self.d}, sites={self.n_sites}, r_trunc={self.r_trunc:.6g}, tail={self.tail_bound:.3g})"


def evaluate_field(field: PotentialField, q):
    """(V, grad V, Hess V, Laplacian V) at q."""
    fv = field.evaluate(q)
    return fv.V, fv.grad, fv.hess, fv.lap


def zero_field(d: int) -> PotentialField:
    return PotentialField(FiniteConfiguration(np.zeros((0, d)), [], ()))


def single_site_field(W: SingleSitePotential, at, basis: LatticeBasis | None = None) -> PotentialField:
    at = np.atleast_1d(np.asarray(at, dtype=float))
    return PotentialField(FiniteConfiguration(at.reshape(1, -1), [0], (W,), basis))


def superpose(*cfgs: FiniteConfiguration) -> FiniteConfiguration:
    """Union of finite site lists (palettes concatenated)."""
    pts, marks, pal = [], [], []
    basis = None
    for c in cfgs:
        pts.append(c.points)
        marks.append(c.marks + len(pal))
        pal.extend(c.palette)
        basis = basis or c.basis
    return FiniteConfiguration(np.vstack(pts), np.concatenate(marks), tuple(pal), basis)


def as_finite(cfg: Configuration) -> FiniteConfiguration:
    """Explicit site list of a windowed configuration (window semantics dropped)."""
    if isinstance(cfg, FiniteConfiguration):
        return cfg
    if isinstance(cfg, LatticeConfiguration):
        return FiniteConfiguration(cfg.basis.position(cfg.indices()), cfg.assignment.ravel(), cfg.palette, cfg.basis)
    return FiniteConfiguration(cfg.points.reshape(-1, cfg.d), cfg.marks, cfg.palette)


@dataclass(frozen=True)
class RangeEstimate:
    v_min: float
    v_max: float
    argmin: np.ndarray
    argmax: np.ndarray
    n_points: int
    excluded: int


def estimate_range(field: PotentialField, lo, hi, n: int | Sequence[int] = 64,
                   exclusion_radius: float = 0.0) -> RangeEstimate:
    """Min/max of V over the half-open grid lo + (hi-lo) i/n, i = 0..n-1.

    Refining n -> 2n contains the previous grid, so the estimates are monotone.
    Grid points within ``exclusion_radius`` of a singular site are excluded.
    """
    lo = np.asarray(lo, dtype=float).reshape(field.d)
    hi = np.asarray(hi, dtype=float).reshape(field.d)
    ns = np.broadcast_to(np.asarray(n, dtype=int), (field.d,))
    axes = [lo[k] + (hi[k] - lo[k]) * np.arange(ns[k]) / ns[k] for k in range(field.d)]
    Q = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    mask = np.ones(len(Q), bool)
    if len(field.singular_points) and exclusion_radius >= 0:
        for s in field.singular_points:
            mask &= np.linalg.norm(Q - s, axis=1) > exclusion_radius
    V, _, _, sing = field.evaluate_many(Q[mask])
    good = ~sing
    Qm, V = Q[mask][good], V[good]
    excluded = int(len(Q) - len(V))
    if V.size == 0:
        raise ValueError("no admissible grid points")
    i, j = int(np.argmin(V)), int(np.argmax(V))
    return RangeEstimate(float(V[i]), float(V[j]), Qm[i], Qm[j], int(len(Q)), excluded)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _palette_lines(palette) -> list[str]:
    out = []
    for j, W in enumerate(palette):
        rec = [f"# palette {j} kind={W.kind}", "amplitude=" + _fmt(W.amplitude), "length=" + _fmt(W.length),
               "params=" + ",".join(_fmt(p) for p in W.params)]
        if W.kind == "radial-profile":
            c = W.table_c[-1]
            h = float(W.table_r[-1] - W.table_r[-2])
            sp_vals = W.table_c[:, 0].tolist() + [c[0] + h * (c[1] + h * (c[2] + h * c[3]))]
            rec.append("knots=" + ",".join(_fmt(v) for v in W.table_r))
            rec.append("values=" + ",".join(_fmt(v) for v in sp_vals))
        out.append(" ".join(rec))
    return out


def dumps_configuration(cfg: Configuration) -> str:
    """Line-oriented text form: header, ``#`` metadata lines, one record per site."""
    if isinstance(cfg, LatticeConfiguration):
        lines = [f"randpot-config v1 kind=lattice d={cfg.d}",
                 "# basis " + " ".join(_fmt(x) for x in cfg.basis.vectors.ravel()),
                 "# window " + " ".join(str(x) for x in cfg.window_lo) + " " + " ".join(str(x) for x in cfg.window_hi)]
        lines += _palette_lines(cfg.palette)
        for idx, m in zip(cfg.indices(), cfg.assignment.ravel()):
            lines.append(" ".join(str(int(i)) for i in idx) + f" {int(m)}")
    else:
        fin = isinstance(cfg, FiniteConfiguration)
        lines = [f"randpot-config v1 kind=poisson d={cfg.d}"]
        if fin and cfg.basis is not None:
            lines.append("# basis " + " ".join(_fmt(x) for x in cfg.basis.vectors.ravel()))
        if not fin:
            lines.append("# window " + " ".join(_fmt(x) for x in cfg.window_lo) + " "
                         + " ".join(_fmt(x) for x in cfg.window_hi))
            lines.append("# intensities " + " ".join(_fmt(x) for x in cfg.intensities))
        lines += _palette_lines(cfg.palette)
        for p, m in zip(cfg.points, cfg.marks):
            lines.append(f"{int(m)} " + " ".join(_fmt(x) for x in p))
    return "\n".join(lines) + "\n"


def _parse_palette(line: str) -> tuple[int, SingleSitePotential]:
    toks = line[1:].split()
    j = int(toks[1])
    kv = dict(t.split("=", 1) for t in toks[2:])
    kind = kv["kind"]
    fl = lambda s: tuple(float(x) for x in s.split(",") if x)
    if kind == "radial-profile":
        r = np.array(fl(kv["knots"]))
        W = SingleSitePotential.radial_profile(r, np.array(fl(kv["values"])))
        W = replace(W, amplitude=float(kv["amplitude"]), length=float(kv["length"]))
    else:
        W = SingleSitePotential(kind, fl(kv.get("params", "")), float(kv["amplitude"]), float(kv["length"]))
    return j, W


def loads_configuration(text: str) -> Configuration:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["randpot-config", "v1"]:
        raise ValueError("not a randpot-config v1 file")
    kv = dict(t.split("=", 1) for t in head[2:])
    kind, d = kv["kind"], int(kv["d"])
    basis, window, inten = None, None, None
    palette = {}
    recs = []
    for ln in lines[1:]:
        if ln.startswith("#"):
            t = ln[1:].split()
            if t[0] == "basis":
                basis = LatticeBasis(np.array([float(x) for x in t[1:]]).reshape(d, d))
            elif t[0] == "window":
                window = t[1:]
            elif t[0] == "intensities":
                inten = tuple(float(x) for x in t[1:])
            elif t[0] == "palette":
                j, W = _parse_palette(ln)
                palette[j] = W
            continue
        recs.append(ln.split())
    pal = tuple(palette[j] for j in range(len(palette)))
    if kind == "lattice":
        lo = np.array([int(x) for x in window[:d]])
        hi = np.array([int(x) for x in window[d:]])
        assign = np.zeros(tuple(hi - lo), np.int64)
        for r in recs:
            idx = tuple(int(x) - l for x, l in zip(r[:d], lo))
            assign[idx] = int(r[d])
        return LatticeConfiguration(basis or LatticeBasis.cubic(d), tuple(lo), assign, pal)
    pts = np.array([[float(x) for x in r[1:]] for r in recs]).reshape(-1, d)
    marks = np.array([int(r[0]) for r in recs], dtype=np.int64)
    if window is None:
        return FiniteConfiguration(pts, marks, pal, basis)
    w = np.array([float(x) for x in window])
    return PoissonConfiguration(w[:d], w[d:], pts, marks, inten or (), pal)


def save_configuration(cfg: Configuration, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_configuration(cfg))


def load_configuration(path) -> Configuration:
    with open(path, encoding="utf-8") as fh:
        return loads_configuration(fh.read())
