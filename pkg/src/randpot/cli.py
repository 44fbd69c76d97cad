"""Experiment harness: ``randpot <subcommand> --config FILE [--set k=v ...]``.

Every run writes its data artifacts (CSV files, ``summary.csv`` and, for
``construct``, a configuration file plus ``report.txt``) and a
``manifest.txt`` holding the config echo, library versions, wall time and
task failures.  Data artifacts depend only on the effective configuration
and seed; timestamps and worker counts appear only in the manifest.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import platform
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .parallel import TaskFailure, failures, parallel_map  # noqa: F401  (re-exported)
from .rng import derive_seed, stream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

COMMANDS = ("simulate", "velocity-dist", "oracle1d", "curvature-map", "coulomb-sim", "shoot", "construct",
            "liouville", "recurrence")


class ConfigError(ValueError):
    def __init__(self, msg: str, where: str = "", line: int | None = None, col: int | None = None):
        self.msg, self.where, self.line, self.col = msg, where, line, col
        loc = where
        if line is not None:
            loc += f":{line}:{col or 1}"
        super().__init__(f"{loc}: {msg}" if loc else msg)


class VerificationFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# schema
# --------------------------------------------------------------------------

_SITE_KEYS = {"kind": "str", "height": "float", "sigma": "float", "radius": "float", "center_radius": "float",
              "order": "float", "amplitude": "float", "c": "float", "mu": "float", "lam": "float", "eta": "int",
              "sign": "float", "k": "float", "scale_amplitude": "float", "scale_length": "float",
              "position": "floats"}

_COMMON = {
    "run": {"seed": "u64", "description": "str"},
    "field": {"kind": "str", "d": "int", "spacing": "float", "basis": "floats", "window_lo": "floats",
              "window_hi": "floats", "weights": "floats", "intensities": "floats", "palette": "strs",
              "points": "floats", "marks": "ints", "file": "str", "r_trunc": "float"},
    "dynamics": {"h": "float", "T": "float", "stride": "int", "r_esc": "float", "margin": "float",
                 "guard": "bool"},
    "initial": {"q": "floats", "p": "floats", "E": "float", "direction": "floats"},
}

_SPECIFIC = {
    "simulate": {"checks": {"velocity": "bool", "reversibility_T": "float", "reference": "str",
                            "shift_count": "int", "shift_T": "float", "shift_range": "int",
                            "shift_box": "float"}},
    "velocity-dist": {"stats": {"n_configs": "int", "per_config": "int", "T": "float", "n": "float",
                                "E_max": "float", "E_min": "float", "e_bins": "int", "v_bins": "int",
                                "gap_tol": "float", "strict": "bool", "chunk": "int"}},
    "oracle1d": {"oracle": {"mode": "str", "E": "float", "potential": "str", "amplitude": "float",
                            "period": "float", "n_energies": "int", "E_lo": "float", "E_hi": "float",
                            "sign": "float"}},
    "curvature-map": {"curvature": {"E": "float", "lo": "floats", "hi": "floats", "n": "int",
                                    "exclusion": "float", "normalized": "bool", "map": "bool",
                                    "probes": "int", "brioschi_h": "float", "threshold": "bool",
                                    "threshold_n": "int", "E_max": "float", "n_scan": "int"}},
    "coulomb-sim": {"coulomb": {"sites": "strs", "r_sw": "float", "ds": "float", "collision_tol": "float"},
                    "checks": {"reversibility_T": "float", "monodromy_loops": "int", "loop_box": "float",
                               "loop_radius": "floats", "loop_zeros": "int"}},
    "shoot": {"coulomb": {"sites": "strs", "r_sw": "float", "ds": "float", "collision_tol": "float"},
              "shoot": {"E": "float", "a": "int", "b": "int", "bracket": "floats", "bracket_axial": "floats",
                        "T_max": "float", "tol": "float", "h": "float"}},
    "construct": {"construct": {"kind": "str", "site": "str", "E": "float", "k": "int", "eps": "float",
                                "eps_list": "floats", "ring_width": "float", "height_factor": "float",
                                "n_orbits": "int", "T": "float", "h": "float", "max_retries": "int",
                                "r_center": "float", "half_width": "float", "height": "float",
                                "power": "int", "n_probe": "int",
                                "r": "float", "ell": "float", "u0": "float", "periods": "float",
                                "floquet_h": "float", "unit_tol": "float", "radius_tol": "float",
                                "A1": "float", "R1": "float", "R2": "float", "R": "float", "sag": "bool",
                                "E_factor": "float", "control_factor": "float", "min_bounces": "int",
                                "d": "int", "window_lo": "ints", "window_hi": "ints", "q0": "floats",
                                "T_list": "floats", "ratio_min": "float"}},
    "liouville": {"liouville": {"mode": "str", "E": "float", "n_samples": "int", "constant": "float",
                                "window_lo": "floats", "window_hi": "floats", "intensities": "floats",
                                "palette": "strs", "draws": "int", "origin": "floats"}},
    "recurrence": {"recurrence": {"lo": "floats", "hi": "floats", "min_gap": "float", "torus": "bool"}},
}


def _schema(command: str, section: str):
    if section.startswith("site."):
        return _SITE_KEYS
    return _COMMON.get(section) or _SPECIFIC[command].get(section)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

_SEC_RE = re.compile(r"^\s*\[([^\]]*)\]")
_KEY_RE = re.compile(r"^(\s*)([^=:#;\s][^=:]*?)\s*([=:])\s*")


@dataclass
class _Entry:
    raw: str
    where: str
    line: int | None
    col: int | None  # value column
    key_col: int | None = None


def _positions(text: str) -> tuple[dict, dict]:
    """Line scan: (section, key) -> (line, key col, value col) and section -> header line."""
    pos, heads = {}, {}
    sec = None
    for i, ln in enumerate(text.splitlines(), 1):
        m = _SEC_RE.match(ln)
        if m:
            sec = m.group(1).strip()
            heads.setdefault(sec, i)
            continue
        if sec is None or not ln.strip() or ln.lstrip()[0] in "#;" or ln[:1].isspace():
            continue
        m = _KEY_RE.match(ln)
        if m:
            pos[(sec, m.group(2).strip())] = (i, len(m.group(1)) + 1, m.end() + 1)
    return pos, heads


def parse_config_text(text: str, where: str = "<config>") -> tuple[dict[str, dict[str, _Entry]], dict]:
    """Sections of raw entries (with positions) and the line of each section header."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False,
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"),
                                   default_section="\x00default")
    cp.optionxform = str
    try:
        cp.read_string(text, source=where)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any [section]", where, e.lineno, 1) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        what = f"duplicate key '{e.option}' in [{e.section}]" if hasattr(e, "option") else \
            f"duplicate section [{e.section}]"
        raise ConfigError(what, where, e.lineno, 1) from None
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"cannot parse line {line.strip()!r} (expected 'key = value' or '[section]')",
                          where, lineno, 1) from None
    except configparser.Error as e:
        raise ConfigError(str(e), where) from None
    pos, heads = _positions(text)
    out: dict[str, dict[str, _Entry]] = {}
    for sec in cp.sections():
        out[sec] = {}
        for key, val in cp.items(sec, raw=True):
            ln, kcol, vcol = pos.get((sec, key), (None, None, None))
            out[sec][key] = _Entry(val.strip(), where, ln, vcol, kcol)
    return out, {k: (where, v) for k, v in heads.items()}


def _convert(kind: str, e: _Entry, key: str):
    def fail(msg):
        raise ConfigError(f"{key}: {msg}", e.where, e.line, e.col)

    s = e.raw
    try:
        if kind == "str":
            if not s:
                fail("empty value")
            return s
        if kind == "float":
            v = float(s)
            if not math.isfinite(v):
                fail(f"non-finite number {s!r}")
            return v
        if kind in ("int", "u64"):
            v = int(s, 0)
            if kind == "u64" and not 0 <= v < 2 ** 64:
                fail(f"seed {s!r} is not an unsigned 64-bit integer")
            return v
        if kind == "bool":
            low = s.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            fail(f"expected true/false, got {s!r}")
        parts = [x.strip() for x in s.split(",")]
        if any(not x for x in parts):
            fail("empty array element")
        if kind == "floats":
            vals = [float(x) for x in parts]
            if not all(math.isfinite(v) for v in vals):
                fail("non-finite array element")
            return tuple(vals)
        if kind == "ints":
            return tuple(int(x, 0) for x in parts)
        if kind == "strs":
            return tuple(parts)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        fail(f"cannot read {s!r} as {kind}")
    raise AssertionError(kind)


@dataclass
class ExperimentConfig:
    command: str
    seed: int
    sections: dict
    echo: str
    out: Path
    workers: int = 1
    base_dir: Path = field(default_factory=Path.cwd)

    def has(self, section: str) -> bool:
        return section in self.sections

    def sec(self, section: str) -> dict:
        return self.sections.get(section, {})

    def get(self, section: str, key: str, default=None, required: bool = False):
        s = self.sections.get(section, {})
        if key in s:
            return s[key]
        if required:
            raise ConfigError(f"missing required key '{key}' in [{section}]")
        return default


def load_config(command: str, path: str | None, overrides=(), seed: int | None = None, out=None,
                workers: int = 1) -> ExperimentConfig:
    """Parse, apply overrides, validate every key against the schema, resolve references."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown subcommand {command!r}")
    raw: dict[str, dict[str, _Entry]] = {}
    heads: dict = {}
    text = ""
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}", str(p)) from None
        raw, heads = parse_config_text(text, str(p))
        base = p.resolve().parent
    for i, ov in enumerate(overrides):
        where = f"--set[{i + 1}]"
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value", where, 1, 1)
        k, v = ov.split("=", 1)
        k = k.strip()
        if "." not in k:
            raise ConfigError(f"override key {k!r} must be section.key", where, 1, 1)
        sec, key = k.rsplit(".", 1)
        raw.setdefault(sec, {})[key] = _Entry(v.strip(), where, 1, len(k) + 2, 1)
        heads.setdefault(sec, (where, 1))
    typed: dict[str, dict] = {}
    for sec, entries in raw.items():
        schema = _schema(command, sec)
        if schema is None:
            w, ln = heads.get(sec, ("", None))
            raise ConfigError(f"unknown section [{sec}] for '{command}'", w, ln, 1)
        typed[sec] = {}
        for key, e in entries.items():
            if key not in schema:
                raise ConfigError(f"unknown key '{key}' in [{sec}]", e.where, e.line, e.key_col)
            typed[sec][key] = _convert(schema[key], e, key)
    if seed is None:
        seed = typed.get("run", {}).get("seed")
    if seed is None:
        raise ConfigError("no seed: set [run] seed or pass --seed (no implicit entropy)")
    if not 0 <= int(seed) < 2 ** 64:
        raise ConfigError(f"seed {seed} is not an unsigned 64-bit integer")
    typed.setdefault("run", {})["seed"] = int(seed)
    # palette references
    for sec in ("field", "coulomb", "liouville"):
        for key in ("palette", "sites"):
            for name in typed.get(sec, {}).get(key, ()):
                if f"site.{name}" not in typed:
                    e = raw[sec][key]
                    raise ConfigError(f"{key} references undefined [site.{name}]", e.where, e.line, e.col)
    site = typed.get("construct", {}).get("site")
    if site is not None and f"site.{site}" not in typed:
        e = raw["construct"]["site"]
        raise ConfigError(f"site references undefined [site.{site}]", e.where, e.line, e.col)
    echo = _echo(typed)
    return ExperimentConfig(command, int(seed), typed, echo, Path(out) if out else Path("out"), workers, base)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (tuple, list, np.ndarray)):
        return ",".join(_fmt(v) for v in x)
    return str(x)


def _echo(typed: dict) -> str:
    lines = []
    for sec in sorted(typed):
        lines.append(f"[{sec}]")
        for k in sorted(typed[sec]):
            lines.append(f"{k} = {_fmt(typed[sec][k])}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_site(cfg: ExperimentConfig, name: str):
    from .randfield import SingleSitePotential as S

    s = cfg.sec(f"site.{name}")
    kind = s.get("kind")
    g = lambda k, d: s.get(k, d)
    if kind == "zero":
        W = S.zero()
    elif kind == "gaussian":
        W = S.gaussian(g("height", 1.0), g("sigma", 1.0))
    elif kind == "bump":
        W = S.bump(g("height", 1.0), g("radius", 1.0), g("center_radius", 0.0), g("order", 4.0))
    elif kind == "smoothed-indicator":
        W = S.smoothed_indicator(g("height", 1.0))
    elif kind == "cosine":
        W = S.cosine(g("amplitude", 1.0))
    elif kind == "yukawa":
        W = S.yukawa(g("c", 1.0), g("mu", 1.0))
    elif kind == "finite-range":
        W = S.finite_range(g("c", 1.0), g("lam", 1.0), g("eta", 3), g("sign", 1.0))
    elif kind == "quadratic":
        W = S.quadratic(g("k", 1.0))
    else:
        raise ConfigError(f"[site.{name}] unknown kind {kind!r}")
    if "scale_amplitude" in s or "scale_length" in s:
        W = W.with_scaling(g("scale_amplitude", 1.0), g("scale_length", 1.0))
    return W


def _basis(cfg: ExperimentConfig, d: int):
    from .randfield import LatticeBasis

    f = cfg.sec("field")
    if "basis" in f:
        b = np.asarray(f["basis"], float)
        if b.size != d * d:
            raise ConfigError(f"[field] basis needs {d * d} numbers")
        return LatticeBasis(b.reshape(d, d))
    return LatticeBasis.cubic(d, f.get("spacing", 1.0))


def _palette(cfg: ExperimentConfig, section: str = "field"):
    names = cfg.get(section, "palette", required=True)
    return tuple(build_site(cfg, n) for n in names)


def build_configuration(cfg: ExperimentConfig, seed_tag: str = "field"):
    """Configuration described by [field], or None for kind = zero / missing section."""
    from .randfield import FiniteConfiguration, load_configuration, sample_lattice_configuration, \
        sample_poisson_configuration

    if not cfg.has("field"):
        return None
    f = cfg.sec("field")
    kind = cfg.get("field", "kind", required=True)
    seed = derive_seed(cfg.seed, seed_tag)
    if kind == "zero":
        return None
    if kind == "file":
        p = Path(cfg.get("field", "file", required=True))
        return load_configuration(p if p.is_absolute() else cfg.base_dir / p)
    d = cfg.get("field", "d", required=True)
    if kind == "lattice":
        lo = tuple(int(x) for x in cfg.get("field", "window_lo", required=True))
        hi = tuple(int(x) for x in cfg.get("field", "window_hi", required=True))
        pal = _palette(cfg)
        w = f.get("weights", (1.0,) * len(pal) if len(pal) == 1 else None)
        if w is None:
            raise ConfigError("[field] weights required for a lattice palette with several marks")
        return sample_lattice_configuration(seed, _basis(cfg, d), (lo, hi), np.asarray(w) / np.sum(w), pal)
    if kind == "poisson":
        lo = cfg.get("field", "window_lo", required=True)
        hi = cfg.get("field", "window_hi", required=True)
        return sample_poisson_configuration(seed, (lo, hi), cfg.get("field", "intensities", required=True),
                                            _palette(cfg))
    if kind == "finite":
        pts = np.asarray(cfg.get("field", "points", required=True), float).reshape(-1, d)
        marks = f.get("marks", (0,) * len(pts))
        return FiniteConfiguration(pts, marks, _palette(cfg), _basis(cfg, d) if "basis" in f or "spacing" in f
                                   else None)
    raise ConfigError(f"[field] unknown kind {kind!r}")


def build_field(cfg: ExperimentConfig):
    from .randfield import PotentialField, zero_field

    c = build_configuration(cfg)
    if c is None:
        return zero_field(cfg.get("field", "d", 1)), None
    return PotentialField(c, cfg.get("field", "r_trunc")), c


def integrator_spec(cfg: ExperimentConfig, **defaults):
    from .dynamics import IntegratorSpec

    s = dict(defaults)
    s.update({k: v for k, v in cfg.sec("dynamics").items() if k != "T"})
    return IntegratorSpec(**s)


def initial_state(cfg: ExperimentConfig, fld):
    from .dynamics import PhaseState

    d = fld.d
    q = np.asarray(cfg.get("initial", "q", (0.0,) * d), float)
    if q.size != d:
        raise ConfigError(f"[initial] q needs {d} components")
    if cfg.get("initial", "E") is not None:
        E = cfg.get("initial", "E")
        u = np.asarray(cfg.get("initial", "direction", (1.0,) + (0.0,) * (d - 1)), float)
        if u.size != d or not np.linalg.norm(u) > 0:
            raise ConfigError(f"[initial] direction needs {d} components, not all zero")
        V = fld.value(q)
        if E < V:
            raise ConfigError(f"[initial] E={E} lies below V(q0)={V}")
        p = math.sqrt(2 * (E - V)) * u / np.linalg.norm(u)
    else:
        p = np.asarray(cfg.get("initial", "p", (0.0,) * d), float)
    if p.size != d:
        raise ConfigError(f"[initial] p needs {d} components")
    return PhaseState(0.0, q, p)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

class Run:
    """Collects artifacts and summary values for one subcommand execution."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.out.mkdir(parents=True, exist_ok=True)
        self.summary: list[tuple[str, object]] = []
        self.files: list[str] = []
        self.task_failures: list[TaskFailure] = []
        self.stdout_lines: list[str] = []

    def put(self, key: str, value) -> None:
        self.summary.append((key, value))

    def write_csv(self, name: str, header, rows) -> None:
        with open(self.out / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")
        self.files.append(name)

    def write_text(self, name: str, text: str) -> None:
        with open(self.out / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.files.append(name)

    def adopt(self, name: str) -> None:
        self.files.append(name)

    def finish(self, status: int, wall: float, error: str = "") -> None:
        if self.summary:
            self.write_csv("summary.csv", ["key", "value"], self.summary)
        lines = [f"randpot-manifest v1", f"command={self.cfg.command}", f"seed={self.cfg.seed}",
                 f"workers={self.cfg.workers}", f"status={status}", f"wall_time_s={wall:.6f}",
                 f"started={time.strftime('%Y-%m-%dT%H:%M:%S%z', time.localtime(time.time() - wall))}",
                 f"randpot={__version__}", f"python={platform.python_version()}", f"numpy={np.__version__}"]
        for mod in ("scipy", "numba"):
            try:
                lines.append(f"{mod}={__import__(mod).__version__}")
            except ImportError:  # pragma: no cover
                lines.append(f"{mod}=missing")
        if error:
            lines.append(f"error={error}")
        lines.append(f"task_failures={len(self.task_failures)}")
        for f in self.task_failures:
            lines.append(f"task_failure index={f.index} error={f.error}")
        for name in self.files:
            h = hashlib.sha256((self.out / name).read_bytes()).hexdigest()
            lines.append(f"artifact {name} sha256={h}")
        lines.append("--- config ---")
        lines.append(self.cfg.echo.rstrip("\n"))
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _traj_rows(tr, extra=()):
    d = tr.q.shape[1]
    for k in range(len(tr.t)):
        yield [tr.t[k], *tr.q[k], *tr.p[k], tr.E[k], *(e[k] for e in extra)]


def _traj_header(d, extra=()):
    return ["t"] + [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)] + ["E"] + list(extra)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(run: Run) -> None:
    from .dynamics import (asymptotic_velocity, integrate, reversibility_error, shift_commutation_error,
                           PhaseState)
    from .oracle1d import linear_flow_reference

    cfg = run.cfg
    fld, conf = build_field(cfg)
    x0 = initial_state(cfg, fld)
    T = cfg.get("dynamics", "T", required=True)
    spec = integrator_spec(cfg)
    tr = integrate(fld, x0, T, spec)
    run.write_csv("trajectory.csv", _traj_header(fld.d), _traj_rows(tr))
    run.put("E0", tr.E0)
    run.put("max_drift", tr.max_drift)
    run.put("rel_drift", tr.rel_drift)
    run.put("reason", tr.reason)
    run.put("steps", tr.steps)
    run.put("h_used", tr.h)
    run.put("t_final", tr.t[-1])
    chk = cfg.sec("checks")
    ref = chk.get("reference", "none")
    if ref == "free":
        qref = x0.q + np.outer(tr.t, x0.p)
        err = max(float(np.max(np.abs(tr.q - qref))), float(np.max(np.abs(tr.p - x0.p))))
        run.put("reference_max_error", err)
    elif ref == "linear-flow":
        errs = []
        for k in range(len(tr.t)):
            r = linear_flow_reference(tr.t[k], x0)
            errs.append(max(float(np.max(np.abs(tr.q[k] - r.q))), float(np.max(np.abs(tr.p[k] - r.p)))))
        run.put("reference_max_error", max(errs))
        run.put("reference_final_error", errs[-1])
    elif ref != "none":
        raise ConfigError(f"[checks] unknown reference {ref!r} (none | free | linear-flow)")
    if chk.get("velocity", False):
        ve = asymptotic_velocity(fld, x0, T, spec)
        run.put("velocity", tuple(ve.v))
        run.put("velocity_gap", ve.gap)
        run.put("velocity_reliable", ve.reliable)
    if "reversibility_T" in chk:
        run.put("reversibility_T", chk["reversibility_T"])
        run.put("reversibility_error", reversibility_error(fld, x0, chk["reversibility_T"], spec))
    if chk.get("shift_count", 0) > 0:
        if conf is None:
            raise ConfigError("[checks] shift checks need a [field] configuration")
        basis = getattr(conf, "basis", None) or _basis(cfg, fld.d)
        R = chk.get("shift_range", 5)
        box = chk.get("shift_box", 2.0)
        Ts = chk.get("shift_T", 10.0)
        rows = []
        for i in range(chk["shift_count"]):
            rng = stream(cfg.seed, "shift-check", i)
            ell = basis.matrix @ rng.integers(-R, R + 1, fld.d)
            q = rng.uniform(-box, box, fld.d)
            p = rng.normal(size=fld.d)
            err = shift_commutation_error(conf, PhaseState(0.0, q, p), ell, Ts, spec.h)
            rows.append([i, *ell, *q, *p, err])
        run.write_csv("shift_checks.csv", ["i"] + [f"l{k + 1}" for k in range(fld.d)]
                      + [f"q{k + 1}" for k in range(fld.d)] + [f"p{k + 1}" for k in range(fld.d)] + ["error"], rows)
        run.put("shift_count", len(rows))
        run.put("shift_max_error", max(r[-1] for r in rows))


def cmd_velocity_dist(run: Run) -> None:
    from .stats import (EnsembleSpec, LatticeFieldSampler, PoissonFieldSampler, energy_velocity_distribution,
                        inversion_symmetry_test)

    cfg = run.cfg
    kind = cfg.get("field", "kind", required=True)
    d = cfg.get("field", "d", required=True)
    pal = _palette(cfg)
    if kind == "lattice":
        lo = tuple(int(x) for x in cfg.get("field", "window_lo", required=True))
        hi = tuple(int(x) for x in cfg.get("field", "window_hi", required=True))
        w = np.asarray(cfg.get("field", "weights", required=True), float)
        sampler = LatticeFieldSampler(_basis(cfg, d), (lo, hi), tuple(w / w.sum()), pal)
    elif kind == "poisson":
        sampler = PoissonFieldSampler((cfg.get("field", "window_lo", required=True),
                                       cfg.get("field", "window_hi", required=True)),
                                      cfg.get("field", "intensities", required=True), pal)
    else:
        raise ConfigError("velocity-dist needs [field] kind = lattice | poisson")
    st = dict(cfg.sec("stats"))
    ispec = integrator_spec(cfg, h=1e-2)
    spec = EnsembleSpec(integrator=ispec, **st)
    hist = energy_velocity_distribution(sampler, spec, cfg.seed, _basis(cfg, d), workers=cfg.workers)
    hist.to_csv(run.out / "histogram.csv")
    run.adopt("histogram.csv")
    sym = inversion_symmetry_test(hist)
    run.put("n_samples", hist.n_samples)
    run.put("flagged", int(hist.flagged.sum()))
    run.put("clipped", hist.clipped)
    run.put("attempts", hist.attempts)
    run.put("tv_distance", sym.distance)
    run.put("tv_threshold", sym.threshold)
    run.put("symmetric", sym.passed)


def cmd_oracle1d(run: Run) -> None:
    from .dynamics import PhaseState, asymptotic_velocity
    from .oracle1d import (PeriodicCell1D, drift_velocity_1d, expected_drift_over_measure, pendulum_drift)
    from .dynamics import integrate

    cfg = run.cfg
    o = cfg.sec("oracle")
    mode = o.get("mode", "drift")
    amp = o.get("amplitude", 1.0)
    period = o.get("period", 1.0)
    sign = o.get("sign", 1.0)

    def cell_for(pot):
        if pot == "cosine":
            return PeriodicCell1D.cosine(amp, period)
        if pot == "constant":
            return PeriodicCell1D.constant(amp, period)
        raise ConfigError(f"[oracle] unknown potential {pot!r} (cosine | constant)")

    def closed_form(pot, E):
        if pot == "cosine" and amp == 1.0 and period == 1.0:
            return pendulum_drift(E)
        if pot == "cosine":
            # V = -a cos(2 pi q / L): rescale energy by a and length by L
            return period * math.sqrt(amp) * pendulum_drift(E / amp)
        return math.sqrt(2 * (E - amp))

    if mode == "drift":
        E = cfg.get("oracle", "E", required=True)
        pot = o.get("potential", "cosine")
        vq = drift_velocity_1d(cell_for(pot), E, sign)
        vc = math.copysign(closed_form(pot, E), sign)
        rel = abs(vq - vc) / abs(vc)
        run.write_csv("oracle.csv", ["E", "v_quadrature", "v_closed_form", "rel_err"], [[E, vq, vc, rel]])
        run.put("E", E)
        run.put("v_quadrature", vq)
        run.put("v_closed_form", vc)
        run.put("rel_err", rel)
        run.stdout_lines.append(f"E={_fmt(E)} potential={pot} v_quadrature={_fmt(vq)} "
                                f"v_closed_form={_fmt(vc)} rel_err={_fmt(rel)}")
    elif mode == "identity-sweep":
        pot = o.get("potential", "cosine")
        n = o.get("n_energies", 20)
        rng = stream(cfg.seed, "oracle-energies")
        Es = rng.uniform(o.get("E_lo", 1.01), o.get("E_hi", 50.0), n)
        rows = []
        for E in Es:
            vq = drift_velocity_1d(cell_for(pot), E)
            vc = closed_form(pot, E)
            rows.append([E, vq, vc, abs(vq - vc) / abs(vc)])
        run.write_csv("oracle.csv", ["E", "v_quadrature", "v_closed_form", "rel_err"], rows)
        run.put("n_energies", n)
        run.put("max_rel_err", max(r[3] for r in rows))
    elif mode == "simulate":
        fld, conf = build_field(cfg)
        if fld.d != 1:
            raise ConfigError("oracle1d simulate needs a d = 1 field")
        E = cfg.get("oracle", "E", required=True)
        T = cfg.get("dynamics", "T", required=True)
        q0 = np.asarray(cfg.get("initial", "q", (0.0,)), float)
        V0 = fld.value(q0)
        if E <= V0:
            raise ConfigError(f"[oracle] E={E} below V(q0)={V0}")
        x0 = PhaseState(0.0, q0, [math.copysign(math.sqrt(2 * (E - V0)), sign)])
        spec = integrator_spec(cfg)
        ve = asymptotic_velocity(fld, x0, T, spec)
        spacing = cfg.get("field", "spacing", 1.0)
        start = spacing * math.floor(q0[0] / spacing)
        v_or = drift_velocity_1d(PeriodicCell1D.from_field(fld, start, spacing), E, sign)
        rel = abs(ve.v[0] - v_or) / abs(v_or)
        run.put("E", E)
        run.put("v_simulated", float(ve.v[0]))
        run.put("v_oracle", v_or)
        run.put("rel_err", rel)
        run.put("gap", ve.gap)
        run.put("reliable", ve.reliable)
        run.write_csv("oracle.csv", ["E", "v_simulated", "v_oracle", "rel_err"], [[E, ve.v[0], v_or, rel]])
    elif mode == "product-measure":
        fld, conf = build_field(cfg)
        if fld.d != 1 or conf is None or not hasattr(conf, "assignment"):
            raise ConfigError("product-measure mode needs a d = 1 lattice [field]")
        E = cfg.get("oracle", "E", required=True)
        spacing = conf.basis.vectors[0, 0]
        lo = conf.window_lo[0] * spacing
        n_cells = conf.assignment.shape[0]
        T = cfg.get("dynamics", "T", 10.0 * n_cells * spacing / math.sqrt(2 * E))
        q0 = np.asarray(cfg.get("initial", "q", (lo + 2 * spacing,)), float)
        V0 = fld.value(q0)
        x0 = PhaseState(0.0, q0, [math.sqrt(2 * (E - V0))])
        spec = integrator_spec(cfg)
        stride = max(1, int(round(1.0 / spec.h)))
        from dataclasses import replace
        tr = integrate(fld, x0, T, replace(spec, stride=stride))
        if tr.reason == "time-limit":
            raise RuntimeError("trajectory did not cross the window; increase [dynamics] T")
        v_sim = float((tr.q[-1, 0] - q0[0]) / (tr.t[-1] - x0.t))
        w = np.asarray(cfg.get("field", "weights", required=True), float)
        v_or, se = expected_drift_over_measure(conf.palette, w / w.sum(), E, 1.0, seed=derive_seed(cfg.seed, "oracle-mc"),
                                               spacing=spacing)
        rel = abs(v_sim - v_or) / abs(v_or)
        run.put("E", E)
        run.put("n_cells", n_cells)
        run.put("cells_crossed", (tr.q[-1, 0] - q0[0]) / spacing)
        run.put("v_simulated", v_sim)
        run.put("v_oracle", v_or)
        run.put("v_oracle_stderr", se)
        run.put("rel_err", rel)
        run.write_csv("trajectory.csv", _traj_header(1), _traj_rows(tr))
    else:
        raise ConfigError(f"[oracle] unknown mode {mode!r} (drift | identity-sweep | simulate | product-measure)")


def cmd_curvature_map(run: Run) -> None:
    from .jacobi import (JacobiMetric, brioschi_curvature, curvature_map, curvature_threshold, gaussian_curvature,
                         scalar_curvature, scalar_curvature_conformal)

    cfg = run.cfg
    fld, _ = build_field(cfg)
    c = cfg.sec("curvature")
    d = fld.d
    lo = np.asarray(cfg.get("curvature", "lo", required=True), float)
    hi = np.asarray(cfg.get("curvature", "hi", required=True), float)
    if lo.size != d or hi.size != d:
        raise ConfigError(f"[curvature] lo/hi need {d} components")
    excl = c.get("exclusion", 1e-2)
    E = c.get("E")
    if E is not None:
        metric = JacobiMetric(fld, E, c.get("normalized", False))
        if d == 2 and c.get("map", True):
            M = curvature_map(metric, lo, hi, c.get("n", 64), excl)
            run.write_csv("curvature.csv", ["x", "y", "K"], M)
            fin = M[np.isfinite(M[:, 2]), 2]
            run.put("K_max", float(fin.max()) if fin.size else math.nan)
            run.put("K_min", float(fin.min()) if fin.size else math.nan)
        n_pr = c.get("probes", 0)
        if n_pr > 0:
            rng = stream(cfg.seed, "curvature-probes")
            rows = []
            tries = 0
            while len(rows) < n_pr:
                tries += 1
                if tries > 100 * n_pr:
                    raise RuntimeError("too few admissible curvature probes (E too low?)")
                q = lo + (hi - lo) * rng.random(d)
                if any(np.linalg.norm(q - s) < max(excl, 0.05) for s in fld.singular_points):
                    continue
                lam = E - fld.value(q)
                if not lam > 1e-3 * max(1.0, abs(E)):
                    continue
                if d == 2:
                    a = gaussian_curvature(metric, q)
                    b = brioschi_curvature(metric, q, c.get("brioschi_h", 1e-3))
                else:
                    a = scalar_curvature(metric, q, check=False)
                    b = scalar_curvature_conformal(metric, q)
                rows.append([*q, a, b])
            A = np.array(rows)
            scale = max(float(np.max(np.abs(A[:, d]))), 1e-300)
            rel = np.abs(A[:, d] - A[:, d + 1]) / np.maximum(np.abs(A[:, d]), 1e-6 * scale)
            names = ["K_analytic", "K_brioschi"] if d == 2 else ["R_formula", "R_conformal"]
            run.write_csv("probes.csv", [f"q{k + 1}" for k in range(d)] + names + ["rel_err"],
                          [list(r) + [e] for r, e in zip(rows, rel)])
            run.put("probes", len(rows))
            run.put("probe_max_rel_err", float(rel.max()))
    if c.get("threshold", False):
        if d != 2:
            raise ConfigError("curvature threshold scan is defined for d = 2")
        th = curvature_threshold(fld, lo, hi, c.get("threshold_n", 200), excl, c.get("E_max"), c.get("n_scan", 48),
                                 strict=False)
        run.write_csv("threshold.csv", ["E", "predicate"], [[e, int(p)] for e, p in zip(th.energies, th.predicate)])
        run.put("E_th_lo", th.lo)
        run.put("E_th_hi", th.hi)
        run.put("E_th_finite", bool(math.isfinite(th.lo) and math.isfinite(th.hi)))
        run.put("predicate_monotone", th.monotone)
        run.put("threshold_grid_points", th.grid_points)
        run.put("threshold_excluded", th.excluded)


def _coulomb_setup(cfg: ExperimentConfig):
    from .coulomb import RegularizationSpec, SingularSite

    names = cfg.get("coulomb", "sites", required=True)
    sites = []
    for n in names:
        W = build_site(cfg, n)
        pos = cfg.get(f"site.{n}", "position", (0.0, 0.0))
        if len(pos) != 2:
            raise ConfigError(f"[site.{n}] position needs 2 components")
        sites.append(SingularSite(complex(pos[0], pos[1]), W))
    bg = build_configuration(cfg, "background")
    c = cfg.sec("coulomb")
    dyn = cfg.sec("dynamics")
    spec = RegularizationSpec(h=dyn.get("h", 1e-3), ds=c.get("ds"), r_sw=c.get("r_sw"),
                              stride=dyn.get("stride", 1), collision_tol=c.get("collision_tol", 1e-24))
    return sites, bg, spec


def cmd_coulomb_sim(run: Run) -> None:
    from .coulomb import BranchFunction, integrate_regularized, monodromy_check, random_loops
    from .dynamics import PhaseState
    from dataclasses import replace

    cfg = run.cfg
    sites, bg, spec = _coulomb_setup(cfg)
    q = np.asarray(cfg.get("initial", "q", required=True), float)
    p = np.asarray(cfg.get("initial", "p", (0.0, 0.0)), float)
    x0 = PhaseState(0.0, q, p)
    T = cfg.get("dynamics", "T", required=True)
    tr = integrate_regularized(sites, bg, x0, T, spec)
    run.write_csv("trajectory.csv", _traj_header(2, ("chart_id", "sheet")),
                  _traj_rows(tr, (tr.chart_id, tr.sheet)))
    run.write_csv("events.csv", ["t", "site", "rho_min", "L"], tr.events)
    run.put("E0", tr.E0)
    run.put("max_drift", tr.max_drift)
    run.put("collisions", tr.collisions)
    run.put("pericentres", len(tr.events))
    run.put("transitions", tr.transitions)
    run.put("reason", tr.reason)
    chk = cfg.sec("checks")
    if "reversibility_T" in chk:
        Tr = chk["reversibility_T"]
        s1 = replace(spec, stride=10 ** 9)
        a = integrate_regularized(sites, bg, x0, Tr, s1)
        b = integrate_regularized(sites, bg, PhaseState(0.0, a.q[-1], -a.p[-1]), Tr, s1)
        err = float(np.linalg.norm(np.concatenate([b.q[-1] - x0.q, -b.p[-1] - x0.p])))
        run.put("reversibility_T", Tr)
        run.put("reversibility_collisions", a.collisions)
        run.put("reversibility_error", err)
    n_loops = chk.get("monodromy_loops", 0)
    if n_loops > 0:
        rad = chk.get("loop_radius", (0.5, 2.5))
        loops = random_loops(derive_seed(cfg.seed, "loops"), n_loops, chk.get("loop_box", 1.5), tuple(rad))
        nz = chk.get("loop_zeros", 0)
        if nz > 0:
            # random simple branch points instead of the site positions
            zr = stream(cfg.seed, "loop-zeros").uniform(-2.0, 2.0, (nz, 2))
            branch = BranchFunction(tuple(complex(x, y) for x, y in zr))
        else:
            branch = BranchFunction.from_sites(sites)
        mc = monodromy_check(branch, loops)
        run.put("monodromy_zeros", len(branch.zeros))
        run.put("monodromy_loops", mc.n_loops)
        run.put("monodromy_failures", mc.failures)
        run.put("monodromy_unreliable", mc.unreliable)
        run.put("monodromy_min_distance", mc.min_distance)


def cmd_shoot(run: Run) -> None:
    from .coulomb import CoulombSystem, return_distance, shoot_collision_orbit

    cfg = run.cfg
    sites, bg, spec = _coulomb_setup(cfg)
    s = cfg.sec("shoot")
    E = cfg.get("shoot", "E", required=True)
    a, b = s.get("a", 0), s.get("b", 1)
    if not (0 <= a < len(sites) and 0 <= b < len(sites)):
        raise ConfigError("[shoot] a and b must index [coulomb] sites")
    axial = math.atan2((sites[b].position - sites[a].position).imag, (sites[b].position - sites[a].position).real)
    if "bracket" in s:
        br = s["bracket"]
    else:
        off = s.get("bracket_axial", (-0.3, 0.3))
        br = (axial + off[0], axial + off[1])
    if len(br) != 2:
        raise ConfigError("[shoot] bracket needs two angles")
    system = CoulombSystem(sites, bg, spec.r_sw)
    res = shoot_collision_orbit(system, None, E, a, b, tuple(br), spec, s.get("T_max", 50.0), s.get("tol", 1e-6))
    run.put("found", res.found)
    run.put("reason", res.reason)
    run.put("iterations", res.iterations)
    run.put("miss", res.miss)
    run.put("axial_angle", axial)
    if not res.found:
        raise RuntimeError(f"no collision orbit in bracket: {res.reason}")
    dist, t_ret = return_distance(system, None, E, a, b, res, spec)
    dang = (res.angle - axial + math.pi) % (2 * math.pi) - math.pi
    run.put("angle", res.angle)
    run.put("angle_minus_axial", dang)
    run.put("flight_time", res.flight_time)
    run.put("return_distance", dist)
    run.put("return_time", t_ret)
    run.write_csv("shoot.csv", ["angle", "flight_time", "miss", "return_distance", "return_time"],
                  [[res.angle, res.flight_time, res.miss, dist, t_ret]])


def _report(run: Run, items: dict, passed: bool) -> None:
    items = dict(items)
    items["passed"] = passed
    run.write_text("report.txt", "".join(f"{k}={_fmt(v)}\n" for k, v in items.items()))
    for k, v in items.items():
        run.put(k, v)


def cmd_construct(run: Run) -> None:
    from . import constructions as C
    from .dynamics import IntegratorSpec, integrate
    from .randfield import FiniteConfiguration, PotentialField, dumps_configuration

    cfg = run.cfg
    c = cfg.sec("construct")
    kind = cfg.get("construct", "kind", required=True)
    site = build_site(cfg, c["site"]) if "site" in c else None
    if kind == "barrier":
        if site is None:
            raise ConfigError("[construct] barrier needs site")
        E = c.get("E", 1.0)
        conf, rep = C.build_confining_barrier(site, E, k=c.get("k", 0), eps=c.get("eps", 0.1),
                                              ring_width=c.get("ring_width", 1.5),
                                              height_factor=c.get("height_factor", 2.5),
                                              n_orbits=c.get("n_orbits", 100), T=c.get("T", 1e3),
                                              h=c.get("h", 1e-2), seed=derive_seed(cfg.seed, "barrier"),
                                              max_retries=c.get("max_retries", 3), workers=cfg.workers)
        run.write_text("construct.cfg", dumps_configuration(conf))
        _report(run, {"E": E, "eps": rep.eps, "n_sites": len(conf.points),
                      "barrier_min_on_ring": rep.barrier_min_on_ring, "ring_radius": rep.ring_radius,
                      "contained_count": rep.contained_count, "n_orbits": rep.n_orbits,
                      "control_escaped": rep.control_escaped, "retries": rep.retries}, rep.passed)
        ok = rep.passed
    elif kind == "circular":
        r, ell, E = c.get("r", 1.0), c.get("ell", 2.0), c.get("E", 1.0)
        prof = C.RadialProfile.circular_orbit_design(r, ell, E, c.get("u0", 0.3), c.get("power", 4))
        eo = C.effective_potential_orbit(prof, ell, r)
        conf = FiniteConfiguration.single(prof.as_site(), [0.0, 0.0])
        fld = PotentialField(conf)
        period = 2 * math.pi / eo.omega
        T = c.get("periods", 10.0) * period
        tr = integrate(fld, C.circular_orbit_state(r, ell), T,
                       IntegratorSpec(h=c.get("h", 1e-4), stride=10, guard=False))
        dev = float(np.max(np.abs(np.linalg.norm(tr.q, axis=1) - r)))
        fl = C.linear_stability(fld, [r, 0.0], [0.0, ell / r], period, h=c.get("floquet_h", 1e-3),
                                unit_tol=c.get("unit_tol", 1e-4))
        run.write_text("construct.cfg", dumps_configuration(conf))
        tol = c.get("radius_tol", 1e-6)
        ok = (abs(eo.E - E) <= 1e-12 * max(1.0, abs(E)) and abs(eo.omega - ell / r ** 2) <= 1e-12
              and eo.circular and dev <= tol and fl.elliptic)
        items = {"E": eo.E, "omega": eo.omega, "dU": eo.dU, "d2U": eo.d2U, "period": period,
                 "radius_max_deviation": dev, "U_min": prof.minimum, "U_max": prof.maximum,
                 "transverse_abs": np.abs(fl.transverse), "transverse_max_modulus_defect": fl.max_modulus_defect,
                 "floquet_closure": fl.closure, "elliptic": fl.elliptic}
        items.update({f"design_{k}": v for k, v in prof.meta.items() if isinstance(v, (int, float))})
        _report(run, items, ok)
    elif kind == "mirrors":
        B1, B2 = C.mirror_difference_site(c.get("A1", 10.0), c.get("R1", 0.5), c.get("R2", 1.0))
        conf, info = C.build_mirror_configuration((B1, B2), (1.0, 1.0), r=c.get("r", 3.0), R=c.get("R", 10.0),
                                                  eps=c.get("eps", 0.05), sag=c.get("sag", True))
        E = c.get("E_factor", 0.5) * info["I_prime"]
        mb = c.get("min_bounces", 50)
        rep = C.verify_mirrors(conf, info, E, min_bounces=mb, h=c.get("h", 5e-3))
        Ec = c.get("control_factor", 1.3) * info["I_prime"]
        esc = C.mirror_escape_control(conf, info, Ec, h=c.get("h", 5e-3))
        run.write_text("construct.cfg", dumps_configuration(conf))
        ok = rep.bounce_count >= mb and rep.in_tube and esc
        _report(run, {"I": info["I"], "I_prime": info["I_prime"], "normal": info["normal"], "E": E,
                      "bounce_count": rep.bounce_count, "in_tube": rep.in_tube, "T": rep.T,
                      "control_E": Ec, "control_escaped": esc, "n_sites": len(conf.points)}, ok)
    elif kind == "density":
        if site is None:
            raise ConfigError("[construct] density needs site")
        prof = C.RadialProfile.polynomial_ring(c.get("r_center", 1.5), c.get("half_width", 0.75),
                                               c.get("height", 1.0), c.get("power", 4))
        eps_list = c.get("eps_list", (0.2, 0.1, 0.05, 0.025))
        k = c.get("k", 0)
        dmap = C.DensityMap(prof, 2)
        sets = [C.build_density_point_set(prof, site, e, k, 2, c.get("n_probe", 81), dmap) for e in eps_list]
        errs = np.array([s.error for s in sets])
        slope = float(np.polyfit(np.log(eps_list), np.log(errs), 1)[0])
        cexp = C.density_exponent(2, k)
        run.write_csv("density.csv", ["eps", "n_points", "sup_error"],
                      [[s.eps, len(s.points), s.error] for s in sets])
        run.write_text("construct.cfg", dumps_configuration(sets[-1].configuration()))
        mono = bool(np.all(np.diff(errs) < 0))
        ok = mono and slope >= 0.5 * cexp
        _report(run, {"c": cexp, "sup_errors": errs, "monotone": mono, "slope": slope,
                      "slope_required": 0.5 * cexp}, ok)
    elif kind == "slowly-varying":
        from .dynamics import PhaseState, asymptotic_velocity

        d = c.get("d", 1)
        lo = c.get("window_lo", (-50,) * d)
        hi = c.get("window_hi", (20000,) * d)
        conf = C.build_slowly_varying_configuration(d, (lo, hi), c.get("height", 1.0))
        fld = PotentialField(conf)
        E = c.get("E", 1.05)
        q0 = np.asarray(c.get("q0", (0.5,) * d), float)
        V0 = fld.value(q0)
        if E <= V0:
            raise ConfigError(f"[construct] E={E} below V(q0)={V0}")
        p0 = np.full(d, math.sqrt(2 * (E - V0) / d))
        rows = []
        for T in c.get("T_list", (1e2, 1e3, 1e4)):
            ve = asymptotic_velocity(fld, PhaseState(0.0, q0, p0), T, IntegratorSpec(h=c.get("h", 1e-2)))
            if not ve.reliable:
                raise RuntimeError(f"velocity estimate at T={T} unreliable ({ve.reason}); enlarge the window")
            rows.append([T, *ve.v, ve.gap])
        gaps = np.array([r[-1] for r in rows])
        ratios = gaps[1:] / gaps[:-1]
        run.write_csv("gaps.csv", ["T"] + [f"v{k + 1}" for k in range(d)] + ["gap"], rows)
        run.write_text("construct.cfg", dumps_configuration(conf))
        ok = bool(np.all(ratios > c.get("ratio_min", 0.5)))
        _report(run, {"E": E, "gaps": gaps, "gap_ratios": ratios}, ok)
    else:
        raise ConfigError(f"[construct] unknown kind {kind!r} (barrier | circular | mirrors | density | "
                          "slowly-varying)")
    if not ok:
        raise VerificationFailure(f"construct {kind}: verification failed (see report.txt)")


def cmd_liouville(run: Run) -> None:
    from .randfield import LatticeConfiguration, PotentialField, SingleSitePotential, ball_volume
    from .stats import liouville_mass_estimate, phase_space_mass, poisson_sampler_check

    cfg = run.cfg
    li = cfg.sec("liouville")
    mode = li.get("mode", "mass")
    if mode == "mass":
        E = cfg.get("liouville", "E", required=True)
        n = li.get("n_samples", 100000)
        fld, conf = build_field(cfg)
        d = fld.d
        basis = getattr(conf, "basis", None) or _basis(cfg, d)
        origin = np.asarray(li.get("origin", (0.0,) * d), float)
        # exactness for constant V: translates of the smoothed cell indicator sum to c
        cst = li.get("constant", 0.0)
        n0 = np.floor(basis.inverse @ origin).astype(int) - 3
        flat = LatticeConfiguration(basis, tuple(int(x) for x in n0), np.zeros((6,) * d, np.int64),
                                    (SingleSitePotential.smoothed_indicator(cst),))
        est0 = liouville_mass_estimate(PotentialField(flat), E, basis, origin, n_samples=1000,
                                       seed=derive_seed(cfg.seed, "l0"))
        exact = ball_volume(d) * basis.volume * (2 * (E - cst)) ** (d / 2)
        run.put("constant_V", cst)
        run.put("constant_exact", exact)
        run.put("constant_estimate", est0.value)
        run.put("constant_rel_err", abs(est0.value - exact) / exact)
        a = liouville_mass_estimate(fld, E, basis, origin, n, derive_seed(cfg.seed, "liouville"))
        b = phase_space_mass(fld, E, basis, origin, n, derive_seed(cfg.seed, "phase-space"))
        zsc = abs(a.value - b.value) / math.hypot(a.stderr, b.stderr)
        run.put("E", E)
        run.put("mass_liouville", a.value)
        run.put("mass_liouville_se", a.stderr)
        run.put("mass_phase_space", b.value)
        run.put("mass_phase_space_se", b.stderr)
        run.put("z_score", zsc)
        run.write_csv("mass.csv", ["method", "value", "stderr", "n"],
                      [["liouville", a.value, a.stderr, a.n], ["phase-space", b.value, b.stderr, b.n]])
    elif mode == "poisson-sampler":
        lo = cfg.get("liouville", "window_lo", required=True)
        hi = cfg.get("liouville", "window_hi", required=True)
        rho = cfg.get("liouville", "intensities", required=True)
        pal = _palette(cfg, "liouville")
        chk = poisson_sampler_check((lo, hi), rho, pal, li.get("draws", 10000), derive_seed(cfg.seed, "poisson"))
        rows = []
        for j in range(len(rho)):
            rows.append([f"mark{j}", rho[j], chk.chi2_p[j], chk.empty_observed[j], chk.empty_expected[j],
                         chk.empty_z[j]])
        rows.append(["all", float(np.sum(rho)), "", chk.empty_observed[-1], chk.empty_expected[-1],
                     chk.empty_z[-1]])
        run.write_csv("poisson.csv", ["mark", "intensity", "chi2_p", "empty_observed", "empty_expected", "empty_z"],
                      rows)
        run.put("draws", chk.n_draws)
        run.put("volume", chk.volume)
        run.put("chi2_p_min", min(chk.chi2_p))
        run.put("empty_z_max", max(abs(z) for z in chk.empty_z))
        run.put("uniform_p", chk.uniform_p)
    else:
        raise ConfigError(f"[liouville] unknown mode {mode!r} (mass | poisson-sampler)")


def cmd_recurrence(run: Run) -> None:
    from .dynamics import integrate
    from .stats import recurrence_rate

    cfg = run.cfg
    fld, conf = build_field(cfg)
    x0 = initial_state(cfg, fld)
    T = cfg.get("dynamics", "T", required=True)
    tr = integrate(fld, x0, T, integrator_spec(cfg))
    r = cfg.sec("recurrence")
    basis = (getattr(conf, "basis", None) or _basis(cfg, fld.d)) if r.get("torus", False) else None
    rec = recurrence_rate(tr, cfg.get("recurrence", "lo", required=True), cfg.get("recurrence", "hi", required=True),
                          r.get("min_gap", 0.0), basis)
    run.write_csv("recurrence.csv", ["k", "t"], [[k, t] for k, t in enumerate(rec.times)])
    run.put("count", rec.count)
    run.put("t_final", tr.t[-1])
    run.put("rate", rec.count / (tr.t[-1] - tr.t[0]) if tr.t[-1] > tr.t[0] else 0.0)
    run.put("reason", tr.reason)
    run.put("rel_drift", tr.rel_drift)


_HANDLERS = {"simulate": cmd_simulate, "velocity-dist": cmd_velocity_dist, "oracle1d": cmd_oracle1d,
             "curvature-map": cmd_curvature_map, "coulomb-sim": cmd_coulomb_sim, "shoot": cmd_shoot,
             "construct": cmd_construct, "liouville": cmd_liouville, "recurrence": cmd_recurrence}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="randpot", description="Random-potential dynamics laboratory")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="INI-style experiment configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", metavar="DIR", default=None, help="output directory (default: out/<subcommand>)")
        p.add_argument("--workers", type=int, default=1, metavar="N")
        p.add_argument("--seed", type=int, default=None, metavar="U64")
        if name == "oracle1d":
            p.add_argument("--E", type=float, default=None, help="energy (sets oracle.E)")
            p.add_argument("--potential", default=None, choices=("cosine", "constant"),
                           help="periodic potential (sets oracle.potential)")
    return ap


def _numeric_errors():
    from .coulomb import SingularPointError
    from .constructions import OrbitRefinementError
    from .dynamics import IntegrationError, TrajectoryTerminated
    from .jacobi import CurvatureMismatchError, DegenerateMetricError, NonMonotonePredicateError
    from .stats import SamplingError

    return (SingularPointError, OrbitRefinementError, IntegrationError, TrajectoryTerminated,
            CurvatureMismatchError, DegenerateMetricError, NonMonotonePredicateError, SamplingError,
            FloatingPointError, ArithmeticError, RuntimeError, ValueError)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    t0 = time.perf_counter()
    overrides = list(args.overrides)
    if args.command == "oracle1d":
        if args.E is not None:
            overrides.append(f"oracle.E={args.E!r}")
        if args.potential is not None:
            overrides.append(f"oracle.potential={args.potential}")
    if args.config is None and args.command == "oracle1d" and args.seed is None:
        args.seed = 0  # the single-energy oracle consumes no randomness
    if args.workers < 1:
        print("randpot: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.command, args.config, overrides, args.seed,
                          args.out or Path("out") / args.command, args.workers)
    except ConfigError as e:
        print(f"randpot: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(cfg)
    except OSError as e:
        print(f"randpot: config error: output directory not writable: {e}", file=sys.stderr)
        return EXIT_CONFIG
    status, err = EXIT_OK, ""
    try:
        _HANDLERS[cfg.command](run)
    except ConfigError as e:
        status, err = EXIT_CONFIG, f"config error: {e}"
    except VerificationFailure as e:
        status, err = EXIT_VERIFY, f"verification failure: {e}"
    except _numeric_errors() as e:
        status, err = EXIT_NUMERIC, f"numerical failure: {type(e).__name__}: {e}"
    for line in run.stdout_lines:
        print(line)
    run.finish(status, time.perf_counter() - t0, err)
    if err:
        print(f"randpot: {err}", file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
