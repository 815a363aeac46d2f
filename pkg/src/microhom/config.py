"""INI study configuration.

Example::

    [geometry]
    holes = 1/6 1/6 1/6 5/6 5/6 5/6
    micro_n = 24
    macro_n = 96
    eps = 1/4, 1/8, 1/16

    [scenario]
    name = bump
    amplitude = 1.0
    beta = 1.5

    [run]
    delta = 0.1
    seed = 0
    pad = 2
    out = out

Several hole boxes are separated by ``;``.  Numbers may be written as
fractions.  Instead of a scenario name, ``m_tilde`` (TSF1) and ``w`` (TS2F)
paths can be given; they are sampled by nearest-node lookup.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .geometry import cells_per_unit


def parse_number(text) -> float:
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise PreconditionError(f"cannot read number {text!r}") from exc


def parse_list(text):
    return [parse_number(t) for t in str(text).replace(",", " ").split()]


def parse_holes(text):
    holes = []
    for part in str(text).split(";"):
        vals = parse_list(part)
        if not vals:
            continue
        if len(vals) != 6:
            raise PreconditionError(f"a hole box needs 6 numbers (lo xyz, hi xyz), got {part.strip()!r}")
        holes.append((tuple(vals[:3]), tuple(vals[3:])))
    if not holes:
        raise PreconditionError("no hole boxes given")
    return tuple(holes)


@dataclass
class StudyConfig:
    holes: tuple = (((1 / 6,) * 3, (5 / 6,) * 3),)
    micro_n: int = 24
    macro_n: int = 96
    eps: list = field(default_factory=lambda: [0.25, 0.125, 0.0625])
    scenario: str = "bump"
    scenario_params: dict = field(default_factory=dict)
    m_tilde_path: str | None = None
    w_path: str | None = None
    delta: float = 0.1
    seed: int = 0
    pad: float = 2.0
    j_max: int = 3
    trials: int = 64
    limit_micro_n: int = 24
    limit_quad_eps: float = 0.125
    out: str = "out"
    dump: bool = False
    gap_tol: float = 0.10
    fhom_s: list | None = None
    fhom_xi: list | None = None
    fhom_samples: int = 5
    fhom_n: int = 16
    demag_n: int = 128
    demag_radius: float = 0.25
    source: str | None = None

    def validate(self):
        for e in self.eps:
            cells_per_unit(e)
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise PreconditionError("eps list must be strictly decreasing")
        for e in self.eps:
            m = cells_per_unit(e)
            if self.macro_n % m:
                raise PreconditionError(f"macro_n={self.macro_n} is not divisible by 1/eps={m}")
        if not 0.0 < self.delta < 0.5:
            raise PreconditionError("delta must lie in (0, 1/2)")
        if self.pad < 2.0:
            raise PreconditionError("pad must be >= 2")
        return self


_SCALARS = {
    ("geometry", "micro_n"): ("micro_n", int),
    ("geometry", "macro_n"): ("macro_n", int),
    ("run", "delta"): ("delta", parse_number),
    ("run", "seed"): ("seed", int),
    ("run", "pad"): ("pad", parse_number),
    ("run", "j_max"): ("j_max", int),
    ("run", "trials"): ("trials", int),
    ("run", "out"): ("out", str),
    ("limit", "micro_n"): ("limit_micro_n", int),
    ("limit", "quad_eps"): ("limit_quad_eps", parse_number),
    ("tolerances", "gap"): ("gap_tol", parse_number),
    ("fhom", "samples"): ("fhom_samples", int),
    ("fhom", "n"): ("fhom_n", int),
    ("demag", "n"): ("demag_n", int),
    ("demag", "radius"): ("demag_radius", parse_number),
}


def load_config(path) -> StudyConfig:
    p = Path(path)
    if not p.is_file():
        raise PreconditionError(f"config file not found: {p}")
    # ';' separates hole boxes, so only '#' starts comments in that key
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise PreconditionError(f"cannot parse {p}: {exc}") from exc
    cfg = StudyConfig(source=str(p))
    if cp.has_option("geometry", "holes"):
        cfg.holes = parse_holes(cp.get("geometry", "holes"))
    if cp.has_option("geometry", "eps"):
        cfg.eps = parse_list(cp.get("geometry", "eps"))
    for (sec, key), (attr, conv) in _SCALARS.items():
        if cp.has_option(sec, key):
            try:
                setattr(cfg, attr, conv(cp.get(sec, key)))
            except ValueError as exc:
                raise PreconditionError(f"[{sec}] {key}: {exc}") from exc
    if cp.has_option("run", "dump"):
        cfg.dump = cp.getboolean("run", "dump")
    if cp.has_section("scenario"):
        for k, v in cp.items("scenario"):
            if k == "name":
                cfg.scenario = v.strip()
            elif k == "m_tilde":
                cfg.m_tilde_path = str((p.parent / v.strip()).resolve())
            elif k == "w":
                cfg.w_path = str((p.parent / v.strip()).resolve())
            elif k in ("sharp", "corrector"):
                cfg.scenario_params[k] = cp.getboolean("scenario", k)
            else:
                vals = parse_list(v)
                cfg.scenario_params[k] = vals[0] if len(vals) == 1 else tuple(vals)
    if cp.has_option("fhom", "s"):
        cfg.fhom_s = parse_list(cp.get("fhom", "s"))
    if cp.has_option("fhom", "xi"):
        cfg.fhom_xi = parse_list(cp.get("fhom", "xi"))
    return cfg


def field_callable(f):
    """Nearest-node lookup x -> f(x) for a VectorField on a cell-centred grid."""
    g = f.grid
    o = np.asarray(g.origin)
    h = g.spacing
    n = np.asarray(g.n)

    def fn(x):
        idx = np.clip(np.floor((np.asarray(x) - o) / h).astype(np.int64), 0, n - 1)
        return f.data[idx[..., 0], idx[..., 1], idx[..., 2]]

    return fn


def two_scale_callable(w):
    """Lookup (x, z) -> w(cell of x, nearest micro node of z) for a TwoScaleField."""
    o = np.asarray(w.omega.origin)
    M = np.asarray(w.cells)
    mn = np.asarray(w.micro_n)

    def fn(x, z):
        t = np.clip(np.floor((np.asarray(x) - o) / w.eps).astype(np.int64), 0, M - 1)
        k = np.floor(np.mod(np.asarray(z), 1.0) * mn).astype(np.int64) % mn
        t, k = np.broadcast_arrays(t, k)
        return w.data[t[..., 0], t[..., 1], t[..., 2], k[..., 0], k[..., 1], k[..., 2]]

    return fn
