"""Discrete high-contrast energies, their splitting, matrix extensions and the
two-scale limit functional.

On the macro grid the exchange energy is a sum over grid edges (p, p + e_j):

    F1 = 1/2 sum_stiff  w_e |D_j m|^2 dV,      F0 = eps^2/2 sum_soft |D_j m|^2 dV,

with the stiff/soft edge weights of :func:`microhom.geometry.edge_weights`.
The same edge weights define the discrete cell problem of ``cellsolve`` (fd
scheme), so the macro and cell discretisations are consistent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cellsolve import cell_tensor, fhom, fhom_from_tensor, hdz_array
from .demag import hd
from .errors import PreconditionError, ShiftSelectionError
from .fields import Grid, SphereField, VectorField
from .geometry import CellGeometry, CompositeGeometry
from .recovery import harmonic_fill, select_shift, shifted_project


@dataclass(frozen=True)
class EnergyReport:
    eps: float
    F0: float
    F1: float
    Wself: float
    R_split: float = float("nan")
    extension: dict = field(default_factory=dict)
    distances: dict = field(default_factory=dict)

    @property
    def Gtotal(self):
        return self.F0 + self.F1 + self.Wself


def _edge_scale(grid: Grid):
    h = grid.spacing
    return [grid.cell_volume / h[j] ** 2 for j in range(3)]


def exchange_energies(m: VectorField, geom: CompositeGeometry):
    """(F1, F0) of a macro field on the perforated grid."""
    if m.grid != geom.omega:
        from .errors import GridMismatchError

        raise GridMismatchError("field and geometry live on different grids")
    stiff, soft = geom.edge_weights()
    sc = _edge_scale(m.grid)
    a, b = _kernels.edge_sums(m.data, [stiff[j] * sc[j] for j in range(3)], [soft[j] * sc[j] for j in range(3)])
    return 0.5 * float(a), 0.5 * geom.eps**2 * float(b)


def soft_seminorm(u, geom: CompositeGeometry) -> float:
    """sqrt(sum_soft |D u|^2 dV), the discrete ||grad u||_{L2(holes)}."""
    _, soft = geom.edge_weights()
    sc = _edge_scale(geom.omega)
    w = [soft[j] * sc[j] for j in range(3)]
    data = u.data if isinstance(u, VectorField) else np.asarray(u)
    return float(np.sqrt(_kernels.edge_sums(data, w, w)[0]))


def soft_cross(u, v, geom: CompositeGeometry) -> float:
    """sum_soft D u . D v dV by polarisation."""
    a = soft_seminorm(u.data + v.data, geom) ** 2
    b = soft_seminorm(u.data - v.data, geom) ** 2
    return 0.25 * (a - b)


def energy_G_eps(m: VectorField, geom: CompositeGeometry, pad=2.0) -> EnergyReport:
    F1, F0 = exchange_energies(m, geom)
    W = hd(m, pad).energy()
    return EnergyReport(geom.eps, F0, F1, W)


# ---------------------------------------------------------------------------
# matrix extension


@dataclass(frozen=True, eq=False)
class Extension:
    field: SphereField
    l2_ratio: float
    grad_ratio: float
    singular_count: int
    shifted_holes: int
    iterations: int


def _full_seminorm(data, grid: Grid, weights=None):
    sc = _edge_scale(grid)
    ones = np.ones(grid.n)
    w = [(ones if weights is None else weights[j]) * sc[j] for j in range(3)]
    return float(np.sqrt(_kernels.edge_sums(data, w, w)[0]))


def extend_matrix(m: VectorField, geom: CompositeGeometry, delta=0.1, seed=0, trials=32) -> Extension:
    """Sphere-valued extension of the matrix values of ``m`` into the holes.

    The matrix trace is extended harmonically (componentwise, 7-point
    Laplacian on the hole nodes); where the result comes closer than 1 - delta
    to the origin the hole is projected with the shifted projection, the
    shift being chosen per hole from its own values.  Matrix values are kept
    exactly.
    """
    hole = geom.chi0
    if not np.any(hole):
        return Extension(SphereField(m.grid, m.data.copy()), 1.0, 1.0, 0, 0, 0)
    v, it = harmonic_fill(m.data, ~hole, periodic=False)
    nrm = np.linalg.norm(v, axis=-1)
    out = v / np.where(nrm > 0, nrm, 1.0)[..., None]
    low = hole & (nrm < 1.0 - delta)
    nsing = 0
    nshift = 0
    if np.any(low):
        n = geom.micro_n
        cid = [np.arange(geom.omega.n[i]) // n[i] for i in range(3)]
        cells = np.unique(np.stack([c[ix] for c, ix in zip(cid, np.nonzero(low))], axis=-1), axis=0)
        h = float(np.min(geom.omega.spacing))
        for k, t in enumerate(cells):
            sl = tuple(slice(t[i] * n[i], (t[i] + 1) * n[i]) for i in range(3))
            hv = hole[sl]
            vv = VectorField(Grid.unit(n), np.where(hv[..., None], v[sl], 1.0))
            try:
                sh = select_shift(vv, delta, seed, h, trials, stream=10**6 + k)
                a = sh.a
            except ShiftSelectionError:
                a = select_shift(vv, delta, seed, h, trials, min_margin=0.0, stream=10**6 + k).a
            pr = shifted_project(vv, a, delta, hmin=0.5 * h)
            blk = out[sl]
            blk[hv] = pr.m.data[hv]
            out[sl] = blk
            nsing += int(np.count_nonzero(pr.singular & hv))
            nshift += 1
    out[~hole] = m.data[~hole]
    ext = SphereField(m.grid, out)
    dv = m.grid.cell_volume
    l2m = np.sqrt(np.sum(np.sum(m.data**2, axis=-1)[~hole]) * dv)
    l2e = np.sqrt(np.sum(out**2) * dv)
    stiff, _ = geom.edge_weights()
    gm = _full_seminorm(m.data, m.grid, [(w > 0).astype(np.float64) for w in stiff])
    ge = _full_seminorm(out, m.grid)
    return Extension(ext, l2e / l2m, ge / gm if gm > 0 else float("nan"), nsing, nshift, it)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class Splitting:
    F0_m: float
    F1_m: float
    F0_w: float
    F1_ext: float
    R: float
    bound: float  # eps ||eps grad m|| ||grad m~|| + eps^2/2 ||grad m~||^2
    bound_literal: float  # (eps ||eps grad m|| + eps^2/2) ||grad m~||
    identity_residual: float

    @property
    def bound_holds(self):
        return abs(self.R) <= self.bound * (1 + 1e-12) + 1e-15

    @property
    def literal_bound_holds(self):
        return abs(self.R) <= self.bound_literal * (1 + 1e-12) + 1e-15


def split_energies(m: VectorField, geom: CompositeGeometry, m_ext: VectorField, tol=1e-12) -> Splitting:
    """F0(w_k), F1(m~_k) and R_k = F0(m) - F0(w_k) for w_k = m - m~_k.

    The norms in the bounds are the soft-edge (hole) norms, so the bounds
    follow from Cauchy-Schwarz on the same sums that define R_k.
    """
    mat = geom.chi1
    dev = float(np.max(np.abs(m.data[mat] - m_ext.data[mat]))) if np.any(mat) else 0.0
    if dev > tol:
        raise PreconditionError(f"extension differs from m on the matrix by {dev:.3e}")
    F1m, F0m = exchange_energies(m, geom)
    w = VectorField(m.grid, m.data - m_ext.data)
    F1e, _ = exchange_energies(m_ext, geom)
    _, F0w = exchange_energies(w, geom)
    R = F0m - F0w
    eps = geom.eps
    gm = soft_seminorm(m, geom)
    ge = soft_seminorm(m_ext, geom)
    bound = eps * (eps * gm) * ge + 0.5 * eps**2 * ge**2
    literal = (eps * (eps * gm) + 0.5 * eps**2) * ge
    ident = (F0w + F1e + R) - (F0m + F1m)
    return Splitting(F0m, F1m, F0w, F1e, R, bound, literal, ident)


# ---------------------------------------------------------------------------
# limit functional


@dataclass(frozen=True)
class LimitEnergy:
    F0: float
    F1: float
    W_macro: float
    W_micro: float
    orthogonality: float
    micro_n: tuple
    quad_cells: tuple

    @property
    def W(self):
        return self.W_macro + self.W_micro

    @property
    def total(self):
        return self.F0 + self.F1 + self.W


def _cell_tensor_for(cell, micro_n, discretization):
    c = cell.resample(micro_n) if tuple(np.broadcast_to(micro_n, 3)) != tuple(cell.n) else cell
    return cell_tensor(c, discretization), c


def limit_energy_G(m_tilde, w, cell: CellGeometry, omega: Grid, micro_n=24, quad_eps=1.0 / 16, pad=2.0,
                   discretization="fd", jacobian=None, reading="integral", domain="Q", chunk=1,
                   tensor=None, pointwise=None) -> LimitEnergy:
    """G(m~, w) = F0(w) + F1(m~) + int W_hom.

    ``m_tilde`` is a callable x -> S^2 (sampled on ``omega``) and ``w`` a
    callable (x, z) -> R^3 supported in the hole.  x-integrals of micro
    quantities use the midpoint rule on cells of size ``quad_eps`` with
    ``micro_n`` points per cell axis; <w> is interpolated linearly from those
    cells to ``omega``.  F1 uses the cell tensor on ``omega`` with the
    Jacobian of m~ (``jacobian`` or central differences of the callable).
    ``pointwise`` replaces the tensor path by a per-node evaluation, e.g. an
    :class:`~microhom.cellsolve.FhomCache`.
    """
    from scipy.interpolate import RegularGridInterpolator

    from .cellsolve import wavenumbers
    from .unfolding import cell_layout

    n = tuple(np.broadcast_to(micro_n, 3))
    tens, c = (tensor, cell.resample(n)) if tensor is not None else _cell_tensor_for(cell, n, discretization)
    chi0 = c.chi0
    x = omega.points()
    s = np.asarray(m_tilde(x), dtype=np.float64)
    if jacobian is None:
        hh = 1e-6
        cols = []
        for j in range(3):
            e = np.zeros(3)
            e[j] = hh
            cols.append((np.asarray(m_tilde(x + e)) - np.asarray(m_tilde(x - e))) / (2 * hh))
        J = np.stack(cols, axis=-1)
    else:
        J = np.asarray(jacobian(x))
    dv = omega.cell_volume
    if pointwise is None:
        F1 = float(np.sum(fhom_from_tensor(s, J, tens))) * dv
    else:
        F1 = float(sum(pointwise(s[i], J[i]) for i in np.ndindex(omega.n))) * dv

    qg = Grid(omega.origin, omega.extent, [max(1, int(round(omega.extent[i] / quad_eps))) for i in range(3)])
    xc = qg.points()
    zp = Grid.unit(n).points()
    M = qg.n
    mean = np.zeros(tuple(M) + (3,))
    hzmean = np.zeros(tuple(M) + (3,))
    F0 = 0.0
    Wmi = 0.0
    kz = [wavenumbers(n[j], drop_nyquist=True) for j in range(3)]
    sel = np.ones(n, dtype=bool) if domain == "Q" else chi0
    if domain not in ("Q", "Q0"):
        raise PreconditionError(f"unknown micro domain {domain!r}")
    wq = qg.cell_volume / np.prod(n)
    for i0 in range(0, M[0], chunk):
        i1 = min(M[0], i0 + chunk)
        X = np.broadcast_to(xc[i0:i1, :, :, None, None, None, :], (i1 - i0, M[1], M[2]) + n + (3,))
        Z = np.broadcast_to(zp[None, None, None], X.shape)
        wv = np.asarray(w(X, Z), dtype=np.float64) * chi0[..., None]
        mean[i0:i1] = wv.mean(axis=(3, 4, 5))
        if reading == "average":
            mean[i0:i1] /= float(np.mean(chi0))
        wh = np.fft.fftn(wv, axes=(3, 4, 5))
        for j in range(3):
            shp = [1] * 7
            shp[3 + j] = n[j]
            d = np.fft.ifftn(1j * kz[j].reshape(shp) * wh, axes=(3, 4, 5)).real
            F0 += 0.5 * float(np.sum(d * d * chi0[..., None])) * wq
        hz = hdz_array(wv, axes=(-4, -3, -2))
        Wmi += float(np.sum(np.sum(hz * hz, axis=-1) * sel)) * wq
        hzmean[i0:i1] = hz.mean(axis=(3, 4, 5))

    ax = [qg.axis(i) for i in range(3)]
    interp = RegularGridInterpolator(ax, mean, bounds_error=False, fill_value=None)
    avg = interp(x.reshape(-1, 3)).reshape(x.shape)
    sol = hd(VectorField(omega, s + avg), pad)
    Wma = sol.energy()
    # pairing of the macro field (constant in z) with h_d^z[w]; zero up to
    # round-off because h_d^z has no k = 0 mode
    hc = VectorField(omega, sol.restrict().data)
    hx = RegularGridInterpolator([omega.axis(i) for i in range(3)], hc.data,
                                 bounds_error=False, fill_value=None)(xc.reshape(-1, 3)).reshape(xc.shape)
    orth = float(np.sum(hx * hzmean)) * qg.cell_volume
    return LimitEnergy(F0, F1, Wma, Wmi, orth, n, tuple(M))


# ---------------------------------------------------------------------------
# Gamma study

STUDY_COLUMNS = ("eps", "F0", "F1", "Wself", "Gtotal", "Glimit", "gap", "R_split", "d1", "d2", "d3",
                 "ext_dist", "singular_count")


@dataclass(frozen=True)
class StudyRow:
    eps: float
    F0: float
    F1: float
    Wself: float
    Gtotal: float
    Glimit: float
    gap: float
    R_split: float
    d1: float
    d2: float
    d3: float
    ext_dist: float
    singular_count: int
    split: Splitting
    ext_l2_ratio: float
    ext_grad_ratio: float
    pairing_error: float

    def values(self):
        return [getattr(self, c) for c in STUDY_COLUMNS]


@dataclass(eq=False)
class GammaStudy:
    rows: list
    limit: LimitEnergy
    sequence: object
    pairings: list  # (eps, name, unfolded, limit)
    claim: bool  # False when the input is not saturated

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)


def gamma_study(inp, eps_list, omega: Grid, delta=0.1, seed=0, pad=2.0, j_max=3, limit_micro_n=24,
                limit_quad_eps=1.0 / 8, trials=64, ext_delta=0.1) -> GammaStudy:
    """Recovery sequence, discrete energies and the limit value for each eps.

    The gap column is |G_eps(m_k) - G(m~, w)|; it is NaN when the input is not
    saturated, in which case energies are still reported.
    """
    from .geometry import build_composite
    from .recovery import run_recovery
    from .unfolding import limit_pairing, pairing_dictionary, unfolded_pairing

    seq = run_recovery(inp, eps_list, omega, delta, seed, j_max, trials=trials, force=not inp.saturated)
    lim = limit_energy_G(inp.m_tilde, inp.w, inp.cell, omega, limit_micro_n, limit_quad_eps, pad,
                         jacobian=inp.grad_m_tilde)
    G = lim.total
    mt = VectorField.from_function(omega, inp.m_tilde)
    rows, pairs = [], []
    for st in seq.steps:
        geom = build_composite(inp.cell, st.eps, omega, strict=False)
        rep = energy_G_eps(st.m, geom, pad)
        ext = extend_matrix(st.m, geom, ext_delta, seed)
        sp = split_energies(st.m, geom, ext.field)
        ext_dist = float(np.sqrt(np.sum((ext.field.data - mt.data) ** 2) * omega.cell_volume))
        n = st.presequence.W.micro_n
        worst = 0.0
        for name, psi in pairing_dictionary():
            a = unfolded_pairing(st.m, psi, st.eps)
            b = limit_pairing(inp.target, psi, omega, st.eps, n)
            pairs.append((st.eps, name, a, b))
            worst = max(worst, abs(a - b))
        gap = abs(rep.Gtotal - G) if inp.saturated else float("nan")
        rows.append(StudyRow(st.eps, rep.F0, rep.F1, rep.Wself, rep.Gtotal, G, gap, sp.R, st.d1, st.d2, st.d3,
                             ext_dist, st.singular_count + ext.singular_count, sp, ext.l2_ratio,
                             ext.grad_ratio, worst))
    return GammaStudy(rows, lim, seq, pairs, bool(inp.saturated))
