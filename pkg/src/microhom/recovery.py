"""Recovery sequences m_k -> (m~, w) and their diagnostics.

The construction follows four steps for each eps_k:

1. smooth approximants w_j of w (cut off near the hole boundary and near the
   boundary of the macro box),
2. cell averages of w_j in x, which are oscillated back to the macro grid,
3. a pre-sequence v_k = m~'_k + eps_k psi(x, x/eps_k) + w^_k with m~'_k a
   mollification of m~ at radius eps_k,
4. a shifted sphere projection m_k.  Where |v_k| < 1 - delta, v_k is mapped
   along the ray from a shift point a (|a| < 1/4) to the centred sphere of
   radius 1 - delta and then normalised; elsewhere m_k = v_k / |v_k|.  The
   two branches agree on |v_k| = 1 - delta, so m_k has no jump there.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .errors import MarginError, PreconditionError, ShiftSelectionError, SupportError
from .fields import Grid, SphereField, VectorField, gradient, l2_norm, mollify
from .geometry import CellGeometry, build_composite, edge_weights
from .unfolding import (
    TwoScaleField,
    cell_layout,
    fold,
    grad_z,
    macro_micro_coords,
    sample_two_scale,
    strong_ts_distance,
    unfold,
)


def smooth_step(t):
    """C-infinity ramp: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)

    def f(s):
        pos = s > 0
        return np.where(pos, np.exp(-1.0 / np.where(pos, s, 1.0)), 0.0)

    a, b = f(t), f(1.0 - t)
    return a / (a + b)


def box_depth(x, grid: Grid):
    """Distance from x to the boundary of the grid box (negative outside)."""
    x = np.asarray(x, dtype=np.float64)
    d = np.full(x.shape[:-1], np.inf)
    for i in range(3):
        a = grid.origin[i]
        b = a + grid.extent[i]
        d = np.minimum(d, np.minimum(x[..., i] - a, b - x[..., i]))
    return d


def min_half_width(cell: CellGeometry) -> float:
    return min(0.5 * min(h - l for l, h in zip(lo, hi)) for lo, hi in cell.holes)


@dataclass(frozen=True, eq=False)
class RecoveryInput:
    """Target pair (m~, w) given as callables.

    ``m_tilde(x)`` returns unit vectors; ``w(x, z)`` must vanish for z outside
    the hole.  ``psi`` is an optional tangent corrector psi(x, z), or an object
    with ``at_resolution(n)`` returning one for a given micro grid.
    """

    m_tilde: Callable
    w: Callable
    cell: CellGeometry
    psi: object = None
    saturated: bool = True
    grad_m_tilde: Callable | None = None
    name: str = "custom"

    def target(self, x, z):
        chi = self.cell.indicator(z)
        return np.asarray(self.m_tilde(x)) + chi[..., None] * np.asarray(self.w(x, z))

    def jacobian(self, x, h=1e-6):
        """d m~_i / d x_j, layout (..., 3, 3)."""
        if self.grad_m_tilde is not None:
            return np.asarray(self.grad_m_tilde(x))
        x = np.asarray(x, dtype=np.float64)
        cols = []
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            cols.append((np.asarray(self.m_tilde(x + e)) - np.asarray(self.m_tilde(x - e))) / (2 * h))
        return np.stack(cols, axis=-1)

    def psi_at(self, n):
        if self.psi is None:
            return None
        if hasattr(self.psi, "at_resolution"):
            return self.psi.at_resolution(n)
        return self.psi

    def validate(self, omega: Grid, n=8, tol=1e-10):
        """Check |m~| = 1, supp w(x, .) in Q0 and (if saturated) |m~ + w| = 1 on Q0."""
        x = Grid(omega.origin, omega.extent, n).points()
        z = Grid.unit(n).points()
        X = np.broadcast_to(x[:, :, :, None, None, None, :], (n,) * 6 + (3,))
        Z = np.broadcast_to(z[None, None, None], (n,) * 6 + (3,))
        mt = np.asarray(self.m_tilde(x))
        if np.max(np.abs(np.linalg.norm(mt, axis=-1) - 1)) > tol:
            raise PreconditionError("m~ is not unit length")
        w = np.asarray(self.w(X, Z))
        chi = self.cell.indicator(Z)
        if np.any(~chi) and np.max(np.abs(w[~chi])) > tol:
            raise SupportError("w does not vanish outside the hole")
        if self.saturated:
            s = np.broadcast_to(mt[:, :, :, None, None, None, :], w.shape) + w
            dev = np.abs(np.linalg.norm(s, axis=-1) - 1)[chi]
            if dev.size and dev.max() > tol:
                raise PreconditionError(f"|m~ + w| deviates from 1 by {dev.max():.2e} on the hole")


# ---------------------------------------------------------------------------
# harmonic fill and corrector oscillations


def harmonic_fill(values, known, periodic=False, tol=1e-12, maxiter=5000):
    """Replace ``values`` off the ``known`` mask by the discrete harmonic function
    (7-point Laplacian) matching the known values on neighbouring nodes.

    ``values`` has shape (n1, n2, n3, c).  Returns (filled array, iterations).
    """
    from scipy import sparse
    from .cellsolve import pcg

    known = np.asarray(known, dtype=bool)
    vals = np.asarray(values, dtype=np.float64)
    out = vals.copy()
    unk = ~known
    nu = int(np.count_nonzero(unk))
    if nu == 0:
        return out, 0
    shape = known.shape
    idx = -np.ones(shape, dtype=np.int64)
    idx[unk] = np.arange(nu)
    rows, cols = [], []
    deg = np.zeros(nu)
    b = np.zeros((nu, vals.shape[-1]))
    for ax in range(3):
        for step in (1, -1):
            nb = np.roll(idx, -step, axis=ax)
            nbv = np.roll(vals, -step, axis=ax)
            nbk = np.roll(known, -step, axis=ax)
            valid = np.ones(shape, dtype=bool)
            if not periodic:
                sl = [slice(None)] * 3
                sl[ax] = -1 if step == 1 else 0
                valid[tuple(sl)] = False
            sel = unk & valid
            deg += sel[unk]
            inner = sel & ~nbk
            rows.append(idx[inner])
            cols.append(nb[inner])
            kn = sel & nbk
            b[idx[kn]] += nbv[kn]
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    A = sparse.csr_matrix((-np.ones(r.size), (r, c)), shape=(nu, nu)) + sparse.diags(deg)
    if np.any(deg == 0):
        raise PreconditionError("isolated node in harmonic fill")
    inv = 1.0 / deg
    x, it, _ = pcg(lambda u: A @ u, b, lambda u: inv[:, None] * u, tol, maxiter)
    out[unk] = x
    return out, it


class CorrectorOscillation:
    """psi(x, z) = sum_j chi^j(z) d_j m~(x) with the discrete cell correctors.

    The correctors are computed on the micro grid of the requested resolution
    and extended harmonically into the hole (only their matrix values enter the
    cell energy).  Evaluation looks up the nearest micro node of z.
    """

    def __init__(self, jacobian, cell: CellGeometry, discretization="fd"):
        self.jacobian = jacobian
        self.cell = cell
        self.discretization = discretization
        self._tables = {}

    def table(self, n):
        n = tuple(np.broadcast_to(n, 3))
        if n not in self._tables:
            from .cellsolve import cell_tensor

            c = self.cell.resample(n)
            t = cell_tensor(c, self.discretization)
            chi = np.moveaxis(t.correctors, 0, -1)
            chi, _ = harmonic_fill(chi, c.chi1, periodic=True)
            self._tables[n] = chi
        return self._tables[n]

    def at_resolution(self, n):
        chi = self.table(n)
        nn = np.asarray(chi.shape[:3])

        def psi(x, z):
            z = np.mod(np.asarray(z, dtype=np.float64), 1.0)
            k = np.floor(z * nn).astype(np.int64) % nn
            c = chi[k[..., 0], k[..., 1], k[..., 2]]  # (..., 3) over j
            J = np.asarray(self.jacobian(x))
            return np.einsum("...ij,...j->...i", J, c)

        return psi


# ---------------------------------------------------------------------------
# approximation of w


def approximate_w(w, j, cell: CellGeometry, omega: Grid, margin=None):
    """Level-j smooth approximant of w (radius r_j = 2^-j * margin).

    Callables are multiplied by C-infinity cut-offs vanishing within r_j of
    the hole boundary (in z) and of the macro box boundary (in x); they are
    assumed smooth already.  Sampled two-scale fields are in addition
    mollified in z (periodically, radius r_j) and across cells in x.
    """
    hw = min_half_width(cell)
    margin = 0.5 * hw if margin is None else float(margin)
    if not 0.0 < margin < hw:
        raise MarginError(f"margin {margin} must lie in (0, {hw}) for this hole")
    r = margin * 2.0 ** (-int(j))

    def cut_z(z):
        return smooth_step((cell.depth(z) - r) / r)

    def cut_x(x):
        return smooth_step((box_depth(x, omega) - r) / r)

    if isinstance(w, TwoScaleField):
        return _approximate_sampled(w, r, cell, cut_z, cut_x)

    def wj(x, z):
        return (cut_z(z) * cut_x(x))[..., None] * np.asarray(w(x, z))

    wj.radius = r
    return wj


def _approximate_sampled(w: TwoScaleField, r, cell, cut_z, cut_x):
    from scipy import fft as sfft
    from .fields import friedrichs_kernel

    micro = w.micro
    kern, rr = friedrichs_kernel(micro, r)
    full = np.zeros(micro.n)
    for idx in np.ndindex(kern.shape):
        off = tuple((idx[i] - rr[i]) % micro.n[i] for i in range(3))
        full[off] += kern[idx]
    kh = sfft.fftn(full)
    data = sfft.ifftn(sfft.fftn(w.data, axes=(3, 4, 5)) * kh[None, None, None, :, :, :, None], axes=(3, 4, 5)).real
    lay = cell_layout(w.omega, w.eps)
    rc = r / w.eps
    if rc >= 1.0:
        cgrid = Grid.unit(w.cells)
        ck, cr = friedrichs_kernel(Grid((0, 0, 0), w.cells, w.cells), rc)
        from scipy import signal

        def conv(a):
            return signal.fftconvolve(a, ck.reshape(ck.shape + (1, 1, 1, 1)), mode="same")

        mass = signal.fftconvolve(np.ones(w.cells), ck, mode="same")
        data = conv(data) / mass[..., None, None, None, None]
    zc = cut_z(micro.points())
    xc = cut_x(lay.cell_centers())
    data = data * zc[None, None, None, :, :, :, None] * xc[:, :, :, None, None, None, None]
    return w.with_data(data)


def cube_average(wj, eps, omega: Grid, order=2) -> TwoScaleField:
    """Cell average in x of w_j on the cells inside the box; zero on cut cells."""
    if isinstance(wj, TwoScaleField):
        data = wj.data.copy()
    else:
        data = sample_two_scale(wj, omega, eps, x_rule="gauss", order=order).data
    lay = cell_layout(omega, eps)
    ext = lay.exterior()
    data[ext] = 0.0
    return TwoScaleField(lay.eps, omega, data, ext, lay.t0)


def oscillate(W: TwoScaleField) -> VectorField:
    """Macro field x -> W(cell of x, {x/eps})."""
    return fold(W)


def diagonal_select(table, tol=None):
    """Pick j(k) from an error table e[j, k].

    j(k) is the largest j with e[j, k] <= 2 min_j' e[j', k] + tol_k, made
    non-decreasing in k.
    """
    table = np.asarray(table, dtype=np.float64)
    J, K = table.shape
    tol = np.zeros(K) if tol is None else np.broadcast_to(np.asarray(tol, dtype=np.float64), (K,))
    out, prev = [], 0
    for k in range(K):
        col = table[:, k]
        ok = np.nonzero(col <= 2.0 * col.min() + tol[k])[0]
        j = max(int(ok.max()), prev)
        out.append(j)
        prev = j
    return out


# ---------------------------------------------------------------------------
# pre-sequence and projection


@dataclass(frozen=True, eq=False)
class Presequence:
    eps: float
    j: int
    v: VectorField
    m_tilde_moll: VectorField
    w_hat: VectorField
    osc: VectorField  # eps * psi(x, x/eps)
    W: TwoScaleField

    def eps_gradient(self) -> VectorField:
        return gradient(self.v, interior=True).scaled(self.eps)


def build_presequence(inp: RecoveryInput, eps, omega: Grid, j=None, W=None, margin=None, order=2,
                      mollify_macro=True) -> Presequence:
    lay = cell_layout(omega, eps)
    if W is None:
        W = cube_average(approximate_w(inp.w, j, inp.cell, omega, margin), eps, omega, order)
    mt = VectorField.from_function(omega, inp.m_tilde)
    mtp = mollify(mt, lay.eps, wrap=False) if mollify_macro else mt
    what = oscillate(W)
    x, z = macro_micro_coords(omega, lay.eps)
    psi = inp.psi_at(lay.n)
    osc = np.zeros(mt.data.shape) if psi is None else lay.eps * np.asarray(psi(x, z))
    v = VectorField(omega, mtp.data + what.data + osc)
    return Presequence(lay.eps, -1 if j is None else int(j), v, mtp, what, VectorField(omega, osc), W)


@dataclass(frozen=True)
class ShiftChoice:
    a: np.ndarray
    margin: float
    threshold: float
    trials: int
    vacuous: bool


def _philox(seed, stream=0):
    key = np.array([int(seed) % 2**64, int(stream) % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_ball(rng, count, radius=0.25):
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.random(count) ** (1.0 / 3.0))[:, None]


def select_shift(v, delta, seed, h, trials=64, min_margin=None, stream=0) -> ShiftChoice:
    """Choose a in B_{1/4} maximising min_{x in V} |v(x) - a|, V = {|v| < 1 - delta}.

    Deterministic for a given (seed, stream).  Fails when the best margin is
    below ``min_margin`` (default h/2, the same distance below which
    :func:`shifted_project` flags a node as singular).
    """
    if not 0.0 < delta < 0.5:
        raise PreconditionError("delta must lie in (0, 1/2)")
    if int(trials) < 1:
        raise ShiftSelectionError("no shift trials requested", float("nan"))
    data = v.data if isinstance(v, VectorField) else np.asarray(v)
    data = data.reshape(-1, 3)
    pts = data[np.linalg.norm(data, axis=1) < 1.0 - delta]
    thr = 0.5 * float(h) if min_margin is None else float(min_margin)
    shifts = sample_ball(_philox(seed, stream), trials)
    if pts.shape[0] == 0:
        return ShiftChoice(shifts[0], float("inf"), thr, trials, True)
    margins = _kernels.shift_margins(pts, shifts)
    best = int(np.argmax(margins))
    if margins[best] < thr:
        raise ShiftSelectionError(f"best shift margin {margins[best]:.3e} below {thr:.3e}", float(margins[best]))
    return ShiftChoice(shifts[best], float(margins[best]), thr, trials, False)


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    m: SphereField
    V: np.ndarray
    singular: np.ndarray
    singular_count: int
    grad_ratio: float


def shifted_project(v: VectorField, a, delta, hmin=None) -> ProjectionResult:
    """Sphere projection with the shifted branch on V = {|v| < 1 - delta}."""
    a = np.asarray(a, dtype=np.float64).reshape(3)
    if not np.linalg.norm(a) < 0.25:
        raise PreconditionError("shift must lie in the open ball of radius 1/4")
    if hmin is None:
        hmin = 0.5 * float(np.min(v.grid.spacing))
    data = v.data
    nrm = np.linalg.norm(data, axis=-1)
    V = nrm < 1.0 - delta
    m = data / np.where(nrm > 0, nrm, 1.0)[..., None]
    sing = np.zeros(V.shape, dtype=bool)
    if np.any(V):
        mv, sv = _kernels.radial_project(data[V], a, 1.0 - delta, hmin)
        m[V] = mv
        sing[V] = sv
    mf = SphereField(v.grid, m)
    ratio = float("nan")
    if np.any(V):
        keep = V & ~sing
        gv = l2_norm(gradient(v, interior=True), keep)
        gm = l2_norm(gradient(mf, interior=True), keep)
        ratio = gm / gv if gv > 0 else float("nan")
    return ProjectionResult(mf, V, sing, int(np.count_nonzero(sing)), ratio)


# ---------------------------------------------------------------------------
# distances


def stiff_forward_gradient(m: VectorField, chi1) -> tuple:
    """Forward differences on edges with both ends in the matrix; zero elsewhere.

    Returns (gradient field with layout 3*i + j, edge indicator per axis).
    """
    st = [w > 0 for w in edge_weights(chi1, periodic=False)[0]]
    h = m.grid.spacing
    out = np.zeros(m.data.shape[:3] + (m.ncomp, 3))
    for j in range(3):
        d = (np.roll(m.data, -1, axis=j) - m.data) / h[j]
        out[..., j] = d * st[j][..., None]
    mask = np.stack(st, axis=-1)
    return VectorField(m.grid, out.reshape(m.data.shape[:3] + (3 * m.ncomp,))), mask


def tangent_projection(s, v):
    """(I - s s^T) v for v with layout (..., 3, k)."""
    return v - s[..., :, None] * np.einsum("...i,...ik->...k", s, v)[..., None, :]


@dataclass(frozen=True, eq=False)
class RecoveryStep:
    eps: float
    j: int
    m: SphereField
    presequence: Presequence
    shift: ShiftChoice
    projection: ProjectionResult
    d1: float
    d2: float
    d3: float
    target_norm: float
    sphere_residual: float
    vol_V: float
    vol_A: float
    vol_W: float
    projected_mass: float

    @property
    def singular_count(self):
        return self.projection.singular_count


@dataclass(eq=False)
class RecoverySequence:
    steps: list
    error_table: np.ndarray
    j_of_k: list
    delta: float
    seed: int

    def column(self, name):
        return [getattr(s, name) for s in self.steps]


def recovery_targets(inp: RecoveryInput, omega: Grid, eps):
    """Sampled two-scale targets at cell centres.

    Returns (m~ + w chi0, w, grad m~ + P(m~) grad_z psi) where the last one is
    built with forward micro differences (layout 3*i + j).
    """
    t1 = sample_two_scale(inp.target, omega, eps)
    tw = sample_two_scale(lambda x, z: inp.cell.indicator(z)[..., None] * np.asarray(inp.w(x, z)), omega, eps)
    lay = cell_layout(omega, eps)
    xc = lay.cell_centers()
    J = inp.jacobian(xc)  # (M1, M2, M3, 3, 3)
    s = np.asarray(inp.m_tilde(xc))
    n = lay.n
    t3 = np.broadcast_to(J[:, :, :, None, None, None], tuple(lay.cells) + tuple(n) + (3, 3)).copy()
    psi = inp.psi_at(n)
    if psi is not None:
        P = sample_two_scale(psi, omega, eps).data
        for j in range(3):
            dz = (np.roll(P, -1, axis=3 + j) - P) * n[j]
            sb = np.broadcast_to(s[:, :, :, None, None, None, :], dz.shape)
            t3[..., j] += dz - sb * np.sum(sb * dz, axis=-1, keepdims=True)
    t3 = t1.with_data(t3.reshape(t3.shape[:6] + (9,)))
    return t1, tw, t3


def two_scale_distances(m: VectorField, inp: RecoveryInput, omega: Grid, eps, targets=None, chi1=None):
    """(d1, d2, d3, ||target||) for a macro field m."""
    t1, tw, t3 = recovery_targets(inp, omega, eps) if targets is None else targets
    lay = cell_layout(omega, eps)
    d1 = strong_ts_distance(m, t1, eps)
    left = unfold(gradient(m, interior=True).scaled(lay.eps), lay.eps)
    right = grad_z(tw, periodic=True)
    d2 = (left - right).l2_norm()
    if chi1 is None:
        chi1 = build_composite(inp.cell, lay.eps, omega, strict=False).chi1
    g, mask = stiff_forward_gradient(m, chi1)
    sg = unfold(g, lay.eps)
    smask = unfold(VectorField(omega, mask.astype(np.float64)), lay.eps).data
    tm = t3.data.reshape(t3.data.shape[:6] + (3, 3)) * smask[..., None, :]
    d3 = (sg - t3.with_data(tm.reshape(t3.data.shape))).l2_norm()
    return d1, d2, d3, t1.l2_norm()


def error_table(inp: RecoveryInput, eps_list, omega: Grid, j_max, margin=None, order=2):
    """e[j, k] = ||W^j_k - w|| + ||grad_z W^j_k - grad_z w|| with the cell-centre samples of w."""
    E = np.zeros((j_max + 1, len(eps_list)))
    cache = {}
    for k, eps in enumerate(eps_list):
        tw = sample_two_scale(lambda x, z: inp.cell.indicator(z)[..., None] * np.asarray(inp.w(x, z)), omega, eps)
        gt = grad_z(tw)
        for j in range(j_max + 1):
            W = cube_average(approximate_w(inp.w, j, inp.cell, omega, margin), eps, omega, order)
            E[j, k] = (W - tw).l2_norm() + (grad_z(W) - gt).l2_norm()
            cache[(j, k)] = W
    return E, cache


def run_recovery(inp: RecoveryInput, eps_list, omega: Grid, delta=0.1, seed=0, j_max=3, margin=None,
                 order=2, trials=64, mollify_macro=True, grids=None, force=False) -> RecoverySequence:
    """Build m_k for each eps_k and record the two-scale distances.

    ``grids`` optionally gives one macro grid per eps (otherwise ``omega`` is
    used throughout).  Inputs without the saturation flag are refused unless
    ``force`` is set.
    """
    if not 0.0 < delta < 0.5:
        raise PreconditionError("delta must lie in (0, 1/2)")
    if not inp.saturated and not force:
        raise PreconditionError("recovery needs |m~ + w| = 1 on the hole (saturation flag unset)")
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise PreconditionError("eps list must be strictly decreasing")
    grids = [omega] * len(eps_list) if grids is None else list(grids)
    # the error table is evaluated per eps on its own grid
    E = np.zeros((j_max + 1, len(eps_list)))
    Ws = {}
    for k, (eps, g) in enumerate(zip(eps_list, grids)):
        Ek, cache = error_table(inp, [eps], g, j_max, margin, order)
        E[:, k] = Ek[:, 0]
        for j in range(j_max + 1):
            Ws[(j, k)] = cache[(j, 0)]
    js = diagonal_select(E, tol=np.asarray(eps_list, dtype=np.float64))
    steps = []
    for k, (eps, g) in enumerate(zip(eps_list, grids)):
        pre = build_presequence(inp, eps, g, j=js[k], W=Ws[(js[k], k)], mollify_macro=mollify_macro)
        h = float(np.min(g.spacing))
        shift = select_shift(pre.v, delta, seed, h, trials, stream=k)
        proj = shifted_project(pre.v, shift.a, delta)
        m = proj.m
        geom = build_composite(inp.cell, eps, g, strict=False)
        targets = recovery_targets(inp, g, eps)
        d1, d2, d3, tn = two_scale_distances(m, inp, g, eps, targets, geom.chi1)
        sphere_res = float(np.max(np.abs(m.pointwise_norm() - 1.0)))
        dv = g.cell_volume
        sv = unfold(pre.v, eps)
        dist = np.linalg.norm(sv.data - targets[0].data, axis=-1)
        interior = ~sv.exterior
        cellw = sv.eps**3 / np.prod(sv.micro_n)
        A = (dist >= delta) & interior[..., None, None, None]
        vol_A = float(np.count_nonzero(A)) * cellw
        Vu = unfold(VectorField(g, proj.V.astype(np.float64)), eps).data[..., 0] > 0.5
        vol_W = float(np.count_nonzero(Vu & interior[..., None, None, None])) * cellw
        sm = unfold(m, eps)
        diff = np.sum((sm.data - targets[0].data) ** 2, axis=-1)
        proj_mass = float(np.sqrt(np.sum(diff[Vu & interior[..., None, None, None]]) * cellw))
        steps.append(RecoveryStep(eps, js[k], m, pre, shift, proj, d1, d2, d3, tn, sphere_res,
                                  float(np.count_nonzero(proj.V)) * dv, vol_A, vol_W, proj_mass))
    return RecoverySequence(steps, E, js, delta, seed)
