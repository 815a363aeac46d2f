"""Perforated periodicity cell and its eps-periodic copies inside a macro box."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import AlignmentError, GeometryError
from .fields import Grid

EPS_TOL = 1e-9


def _as_box(box):
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in box)
    return tuple(float(x) for x in lo), tuple(float(x) for x in hi)


def hole_indicator(holes, z) -> np.ndarray:
    """True where ``z`` (shape (..., 3), taken modulo 1) lies in an open hole box."""
    z = np.mod(np.asarray(z, dtype=np.float64), 1.0)
    out = np.zeros(z.shape[:-1], dtype=bool)
    for lo, hi in holes:
        inside = np.ones(z.shape[:-1], dtype=bool)
        for i in range(3):
            inside &= (z[..., i] > lo[i]) & (z[..., i] < hi[i])
        out |= inside
    return out


def hole_depth(holes, z) -> np.ndarray:
    """Depth of ``z`` inside the union of holes (<= 0 outside).

    For each box the depth is the distance to its boundary; for the union we
    take the maximum over boxes, which is exact for disjoint boxes and a lower
    bound for the true distance to the complement otherwise.
    """
    z = np.mod(np.asarray(z, dtype=np.float64), 1.0)
    best = np.full(z.shape[:-1], -np.inf)
    for lo, hi in holes:
        d = np.full(z.shape[:-1], np.inf)
        for i in range(3):
            d = np.minimum(d, np.minimum(z[..., i] - lo[i], hi[i] - z[..., i]))
        best = np.maximum(best, d)
    return best


def edge_weights(chi1, periodic=True):
    """Matrix (stiff) and hole (soft) weights of the grid edges (p, p + e_j).

    An edge is stiff when both endpoints are matrix nodes, soft otherwise.
    Mixed edges straddle the interface; their matrix half is lumped onto the
    stiff edge(s) adjacent along the same axis, each receiving 1/2.  With
    interfaces half-way between nodes this makes the stiff weights sum to the
    matrix volume, while the stiff energy still only reads matrix values.
    Without ``periodic`` the edges leaving the last node do not exist.
    """
    c1 = np.asarray(chi1, dtype=bool)
    stiff, soft = [], []
    for ax in range(3):
        nxt = np.roll(c1, -1, axis=ax)
        exists = np.ones(c1.shape, dtype=bool)
        if not periodic:
            idx = [slice(None)] * 3
            idx[ax] = -1
            exists[tuple(idx)] = False
        st = c1 & nxt & exists
        mixed = (c1 ^ nxt) & exists
        # without periodicity `mixed` is False on the last slab, so the rolls
        # below never bring in contributions from across the box
        w = st * (1.0 + 0.5 * np.roll(mixed, -1, axis=ax) + 0.5 * np.roll(mixed, 1, axis=ax))
        stiff.append(w)
        soft.append((exists & ~st).astype(np.float64))
    return stiff, soft


@dataclass(frozen=True, eq=False)
class CellGeometry:
    """Unit cell Q = (0,1)^3 with hole Q0 (finite union of open boxes).

    ``chi0``/``chi1`` are the hole/matrix indicators at the midpoints of the
    periodic micro grid.
    """

    holes: tuple
    grid: Grid
    chi0: np.ndarray

    @property
    def n(self):
        return self.grid.n

    @property
    def chi1(self) -> np.ndarray:
        return ~self.chi0

    @property
    def hole_volume(self) -> float:
        return float(np.count_nonzero(self.chi0)) * self.grid.cell_volume

    @property
    def matrix_volume(self) -> float:
        return 1.0 - self.hole_volume

    def indicator(self, z):
        return hole_indicator(self.holes, z)

    def depth(self, z):
        return hole_depth(self.holes, z)

    @property
    def inradius(self) -> float:
        """Largest half-width among the hole boxes."""
        if not self.holes:
            return 0.0
        return max(0.5 * min(h - l for l, h in zip(lo, hi)) for lo, hi in self.holes)

    def resample(self, n):
        return build_cell(self.holes, n) if self.holes else full_cell(n)


def build_cell(holes, n) -> CellGeometry:
    """Validate the hole boxes and tabulate the indicators on an n^3 grid."""
    holes = tuple(_as_box(b) for b in holes)
    if not holes:
        raise GeometryError("the hole Q0 must be non-empty")
    for lo, hi in holes:
        if any(l >= h for l, h in zip(lo, hi)):
            raise GeometryError(f"degenerate hole box {lo} - {hi}")
        if min(lo) <= 0.0 or max(hi) >= 1.0:
            raise GeometryError(f"hole box {lo} - {hi} must lie strictly inside (0,1)^3")
    grid = Grid.unit(n, periodic=True)
    chi0 = hole_indicator(holes, grid.points())
    cell = CellGeometry(holes, grid, chi0)
    if not 0.0 < cell.hole_volume < 1.0:
        raise GeometryError(f"hole volume {cell.hole_volume} not resolved on a {n}^3 grid")
    return cell


def full_cell(n) -> CellGeometry:
    """Cell without a hole; only used to check solvers against closed forms."""
    grid = Grid.unit(n, periodic=True)
    return CellGeometry((), grid, np.zeros(grid.n, dtype=bool))


def cells_per_unit(eps) -> int:
    """Return M with eps = 1/M, or raise with a suggestion."""
    eps = float(eps)
    if not eps > 0:
        raise AlignmentError("eps must be positive")
    m = int(round(1.0 / eps))
    if m < 1 or abs(m * eps - 1.0) > EPS_TOL:
        near = Fraction(eps).limit_denominator(64)
        raise AlignmentError(
            f"eps={eps} is not of the form 1/M for an integer M (closest: 1/{max(1, round(1 / eps))}, {near})"
        )
    return m


def _ratio(a, b, what):
    q = a / b
    k = int(round(q))
    if k < 1 or abs(q - k) > EPS_TOL * max(1.0, abs(q)):
        raise AlignmentError(f"{what}: {a} is not an integer multiple of {b}")
    return k


@dataclass(frozen=True, eq=False)
class CompositeGeometry:
    """eps-periodic perforation of the macro grid ``omega``.

    ``lattice`` lists the translates t with eps*(t + closure(Q0)) inside the
    open box; ``cell_in_lattice`` is the same set as a boolean array indexed by
    ``t - t0``.  ``chi0`` is the perforation indicator on the macro nodes.
    """

    cell: CellGeometry
    eps: float
    omega: Grid
    micro_n: tuple
    t0: tuple
    cell_in_lattice: np.ndarray
    chi0: np.ndarray

    @property
    def lattice(self) -> np.ndarray:
        idx = np.argwhere(self.cell_in_lattice)
        return idx + np.asarray(self.t0)

    @property
    def chi1(self) -> np.ndarray:
        return ~self.chi0

    @property
    def hole_volume(self) -> float:
        return float(np.count_nonzero(self.chi0)) * self.omega.cell_volume

    @property
    def micro_grid(self) -> Grid:
        return Grid.unit(self.micro_n, periodic=True)

    @property
    def micro_chi0(self) -> np.ndarray:
        return self.cell.indicator(self.micro_grid.points())

    def edge_weights(self):
        """(stiff, soft) edge weights on the macro grid, see :func:`edge_weights`."""
        return edge_weights(self.chi1, periodic=False)


def build_composite(cell: CellGeometry, eps, omega: Grid, strict=True) -> CompositeGeometry:
    """Place eps-scaled copies of the hole into the macro box.

    With ``strict`` the box has to be (0,1)^3 with n divisible by 1/eps.  The
    relaxed mode accepts any box whose origin is a lattice point and whose
    spacing divides eps.  The macro grid must be cell-centred (all axes
    flagged periodic) so that grid nodes never sit on cell faces.
    """
    m = cells_per_unit(eps)
    eps = 1.0 / m
    if not all(omega.periodic):
        raise AlignmentError("the macro grid must be cell-centred (periodic flags set)")
    if strict:
        if omega.origin != (0.0, 0.0, 0.0) or omega.extent != (1.0, 1.0, 1.0):
            raise AlignmentError("strict mode requires the unit box (0,1)^3")
        if any(k % m for k in omega.n):
            raise AlignmentError(f"grid size {omega.n} not divisible by 1/eps = {m}")
    h = omega.spacing
    micro = tuple(_ratio(eps, h[i], "eps / spacing") for i in range(3))
    t0 = []
    for i in range(3):
        q = omega.origin[i] / eps
        k = int(round(q))
        if abs(q - k) > EPS_TOL * max(1.0, abs(q)):
            raise AlignmentError(f"box origin {omega.origin[i]} is not a lattice point of eps={eps}")
        t0.append(k)
    ncell = [-(-omega.n[i] // micro[i]) for i in range(3)]

    # translates whose closed hole copies sit inside the open box
    inside = np.ones(ncell, dtype=bool)
    if cell.holes:
        T = np.meshgrid(*(np.arange(t0[i], t0[i] + ncell[i]) for i in range(3)), indexing="ij")
        for lo, hi in cell.holes:
            for i in range(3):
                a = omega.origin[i]
                b = a + omega.extent[i]
                inside &= (eps * (T[i] + lo[i]) > a) & (eps * (T[i] + hi[i]) < b)
    else:
        inside[:] = False

    # macro indicator from node indices: cell t and position z inside it
    idx = [np.arange(omega.n[i]) for i in range(3)]
    tloc = [ix // micro[i] for i, ix in enumerate(idx)]
    zc = [((ix % micro[i]) + 0.5) / micro[i] for i, ix in enumerate(idx)]
    zhole = np.zeros(omega.n, dtype=bool)
    if cell.holes:
        Z = np.stack(np.meshgrid(*zc, indexing="ij"), axis=-1)
        zhole = cell.indicator(Z)
    incell = inside[np.ix_(*tloc)]
    chi0 = zhole & incell
    return CompositeGeometry(cell, eps, omega, micro, tuple(t0), inside, chi0)


def unfold_mask_check(geom: CompositeGeometry, include_exterior=False, per_cell=False):
    """Compare the unfolded perforation indicator with the cell indicator.

    Returns the max deviation over cells lying inside the box (0 when the
    geometry is consistent).  ``include_exterior`` also scans cells cut by the
    box boundary, where the zero extension makes the deviation 1 whenever the
    cell would carry a hole.  ``per_cell`` returns the per-cell array instead.
    """
    from .fields import VectorField
    from .unfolding import unfold

    chi = VectorField(geom.omega, geom.chi0.astype(np.float64))
    u = unfold(chi, geom.eps)
    ref = geom.micro_chi0.astype(np.float64)
    dev = np.max(np.abs(u.data[..., 0] - ref), axis=(3, 4, 5))
    if per_cell:
        return dev
    keep = np.ones(dev.shape, dtype=bool) if include_exterior else ~u.exterior
    return float(dev[keep].max()) if np.any(keep) else 0.0
