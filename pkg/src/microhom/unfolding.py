"""Periodic unfolding of grid fields and two-scale comparisons.

On a cell-centred macro grid whose spacing divides eps, the unfolding
S_eps(u)(x, z) = u(eps*floor(x/eps) + eps*z) is an exact re-blocking of the
sample array: cell index t and local index q recombine to the global index
t*n + q.  Cells cut by the box boundary are padded with zeros (zero
extension) and flagged as exterior.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .errors import AlignmentError, FieldFormatError, GridMismatchError, PreconditionError
from .fields import Grid, VectorField, _read_bytes, gradient
from .geometry import _ratio, cells_per_unit


@dataclass(frozen=True)
class CellLayout:
    eps: float
    omega: Grid
    cells: tuple  # number of (possibly partial) cells per axis
    n: tuple  # micro samples per cell
    t0: tuple  # lattice index of the first cell

    @property
    def padded(self):
        return tuple(c * k for c, k in zip(self.cells, self.n))

    def exterior(self) -> np.ndarray:
        full = [np.arange(self.cells[i]) < self.omega.n[i] // self.n[i] for i in range(3)]
        return ~(full[0][:, None, None] & full[1][None, :, None] & full[2][None, None, :])

    def cell_centers(self) -> np.ndarray:
        ax = [self.eps * (self.t0[i] + np.arange(self.cells[i]) + 0.5) for i in range(3)]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def micro_points(self) -> np.ndarray:
        return Grid.unit(self.n).points()

    def local_z(self):
        """Per macro axis, the cell coordinate z_i of every macro node (exact)."""
        return [((np.arange(self.omega.n[i]) % self.n[i]) + 0.5) / self.n[i] for i in range(3)]


def cell_layout(omega: Grid, eps) -> CellLayout:
    m = cells_per_unit(eps)
    eps = 1.0 / m
    if not all(omega.periodic):
        raise AlignmentError("unfolding needs a cell-centred macro grid (periodic flags set)")
    h = omega.spacing
    n = tuple(_ratio(eps, h[i], "eps / spacing") for i in range(3))
    t0 = []
    for i in range(3):
        q = omega.origin[i] / eps
        k = int(round(q))
        if abs(q - k) > 1e-9 * max(1.0, abs(q)):
            raise AlignmentError(f"box origin {omega.origin[i]} is not a lattice point of eps={eps}")
        t0.append(k)
    cells = tuple(-(-omega.n[i] // n[i]) for i in range(3))
    return CellLayout(eps, omega, cells, n, tuple(t0))


@dataclass(frozen=True, eq=False)
class TwoScaleField:
    """Samples on (cells of Omega) x (micro grid of Q).

    ``data`` has shape (M1, M2, M3, n1, n2, n3, c).  ``exterior[t]`` marks cells
    not contained in the macro box; they are excluded from norms by default.
    """

    eps: float
    omega: Grid
    data: np.ndarray
    exterior: np.ndarray
    t0: tuple = (0, 0, 0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 7:
            raise PreconditionError(f"two-scale data must be rank 7, got shape {arr.shape}")
        if self.exterior.shape != arr.shape[:3]:
            raise PreconditionError("exterior flags do not match the cell array")
        object.__setattr__(self, "data", arr)

    @property
    def cells(self):
        return self.data.shape[:3]

    @property
    def micro_n(self):
        return self.data.shape[3:6]

    @property
    def ncomp(self):
        return self.data.shape[6]

    @property
    def micro(self) -> Grid:
        return Grid.unit(self.micro_n)

    def with_data(self, data):
        return TwoScaleField(self.eps, self.omega, data, self.exterior, self.t0)

    def cell_weights(self, include_exterior=False) -> np.ndarray:
        w = np.full(self.cells, self.eps**3)
        if not include_exterior:
            w[self.exterior] = 0.0
        return w

    def l2_norm(self, include_exterior=False) -> float:
        wz = 1.0 / np.prod(self.micro_n)
        sq = np.sum(self.data * self.data, axis=(3, 4, 5, 6))
        return float(np.sqrt(np.sum(self.cell_weights(include_exterior) * sq) * wz))

    def cell_average(self) -> np.ndarray:
        """Mean over the micro grid, shape (M1, M2, M3, c)."""
        return self.data.mean(axis=(3, 4, 5))

    def __sub__(self, other):
        _check_layout(self, other)
        return self.with_data(self.data - other.data)

    def __add__(self, other):
        _check_layout(self, other)
        return self.with_data(self.data + other.data)


def _check_layout(a: TwoScaleField, b: TwoScaleField):
    if a.data.shape[:6] != b.data.shape[:6] or abs(a.eps - b.eps) > 1e-15 or a.omega != b.omega:
        raise GridMismatchError("two-scale fields have different layouts")


def unfold(u: VectorField, eps) -> TwoScaleField:
    """Exact unfolding S_eps(u) by index re-blocking (zero extension)."""
    lay = cell_layout(u.grid, eps)
    c = u.ncomp
    data = u.data
    if lay.padded != tuple(u.grid.n):
        pad = [(0, lay.padded[i] - u.grid.n[i]) for i in range(3)] + [(0, 0)]
        data = np.pad(data, pad)
    M, n = lay.cells, lay.n
    blocks = data.reshape(M[0], n[0], M[1], n[1], M[2], n[2], c).transpose(0, 2, 4, 1, 3, 5, 6)
    return TwoScaleField(lay.eps, u.grid, np.ascontiguousarray(blocks), lay.exterior(), lay.t0)


def fold(w: TwoScaleField) -> VectorField:
    """Inverse re-blocking: the oscillating macro field x -> w(x, {x/eps})."""
    M, n, c = w.cells, w.micro_n, w.ncomp
    lay = cell_layout(w.omega, w.eps)
    if tuple(lay.n) != tuple(n) or tuple(lay.cells) != tuple(M):
        raise GridMismatchError("two-scale micro grid does not match the macro spacing")
    arr = w.data.transpose(0, 3, 1, 4, 2, 5, 6).reshape(M[0] * n[0], M[1] * n[1], M[2] * n[2], c)
    N = w.omega.n
    return VectorField(w.omega, arr[: N[0], : N[1], : N[2]])


def isometry_residual(u: VectorField, eps, p=2, relative=False) -> float:
    """| ||u||_p^p - ||S_eps u||_p^p |, the second norm taken over Omega x Q."""
    su = unfold(u, eps)
    pw = np.sum(u.data * u.data, axis=-1) ** (p / 2)
    lhs = float(np.sum(u.grid.weights() * pw))
    qz = np.sum(su.data * su.data, axis=-1) ** (p / 2)
    rhs = float(np.sum(qz.sum(axis=(3, 4, 5)) * su.eps**3) / np.prod(su.micro_n))
    res = abs(lhs - rhs)
    return res / lhs if relative and lhs > 0 else res


def grad_z(w: TwoScaleField, spectral=False, periodic=True) -> TwoScaleField:
    """Micro gradient cell by cell, layout ``3 * i + j`` as in ``fields.gradient``.

    ``periodic`` treats each cell as a torus (wrap-around central differences);
    otherwise the stencil stays inside the cell and is one-sided at its faces.
    """
    d = w.data
    out = np.empty(d.shape[:6] + (d.shape[6], 3))
    for j in range(3):
        ax = 3 + j
        nj = d.shape[ax]
        h = 1.0 / nj
        if spectral:
            k = 2.0 * np.pi * sfft.fftfreq(nj, d=h)
            if nj % 2 == 0:
                k[nj // 2] = 0.0
            shape = [1] * d.ndim
            shape[ax] = nj
            out[..., j] = sfft.ifft(1j * k.reshape(shape) * sfft.fft(d, axis=ax), axis=ax).real
        elif periodic:
            out[..., j] = (np.roll(d, -1, axis=ax) - np.roll(d, 1, axis=ax)) / (2 * h)
        else:
            out[..., j] = np.gradient(d, h, axis=ax, edge_order=2)
    return w.with_data(out.reshape(d.shape[:6] + (3 * d.shape[6],)))


def gradient_commutation_residual(u: VectorField, eps, spectral=False) -> float:
    """|| S_eps(eps grad u) - grad_z S_eps(u) || over interior cells.

    The finite-difference variant compares cell-interior stencils only
    (micro indices 1 .. n-2), where both sides use the same nodes.
    """
    if spectral:
        left = unfold(gradient(u, spectral=True).scaled(eps), eps)
        right = grad_z(unfold(u, eps), spectral=True)
        return (left - right).l2_norm()
    left = unfold(gradient(u, interior=True).scaled(eps), eps)
    right = grad_z(unfold(u, eps), periodic=False)
    diff = (left.data - right.data)[:, :, :, 1:-1, 1:-1, 1:-1, :]
    w = left.cell_weights()[..., None, None, None] / np.prod(left.micro_n)
    return float(np.sqrt(np.sum(w * np.sum(diff * diff, axis=-1))))


def macro_micro_coords(grid: Grid, eps):
    """Macro node coordinates and the exact cell coordinate z = {x/eps} of each node."""
    lay = cell_layout(grid, eps)
    z = np.stack(np.meshgrid(*lay.local_z(), indexing="ij"), axis=-1)
    return grid.points(), z


def oscillating_sample(psi, grid: Grid, eps) -> np.ndarray:
    """Array of psi(x, {x/eps}) at the macro nodes."""
    x, z = macro_micro_coords(grid, eps)
    return np.asarray(psi(x, z), dtype=np.float64)


def two_scale_pairing(u: VectorField, psi, eps) -> float:
    """int_Omega u(x) . psi(x, x/eps) dx for a callable or a two-scale psi."""
    if isinstance(psi, TwoScaleField):
        vals = fold(psi).data
    else:
        vals = oscillating_sample(psi, u.grid, eps)
    if vals.shape != u.data.shape:
        vals = vals.reshape(u.data.shape)
    return float(np.sum(u.grid.weights() * np.sum(u.data * vals, axis=-1)))


def gauss_cell_nodes(order):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    return 0.5 * (xg + 1.0), 0.5 * wg


def cell_average_callable(f, lay: CellLayout, micro_n=None, order=2, ncomp=3):
    """Two-scale array of (1/eps^3) int_{cell t} f(x, z) dx for every micro z.

    Gauss-Legendre with ``order`` nodes per axis, exact for polynomials of
    degree 2*order - 1 in x.
    """
    micro_n = lay.n if micro_n is None else tuple(np.broadcast_to(micro_n, 3))
    zpts = Grid.unit(micro_n).points()
    xs, ws = gauss_cell_nodes(order)
    out = np.zeros(tuple(lay.cells) + tuple(micro_n) + (ncomp,))
    for t0 in range(lay.cells[0]):
        t = np.stack(
            np.meshgrid(t0 + lay.t0[0], lay.t0[1] + np.arange(lay.cells[1]), lay.t0[2] + np.arange(lay.cells[2]), indexing="ij"),
            axis=-1,
        )[0].astype(np.float64)  # (M2, M3, 3)
        acc = np.zeros(out.shape[1:])
        for a, (xa, wa) in enumerate(zip(xs, ws)):
            for b, (xb, wb) in enumerate(zip(xs, ws)):
                for c, (xc, wc) in enumerate(zip(xs, ws)):
                    x = lay.eps * (t + np.array([xa, xb, xc]))
                    X = np.broadcast_to(x[:, :, None, None, None, :], acc.shape[:5] + (3,))
                    Z = np.broadcast_to(zpts[None, None], acc.shape[:5] + (3,))
                    acc += (wa * wb * wc) * np.asarray(f(X, Z)).reshape(acc.shape)
        out[t0] = acc
    return out


def sample_two_scale(f, omega: Grid, eps, micro_n=None, ncomp=3, x_rule="center", order=2) -> TwoScaleField:
    """Tabulate a callable f(x, z) on cells x micro grid.

    ``x_rule='center'`` evaluates at cell centres, ``'gauss'`` averages over
    the cell.  ``micro_n`` defaults to the resolution implied by the grid.
    """
    lay = cell_layout(omega, eps)
    if x_rule == "gauss":
        data = cell_average_callable(f, lay, micro_n, order, ncomp)
    elif x_rule == "center":
        mn = lay.n if micro_n is None else tuple(np.broadcast_to(micro_n, 3))
        xc = lay.cell_centers()
        zp = Grid.unit(mn).points()
        data = np.empty(tuple(lay.cells) + tuple(mn) + (ncomp,))
        for i in range(lay.cells[0]):
            X = np.broadcast_to(xc[i][:, :, None, None, None, :], data.shape[1:6] + (3,))
            Z = np.broadcast_to(zp[None, None], data.shape[1:6] + (3,))
            data[i] = np.asarray(f(X, Z)).reshape(data.shape[1:])
    else:
        raise PreconditionError(f"unknown x_rule {x_rule!r}")
    return TwoScaleField(lay.eps, omega, data, lay.exterior(), lay.t0)


def strong_ts_distance(u: VectorField, target: TwoScaleField, eps, include_exterior=False) -> float:
    """|| S_eps(u) - target ||_{L^2(Omega x Q)} over interior cells."""
    su = unfold(u, eps)
    _check_layout(su, target)
    return (su - target).l2_norm(include_exterior)


def unfolded_pairing(u, psi, eps=None, order=2) -> float:
    """int int S_eps(u)(x, z) . psi(x, z) dz dx over interior cells.

    ``u`` is a grid field (unfolded here) or already a two-scale field; psi is
    a callable averaged over each cell in x with Gauss quadrature.
    """
    su = u if isinstance(u, TwoScaleField) else unfold(u, eps)
    lay = cell_layout(su.omega, su.eps)
    pv = cell_average_callable(psi, lay, su.micro_n, order, su.ncomp)
    w = su.cell_weights()[..., None, None, None] / np.prod(su.micro_n)
    return float(np.sum(w * np.sum(su.data * pv, axis=-1)))


def limit_pairing(target, psi, omega: Grid, eps, micro_n, order=2) -> float:
    """int_Omega int_Q target(x, z) . psi(x, z) on the cells of ``eps`` (interior cells)."""
    lay = cell_layout(omega, eps)
    prod = lambda x, z: np.sum(np.asarray(target(x, z)) * np.asarray(psi(x, z)), axis=-1, keepdims=True)
    vals = cell_average_callable(prod, lay, micro_n, order, 1)
    w = np.full(lay.cells, lay.eps**3)
    w[lay.exterior()] = 0.0
    return float(np.sum(w[..., None, None, None] * vals[..., 0]) / np.prod(micro_n))


def jensen_gap(w: TwoScaleField) -> float:
    """||<w>_Q||^2 - ||w||^2 over interior cells (must be <= 0)."""
    avg = w.cell_average()
    cw = w.cell_weights()
    return float(np.sum(cw * np.sum(avg * avg, axis=-1)) - w.l2_norm() ** 2)


# ---------------------------------------------------------------------------
# TS2F: two-scale extension of TSF1
#
#   bytes 0-3   magic b"TS2F"
#   byte  4     ncomp (u8)
#   byte  5     reserved (0)
#   6..17       cells M1 M2 M3 (u32)
#   18..29      micro n1 n2 n3 (u32)
#   30..37      eps (f64)
#   38..61      macro origin (3 x f64)
#   62..85      macro extent (3 x f64)
#   86..97      macro n (3 x u32)
#   then M1*M2*M3 exterior flags (u8), then samples (f64 LE, component innermost)

TS2F_HEADER = struct.Struct("<4sBB3I3Id3d3d3I")


def write_two_scale(path, w: TwoScaleField) -> None:
    from .errors import FieldIOError

    if not path:
        raise FieldIOError("empty path")
    hdr = TS2F_HEADER.pack(b"TS2F", w.ncomp, 0, *w.cells, *w.micro_n, w.eps, *w.omega.origin, *w.omega.extent, *w.omega.n)
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(w.exterior.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(w.data, dtype="<f8").tobytes())


def read_two_scale(path) -> TwoScaleField:
    raw = _read_bytes(path)
    if len(raw) < 4 or raw[:4] != b"TS2F":
        raise FieldFormatError("bad magic, expected TS2F", 0)
    if len(raw) < TS2F_HEADER.size:
        raise FieldFormatError("truncated header", len(raw))
    vals = TS2F_HEADER.unpack_from(raw)
    ncomp = vals[1]
    cells = vals[3:6]
    micro = vals[6:9]
    eps = vals[9]
    origin, extent, n = vals[10:13], vals[13:16], vals[16:19]
    ncell = int(np.prod(cells))
    count = ncell * int(np.prod(micro)) * ncomp
    if count == 0:
        raise FieldFormatError("zero-sized dimension", 4)
    if count > 2**34:
        raise FieldFormatError("dimension overflow", 6)
    need = TS2F_HEADER.size + ncell + 8 * count
    if len(raw) != need:
        raise FieldFormatError(f"payload size mismatch, need {need} bytes", min(len(raw), need))
    ext = np.frombuffer(raw, dtype=np.uint8, count=ncell, offset=TS2F_HEADER.size).astype(bool).reshape(cells)
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=TS2F_HEADER.size + ncell)
    omega = Grid(origin, extent, n, (True, True, True))
    lay = cell_layout(omega, eps)
    return TwoScaleField(eps, omega, data.reshape(tuple(cells) + tuple(micro) + (ncomp,)).copy(), ext, lay.t0)


def pairing_dictionary():
    """Test functions psi(x, z) for weak two-scale pairings, as (name, callable).

    Each has x-dependence through at most two coordinates and is periodic in z.
    """
    tau = 2.0 * np.pi

    def make(fx, fz, comp):
        e = np.eye(3)[comp]

        def psi(x, z):
            x = np.asarray(x)
            z = np.asarray(z)
            return (fx(x) * fz(z))[..., None] * e

        return psi

    one = lambda a: np.ones(a.shape[:-1])
    return [
        ("const_e1", make(one, one, 0)),
        ("const_e3", make(one, one, 2)),
        ("x1_e3", make(lambda x: x[..., 0], one, 2)),
        ("cos_z1_e3", make(one, lambda z: np.cos(tau * z[..., 0]), 2)),
        ("x2_sin_z3_e1", make(lambda x: x[..., 1], lambda z: np.sin(tau * z[..., 2]), 0)),
        ("x1x3_cos_z2_e2", make(lambda x: x[..., 0] * x[..., 2], lambda z: np.cos(tau * z[..., 1]), 1)),
        ("sinx2_cos2z_e3", make(lambda x: np.sin(np.pi * x[..., 1]), lambda z: np.cos(tau * (z[..., 0] + z[..., 1])), 2)),
    ]
