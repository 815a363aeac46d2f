"""Periodic cell problems: Poisson, the cell stray field and the homogenised
exchange density f_hom.

Two discretisations of the perforated cell quadratic are provided:

``fd``
    forward differences on the edges of the periodic micro grid; only edges
    with both endpoints in the matrix carry weight, the interface halves of
    mixed edges being lumped onto their neighbours (see
    :func:`microhom.geometry.edge_weights`).
    Well conditioned (PCG needs O(10) iterations) and consistent with the
    macro exchange energies in :mod:`microhom.energies`.
``spectral``
    trigonometric collocation: spectral derivatives, matrix indicator applied
    pointwise.  Accurate for smooth data but poorly conditioned when the hole
    is resolved by many points.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import linalg as sla
from scipy import sparse

from . import _kernels
from .errors import ConvergenceError, PreconditionError, SolvabilityError, SphereConstraintError
from .fields import Grid, VectorField
from .geometry import CellGeometry, edge_weights

DISCRETIZATIONS = ("fd", "spectral")


def wavenumbers(n, drop_nyquist=False):
    k = 2.0 * np.pi * sfft.fftfreq(n, d=1.0 / n)
    if drop_nyquist and n % 2 == 0:
        k = k.copy()
        k[n // 2] = 0.0
    return k


def _kgrid(shape, drop_nyquist=False):
    ks = [wavenumbers(n, drop_nyquist) for n in shape]
    return np.meshgrid(*ks, indexing="ij")


def _check_cell_grid(grid: Grid):
    if not all(grid.periodic) or grid.origin != (0.0, 0.0, 0.0) or grid.extent != (1.0, 1.0, 1.0):
        raise PreconditionError("cell fields must live on the periodic unit cell grid")


@dataclass(frozen=True, eq=False)
class CellPotential:
    grid: Grid
    data: np.ndarray
    residual: float

    def as_field(self):
        return VectorField(self.grid, self.data)


def solve_cell_poisson(rhs: VectorField, tol=1e-10) -> CellPotential:
    """Mean-free periodic solution of -Lap r = rhs (componentwise)."""
    _check_cell_grid(rhs.grid)
    f = rhs.data
    mean = f.mean(axis=(0, 1, 2))
    scale = max(1.0, float(np.sqrt(np.mean(f * f))))
    if np.max(np.abs(mean)) > tol * scale:
        raise SolvabilityError(f"right-hand side has mean {mean}, must be zero", mean)
    k1, k2, k3 = _kgrid(rhs.grid.n)
    K2 = k1**2 + k2**2 + k3**2
    K2[0, 0, 0] = 1.0
    fh = sfft.fftn(f, axes=(0, 1, 2))
    rh = fh / K2[..., None]
    rh[0, 0, 0] = 0.0
    r = sfft.ifftn(rh, axes=(0, 1, 2)).real
    lap = sfft.ifftn(rh * K2[..., None], axes=(0, 1, 2)).real
    resid = float(np.sqrt(np.mean((lap - (f - mean)) ** 2)) / scale)
    return CellPotential(rhs.grid, r, resid)


def hdz_array(m, axes=(-4, -3, -2)):
    """Cell stray field h = grad r, -Lap r = div m, on the periodic micro axes.

    ``m`` carries its vector components on the last axis; the three micro
    axes are given by ``axes``.  Batched over any other leading axes.  Nyquist
    wavenumbers are set to zero so the result stays an exact real gradient.
    """
    m = np.asarray(m, dtype=np.float64)
    shape = [m.shape[a] for a in axes]
    ks = _kgrid(shape, drop_nyquist=True)
    nd = m.ndim
    ax = [a % nd for a in axes]
    bshape = [1] * nd
    for a, n in zip(ax, shape):
        bshape[a] = n
    bshape[-1] = 1
    K = [k.reshape([shape[0] if i == ax[0] else shape[1] if i == ax[1] else shape[2] if i == ax[2] else 1 for i in range(nd - 1)]) for k in ks]
    K2 = K[0] ** 2 + K[1] ** 2 + K[2] ** 2
    inv = np.where(K2 > 0, 1.0 / np.where(K2 > 0, K2, 1.0), 0.0)
    mh = sfft.fftn(m, axes=ax)
    kdotm = K[0] * mh[..., 0] + K[1] * mh[..., 1] + K[2] * mh[..., 2]
    kdotm *= inv
    h = np.empty_like(m)
    for j in range(3):
        h[..., j] = sfft.ifftn(-K[j] * kdotm, axes=ax).real
    return h


def hdz(m: VectorField) -> VectorField:
    """Cell stray field of a periodic magnetisation slice m(x, .)."""
    _check_cell_grid(m.grid)
    if m.ncomp != 3:
        raise PreconditionError("hdz needs a 3-vector field")
    return VectorField(m.grid, hdz_array(m.data, axes=(0, 1, 2)))


def spectral_curl(h: VectorField) -> VectorField:
    k = _kgrid(h.grid.n, drop_nyquist=True)
    hh = sfft.fftn(h.data, axes=(0, 1, 2))
    c = np.empty_like(h.data)
    for i in range(3):
        a, b = (i + 1) % 3, (i + 2) % 3
        c[..., i] = sfft.ifftn(1j * (k[a] * hh[..., b] - k[b] * hh[..., a]), axes=(0, 1, 2)).real
    return VectorField(h.grid, c)


def spectral_div(m: VectorField) -> np.ndarray:
    k = _kgrid(m.grid.n, drop_nyquist=True)
    mh = sfft.fftn(m.data, axes=(0, 1, 2))
    return sfft.ifftn(1j * (k[0] * mh[..., 0] + k[1] * mh[..., 1] + k[2] * mh[..., 2])).real


# ---------------------------------------------------------------------------
# tangent frame


@dataclass(frozen=True)
class TangentBasis:
    s: np.ndarray
    t1: np.ndarray
    t2: np.ndarray

    def matrix(self):
        """Rows t1, t2."""
        return np.stack([self.t1, self.t2])


def tangent_basis(s) -> TangentBasis:
    """Orthonormal frame of T_s S^2: t1 = unit(e_k x s), k = argmin |s_k|; t2 = s x t1."""
    s = np.asarray(s, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(s)) or abs(np.linalg.norm(s) - 1.0) > 1e-12:
        raise SphereConstraintError(f"|s| = {np.linalg.norm(s)} is not 1")
    k = int(np.argmin(np.abs(s)))
    e = np.zeros(3)
    e[k] = 1.0
    t1 = np.cross(e, s)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(s, t1)
    return TangentBasis(s.copy(), t1, t2)


# ---------------------------------------------------------------------------
# perforated cell quadratic


def pcg(apply, b, precond, tol=1e-10, maxiter=2000, x0=None):
    """Preconditioned CG with fixed-order reductions; returns (x, iters, history)."""
    dot = lambda u, v: float(np.sum(u * v))
    bn = np.sqrt(dot(b, b))
    x = np.zeros_like(b) if x0 is None else x0.copy()
    if bn == 0.0:
        return x, 0, [0.0]
    r = b - apply(x) if x0 is not None else b.copy()
    z = precond(r)
    p = z.copy()
    rz = dot(r, z)
    hist = [np.sqrt(dot(r, r)) / bn]
    it = 0
    while hist[-1] > tol:
        if it >= maxiter:
            raise ConvergenceError(f"PCG stalled at relative residual {hist[-1]:.3e} after {it} iterations", hist)
        Ap = apply(p)
        pAp = dot(p, Ap)
        if pAp <= 0:
            raise ConvergenceError("PCG breakdown: operator not positive on search direction", hist)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        hist.append(np.sqrt(dot(r, r)) / bn)
        z = precond(r)
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, hist


class CellProblem:
    """Quadratic form E(g, phi) = 1/2 sum |g + D phi|^2 over the matrix part of Q."""

    def __init__(self, cell: CellGeometry, discretization="fd"):
        if discretization not in DISCRETIZATIONS:
            raise PreconditionError(f"unknown discretization {discretization!r}")
        self.cell = cell
        self.discretization = discretization
        self.n = cell.n
        self.h = 1.0 / np.asarray(self.n, dtype=np.float64)
        self.dv = float(np.prod(self.h))
        chi1 = cell.chi1.astype(np.float64)
        if discretization == "fd":
            self.W = edge_weights(cell.chi1, periodic=True)[0]
            k = _kgrid(self.n)
            sym = sum((2.0 - 2.0 * np.cos(k[j] / self.n[j])) * self.n[j] ** 2 for j in range(3))
        else:
            self.W = [chi1, chi1, chi1]
            self.k = _kgrid(self.n, drop_nyquist=True)
            sym = self.k[0] ** 2 + self.k[1] ** 2 + self.k[2] ** 2
        self.null = sym == 0
        self.inv_sym = np.where(self.null, 0.0, 1.0 / np.where(self.null, 1.0, sym))
        self._ax = (-3, -2, -1)

    # difference operators on arrays whose last three axes are the cell grid
    def D(self, phi, j):
        ax = phi.ndim - 3 + j
        if self.discretization == "fd":
            return (np.roll(phi, -1, axis=ax) - phi) * self.n[j]
        kj = self.k[j]
        return sfft.ifftn(1j * kj * sfft.fftn(phi, axes=self._ax), axes=self._ax).real

    def DT(self, f, j):
        ax = f.ndim - 3 + j
        if self.discretization == "fd":
            return (np.roll(f, 1, axis=ax) - f) * self.n[j]
        return -self.D(f, j)

    def apply(self, phi):
        if self.discretization == "fd" and len(set(self.n)) == 1:
            flat = phi.reshape((-1,) + tuple(self.n))
            out = np.stack([_kernels.edge_apply(p, *self.W, float(self.n[0]) ** 2) for p in flat])
            return out.reshape(phi.shape)
        if self.discretization == "fd":
            return sum(self.DT(self.W[j] * self.D(phi, j), j) for j in range(3))
        ph = sfft.fftn(phi, axes=self._ax)
        acc = 0.0
        for j in range(3):
            dj = sfft.ifftn(1j * self.k[j] * ph, axes=self._ax).real
            acc = acc + 1j * self.k[j] * sfft.fftn(self.W[j] * dj, axes=self._ax)
        return -sfft.ifftn(acc, axes=self._ax).real

    def rhs(self, g):
        """-sum_j D_j^T (W_j g_j) for macro vectors g of shape (..., 3)."""
        g = np.asarray(g, dtype=np.float64)
        out = 0.0
        for j in range(3):
            gj = g[..., j].reshape(g.shape[:-1] + (1, 1, 1))
            out = out - self.DT(self.W[j] * gj, j)
        return np.asarray(out)

    def precondition(self, r):
        rh = sfft.fftn(r, axes=self._ax)
        return sfft.ifftn(rh * self.inv_sym, axes=self._ax).real

    def gauge(self, phi):
        """Remove the kernel of the unmasked difference operator (constants; Nyquist
        checkerboards for the spectral scheme)."""
        ph = sfft.fftn(phi, axes=self._ax)
        ph = np.where(self.null, 0.0, ph)
        return sfft.ifftn(ph, axes=self._ax).real

    def solve(self, g, tol=1e-10, maxiter=None):
        b = self.rhs(g)
        if maxiter is None:
            maxiter = 400 if self.discretization == "fd" else 20000
        x, it, hist = pcg(self.apply, b, self.precondition, tol, maxiter)
        return self.gauge(x), it, hist

    @property
    def stiff_volume(self) -> np.ndarray:
        """Discrete measure of the matrix seen by each derivative direction."""
        return np.array([float(np.sum(self.W[j])) * self.dv for j in range(3)])

    def energy(self, xi, phi3):
        """1/2 sum_j sum W_j sum_i (xi_ij + D_j phi_i)^2 for a vector corrector."""
        xi = np.asarray(xi, dtype=np.float64)
        comp = np.moveaxis(np.asarray(phi3, dtype=np.float64), -1, 0)  # (3, n, n, n)
        tot = 0.0
        for j in range(3):
            d = self.D(comp, j) + xi[:, j].reshape(3, 1, 1, 1)
            tot += float(np.sum(self.W[j] * np.sum(d * d, axis=0)))
        return 0.5 * tot * self.dv


_PROBLEMS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def cell_problem(cell: CellGeometry, discretization="fd") -> CellProblem:
    per = _PROBLEMS.setdefault(cell, {})
    if discretization not in per:
        per[discretization] = CellProblem(cell, discretization)
    return per[discretization]


@dataclass(frozen=True, eq=False)
class Corrector:
    """Tangent-valued cell corrector phi = c_1 t1 + c_2 t2."""

    grid: Grid
    basis: TangentBasis
    coeffs: np.ndarray  # (2, n1, n2, n3)

    @property
    def data(self):
        return self.coeffs[0][..., None] * self.basis.t1 + self.coeffs[1][..., None] * self.basis.t2

    def as_field(self):
        return VectorField(self.grid, self.data)


@dataclass(frozen=True, eq=False)
class FhomResult:
    value: float
    corrector: Corrector
    iterations: int
    residual: float
    residual_history: list = field(default_factory=list)


def _check_xi(xi):
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (3, 3) or not np.all(np.isfinite(xi)):
        raise PreconditionError("xi must be a finite 3x3 matrix")
    return xi


def fhom(s, xi, cell: CellGeometry, discretization="fd", tol=1e-10, maxiter=None) -> FhomResult:
    """Minimise the perforated cell energy over tangent-valued periodic correctors.

    The corrector is sought as c_1 t1 + c_2 t2 and both coefficient fields are
    updated by one block PCG; the returned value is the energy of the
    assembled 3-vector corrector.
    """
    basis = tangent_basis(s)
    xi = _check_xi(xi)
    prob = cell_problem(cell, discretization)
    g = np.stack([xi.T @ basis.t1, xi.T @ basis.t2])
    coeffs, it, hist = prob.solve(g, tol, maxiter)
    corr = Corrector(cell.grid, basis, coeffs)
    value = prob.energy(xi, corr.data)
    return FhomResult(value, corr, it, hist[-1], hist)


@dataclass(frozen=True, eq=False)
class CellTensor:
    """Homogenised data of one cell discretisation.

    f_hom(s, xi) = 1/2 sum_j q_j (xi^T s)_j^2 + 1/2 tr(A xi^T (I - s s^T) xi)
    """

    A: np.ndarray
    q: np.ndarray
    correctors: np.ndarray  # (3, n1, n2, n3), chi^j for g = e_j
    discretization: str
    iterations: int

    def fhom(self, s, xi):
        return fhom_from_tensor(s, xi, self)


def cell_tensor(cell: CellGeometry, discretization="fd", tol=1e-11) -> CellTensor:
    prob = cell_problem(cell, discretization)
    chi, it, _ = prob.solve(np.eye(3), tol)
    A = np.empty((3, 3))
    grads = []
    for k in range(3):
        grads.append([prob.D(chi[k], l) + (1.0 if l == k else 0.0) for l in range(3)])
    for j in range(3):
        for k in range(3):
            A[j, k] = sum(float(np.sum(prob.W[l] * grads[j][l] * grads[k][l])) for l in range(3)) * prob.dv
    A = 0.5 * (A + A.T)
    return CellTensor(A, prob.stiff_volume, chi, discretization, it)


def fhom_from_tensor(s, xi, tensor: CellTensor):
    """Vectorised f_hom: s of shape (..., 3), xi of shape (..., 3, 3)."""
    s = np.asarray(s, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    b = np.einsum("...ij,...i->...j", xi, s)
    normal = 0.5 * np.sum(tensor.q * b * b, axis=-1)
    # xi^T (I - s s^T) xi = xi^T xi - b b^T
    G = np.einsum("...ij,...ik->...jk", xi, xi) - b[..., :, None] * b[..., None, :]
    tangent = 0.5 * np.einsum("jk,...jk->...", tensor.A, G)
    return normal + tangent


def corrector_field(s, grad_m, tensor: CellTensor):
    """psi(z) = sum_j chi^j(z) (d_j m), shape (n1, n2, n3, 3) for one macro point.

    For tangent columns d_j m this equals the minimiser of the tangent-valued
    cell problem, independently of the tangent frame.
    """
    grad_m = np.asarray(grad_m, dtype=np.float64)
    return np.einsum("jabc,ij->abci", tensor.correctors, grad_m)


def unconstrained_minimum(xi, cell: CellGeometry, discretization="fd", tol=1e-10) -> float:
    """min over unconstrained R^3-valued correctors (each row decouples)."""
    xi = _check_xi(xi)
    prob = cell_problem(cell, discretization)
    phi, _, _ = prob.solve(xi, tol)
    return prob.energy(xi, np.moveaxis(phi, 0, -1))


class FhomCache:
    """Memo for pointwise f_hom solves keyed on (s, xi) rounded to ``digits``."""

    def __init__(self, cell, discretization="fd", digits=12, tol=1e-10):
        self.cell, self.discretization, self.digits, self.tol = cell, discretization, digits, tol
        self.store = {}
        self.hits = 0
        self.misses = 0

    def __call__(self, s, xi):
        key = tuple(np.round(np.concatenate([np.ravel(s), np.ravel(xi)]), self.digits))
        if key in self.store:
            self.hits += 1
            return self.store[key]
        self.misses += 1
        val = fhom(s, xi, self.cell, self.discretization, self.tol).value
        self.store[key] = val
        return val


# ---------------------------------------------------------------------------
# dense oracle


def _shift_matrix(n, ax):
    idx = np.arange(int(np.prod(n))).reshape(n)
    nb = np.roll(idx, -1, axis=ax).ravel()
    N = idx.size
    return sparse.csr_matrix((np.ones(N), (np.arange(N), nb)), shape=(N, N))


def _spectral_diff_1d(n):
    """Dense periodic spectral differentiation on [0, 1) with n points."""
    D = np.zeros((n, n))
    i = np.arange(n)
    diff = i[:, None] - i[None, :]
    off = diff != 0
    if n % 2 == 0:
        D[off] = 0.5 * (-1.0) ** diff[off] / np.tan(np.pi * diff[off] / n)
    else:
        D[off] = 0.5 * (-1.0) ** diff[off] / np.sin(np.pi * diff[off] / n)
    return 2.0 * np.pi * D


def _dense_difference_ops(cell, discretization):
    n = cell.n
    N = int(np.prod(n))
    ops = []
    if discretization == "fd":
        for j in range(3):
            ops.append((_shift_matrix(n, j) - sparse.identity(N, format="csr")) * n[j])
    else:
        eye = [sparse.identity(k, format="csr") for k in n]
        mats = [sparse.csr_matrix(_spectral_diff_1d(k)) for k in n]
        ops.append(sparse.kron(sparse.kron(mats[0], eye[1]), eye[2]).tocsr())
        ops.append(sparse.kron(sparse.kron(eye[0], mats[1]), eye[2]).tocsr())
        ops.append(sparse.kron(sparse.kron(eye[0], eye[1]), mats[2]).tocsr())
    return ops


def fhom_dense_oracle(s, xi, cell: CellGeometry, discretization="fd"):
    """f_hom by assembling the normal equations as dense matrices and a Cholesky solve.

    Intended for small grids (n <= 16).  Returns (value, corrector coefficients).
    """
    basis = tangent_basis(s)
    xi = _check_xi(xi)
    T = basis.matrix()
    if np.max(np.abs(T @ T.T - np.eye(2))) > 1e-13:
        raise PreconditionError("tangent frame not orthonormal")
    n = cell.n
    N = int(np.prod(n))
    dv = 1.0 / N
    chi1 = cell.chi1.ravel().astype(np.float64)
    D = _dense_difference_ops(cell, discretization)
    if discretization == "fd":
        W = [w.ravel() for w in edge_weights(cell.chi1, periodic=True)[0]]
    else:
        W = [chi1] * 3
    K = sum((D[j].T @ sparse.diags(W[j]) @ D[j]) for j in range(3)).toarray()
    G = np.stack([xi.T @ t for t in T])  # (2, 3)
    B = -np.stack([sum(D[j].T @ (W[j] * G[a, j]) for j in range(3)) for a in range(2)], axis=1)

    # restrict to nodes the energy sees and add the gauge directions
    active = np.abs(K).sum(axis=1) > 0
    Ka = K[np.ix_(active, active)]
    if discretization == "fd":
        nulls = [np.ones(int(active.sum()))]
    else:
        ks = [np.round(wavenumbers(k) / (2 * np.pi)).astype(int) for k in n]
        nulls = []
        for c0 in {0, n[0] // 2} if n[0] % 2 == 0 else {0}:
            for c1 in {0, n[1] // 2} if n[1] % 2 == 0 else {0}:
                for c2 in {0, n[2] // 2} if n[2] % 2 == 0 else {0}:
                    idx = np.indices(n).reshape(3, -1)
                    v = np.cos(np.pi * (2 * c0 * idx[0] / n[0] + 2 * c1 * idx[1] / n[1] + 2 * c2 * idx[2] / n[2]))
                    nulls.append(v[active])
    Z = np.stack([v / np.linalg.norm(v) for v in nulls], axis=1)
    reg = Ka + Z @ Z.T
    fac = sla.cho_factor(reg)
    xa = sla.cho_solve(fac, B[active])
    xa -= Z @ (Z.T @ xa)
    coeffs = np.zeros((N, 2))
    coeffs[active] = xa
    phi3 = coeffs @ T  # (N, 3)
    tot = 0.0
    for j in range(3):
        d = (D[j] @ phi3) + xi[:, j][None, :]
        tot += float(np.sum(W[j] * np.sum(d * d, axis=1)))
    value = 0.5 * tot * dv
    return value, coeffs.T.reshape((2,) + tuple(n))


# ---------------------------------------------------------------------------
# literal closed-form recipe


@dataclass(frozen=True)
class ClosedFormReport:
    value: float
    solvable: bool
    rhs_mean: float
    display_matrix: np.ndarray
    reference: float
    discrepancy: float
    status: str


def fhom_closed_form(s, xi, cell: CellGeometry, discretization="fd") -> ClosedFormReport:
    """Evaluate the explicit corrector recipe phi[s, xi] = sum_a (phi . xi t_a) t_a.

    The recipe starts from -Lap phi = chi_{Q1}, which has no periodic solution
    because chi_{Q1} has positive mean.  We flag that, use the mean-free part
    of the right-hand side when it is non-zero, take the same scalar solution
    in every component of phi, and report (i) the cell energy of the resulting
    candidate, (ii) int_{Q1} grad phi[s, xi] dz and (iii) the difference to the
    minimised f_hom.  Nothing is tuned to make (iii) vanish.
    """
    basis = tangent_basis(s)
    xi = _check_xi(xi)
    prob = cell_problem(cell, discretization)
    chi1 = cell.chi1.astype(np.float64)
    mean = float(chi1.mean())
    solvable = abs(mean) <= 1e-12
    free = chi1 - mean
    ref = fhom(s, xi, cell, discretization).value
    if not np.any(np.abs(free) > 1e-14):
        return ClosedFormReport(float("nan"), solvable, mean, np.full((3, 3), np.nan), ref, float("nan"),
                                "failed: right-hand side vanishes after removing its mean")
    r = solve_cell_poisson(VectorField(cell.grid, free)).data[..., 0]
    phi = np.repeat(r[..., None], 3, axis=-1)
    cand = np.zeros(phi.shape)
    for t in (basis.t1, basis.t2):
        coef = phi @ (xi @ t)
        cand += coef[..., None] * t
    value = prob.energy(xi, cand)
    comp = np.moveaxis(cand, -1, 0)
    disp = np.array([[float(np.sum(chi1 * prob.D(comp[i], j))) * prob.dv for j in range(3)] for i in range(3)])
    status = "projected: mean removed" if not solvable else "solved"
    return ClosedFormReport(value, solvable, mean, disp, ref, value - ref, status)
