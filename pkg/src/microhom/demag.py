"""Stray field of a magnetisation supported in a box, and its two-scale limit.

The whole-space problem is approximated on a periodic box ``pad`` times larger
than the sample, with the sample centred inside.  In Fourier space the field
is h = -k (k . M) / |k|^2, i.e. minus the Helmholtz projection of M onto
gradients; it is curl free, div(h + M) = 0, and the discrete Parseval identity
gives int |h|^2 = -int h . M exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .cellsolve import hdz_array
from .errors import GridMismatchError, PreconditionError, SupportError
from .fields import Grid, VectorField


@dataclass(frozen=True, eq=False)
class StrayFieldSolution:
    omega: Grid
    padded: Grid
    offset: tuple  # index of omega's first node in the padded grid
    h: np.ndarray  # (P1, P2, P3, 3) on the padded grid
    u: np.ndarray | None  # potential, h = -grad u (None when not requested)

    def restrict(self) -> VectorField:
        """The field on the sample grid."""
        o, n = self.offset, self.omega.n
        return VectorField(self.omega, self.h[o[0]:o[0] + n[0], o[1]:o[1] + n[1], o[2]:o[2] + n[2]])

    def energy(self) -> float:
        return float(np.sum(self.h * self.h)) * self.padded.cell_volume


def padded_grid(omega: Grid, pad):
    pad = float(pad)
    if not pad >= 2.0:
        raise PreconditionError(f"padding factor must be >= 2, got {pad}")
    if not all(omega.periodic):
        raise PreconditionError("the sample grid must be cell-centred")
    P = [int(np.ceil(pad * n - 1e-9)) for n in omega.n]
    P = [p + (p - n) % 2 for p, n in zip(P, omega.n)]  # centre exactly
    off = tuple((p - n) // 2 for p, n in zip(P, omega.n))
    h = omega.spacing
    origin = [omega.origin[i] - off[i] * h[i] for i in range(3)]
    return Grid(origin, [P[i] * h[i] for i in range(3)], P, (True, True, True)), off


def _axis_k(n, h, real=False):
    # the Nyquist mode has no sign; zeroing it keeps h an exact real gradient
    k = 2.0 * np.pi * (sfft.rfftfreq(n, d=h) if real else sfft.fftfreq(n, d=h))
    if n % 2 == 0:
        k[-1 if real else n // 2] = 0.0
    return k


def _wavenumbers(grid: Grid):
    return np.meshgrid(*(_axis_k(grid.n[i], grid.spacing[i]) for i in range(3)), indexing="ij", sparse=True)


def _wavenumbers_r(grid: Grid):
    ks = [_axis_k(grid.n[i], grid.spacing[i]) for i in range(2)]
    ks.append(_axis_k(grid.n[2], grid.spacing[2], real=True))
    return np.meshgrid(*ks, indexing="ij", sparse=True)


def hd(m: VectorField, pad=2.0, potential=False) -> StrayFieldSolution:
    """Stray field h_d[m] of m extended by zero outside its grid box."""
    if m.ncomp != 3:
        raise PreconditionError("magnetisation must have 3 components")
    grid, off = padded_grid(m.grid, pad)
    n = m.grid.n
    sl = tuple(slice(off[i], off[i] + n[i]) for i in range(3))
    k = _wavenumbers_r(grid)
    K2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    inv = np.where(K2 > 0, 1.0 / np.where(K2 > 0, K2, 1.0), 0.0)
    kdm = 0.0
    buf = np.zeros(grid.n)
    for j in range(3):
        buf[sl] = m.data[..., j]
        kdm = kdm + k[j] * sfft.rfftn(buf)
    kdm = kdm * inv
    h = np.empty(tuple(grid.n) + (3,))
    for j in range(3):
        h[..., j] = sfft.irfftn(-k[j] * kdm, s=grid.n)
    u = sfft.irfftn(-1j * kdm, s=grid.n) if potential else None
    return StrayFieldSolution(m.grid, grid, off, h, u)


def self_energy(m: VectorField, sol: StrayFieldSolution):
    """(int |h|^2 over the padded box, -int_Omega h . m); equal by construction."""
    e_field = sol.energy()
    e_pair = -float(np.sum(sol.restrict().data * m.data)) * m.grid.cell_volume
    return e_field, e_pair


def stray_energy(m: VectorField, pad=2.0) -> float:
    return hd(m, pad).energy()


def maxwell_residuals(m: VectorField, sol: StrayFieldSolution):
    """Spectral ||div(h + M)|| and ||curl h||, relative to ||grad-free scale of M||."""
    grid = sol.padded
    o, n = sol.offset, m.grid.n
    M = np.zeros(sol.h.shape)
    M[o[0]:o[0] + n[0], o[1]:o[1] + n[1], o[2]:o[2] + n[2]] = m.data
    k = _wavenumbers(grid)
    B = sfft.fftn(sol.h + M, axes=(0, 1, 2))
    H = sfft.fftn(sol.h, axes=(0, 1, 2))
    Mh = sfft.fftn(M, axes=(0, 1, 2))
    kn = np.sqrt(k[0] ** 2 + k[1] ** 2 + k[2] ** 2)
    scale = np.sqrt(np.sum(np.abs(kn[..., None] * Mh) ** 2)) + 1e-300
    div = k[0] * B[..., 0] + k[1] * B[..., 1] + k[2] * B[..., 2]
    curl = np.stack([k[1] * H[..., 2] - k[2] * H[..., 1], k[2] * H[..., 0] - k[0] * H[..., 2], k[0] * H[..., 1] - k[1] * H[..., 0]], axis=-1)
    return float(np.sqrt(np.sum(np.abs(div) ** 2)) / scale), float(np.sqrt(np.sum(np.abs(curl) ** 2)) / scale)


def ball_magnetisation(grid: Grid, center=(0.5, 0.5, 0.5), radius=0.25, direction=(0, 0, 1),
                       subsample=4) -> VectorField:
    """Uniform magnetisation of a ball; each node carries the volume fraction
    of its grid cell inside the ball (``subsample`` points per axis, 1 gives
    the plain nodal indicator)."""
    x = grid.points()
    c = np.asarray(center, dtype=np.float64)
    h = grid.spacing
    off = (np.arange(subsample) + 0.5) / subsample - 0.5
    frac = np.zeros(grid.n)
    for a in off:
        for b in off:
            for e in off:
                frac += np.sum((x + np.array([a, b, e]) * h - c) ** 2, axis=-1) < radius**2
    frac /= subsample**3
    d = np.asarray(direction, dtype=np.float64)
    return VectorField(grid, frac[..., None] * d)


# ---------------------------------------------------------------------------
# two-scale limit of the stray field energy


@dataclass(frozen=True)
class HomogenizedStray:
    macro: float  # |h_d[m~ + <w>]|^2
    micro: float  # int_Omega int |h_d^z[w]|^2
    orthogonality: float  # int int h_d[macro] . h_d^z[w]

    @property
    def total(self):
        return self.macro + self.micro


def cell_means(w_data, chi0=None, reading="integral"):
    """<w> per cell: integral over Q of the zero-extended w, or its average over Q0."""
    mean = w_data.mean(axis=(3, 4, 5))
    if reading == "integral":
        return mean
    if reading == "average":
        frac = float(np.mean(chi0))
        return mean / frac
    raise PreconditionError(f"unknown reading {reading!r}")


def homogenized_stray_energy(m_tilde: VectorField, w, chi0_micro, pad=2.0, reading="integral",
                             domain="Q", macro_source=None, support_tol=1e-12) -> HomogenizedStray:
    """W_hom = |h_d[m~ + <w>]|^2 + int_Omega int |h_d^z[w]|^2 dz dx.

    ``w`` is a TwoScaleField whose cells tile the grid of ``m_tilde``.  The
    cell mean of w is broadcast to the macro nodes of each cell unless
    ``macro_source`` (a per-node array of <w>) is supplied.  ``domain`` selects
    the micro integration set for the second term: the full cell ``Q`` or only
    the hole ``Q0``.
    """
    chi0 = np.asarray(chi0_micro, dtype=bool)
    if chi0.shape != tuple(w.micro_n):
        raise GridMismatchError("hole indicator does not match the micro grid of w")
    leak = np.max(np.abs(w.data[..., ~chi0, :])) if np.any(~chi0) else 0.0
    if leak > support_tol:
        raise SupportError(f"w is not supported in the hole (|w| = {leak:.3e} in the matrix)")
    if macro_source is None:
        avg = cell_means(w.data, chi0, reading)
        src = np.zeros(m_tilde.data.shape)
        M = w.cells
        N = m_tilde.grid.n
        rep = [N[i] // M[i] for i in range(3)]
        if any(rep[i] * M[i] != N[i] for i in range(3)):
            raise GridMismatchError("two-scale cells do not tile the macro grid")
        src = np.repeat(np.repeat(np.repeat(avg, rep[0], 0), rep[1], 1), rep[2], 2)
    else:
        src = np.asarray(macro_source)
    sol = hd(VectorField(m_tilde.grid, m_tilde.data + src), pad)
    macro = sol.energy()

    micro = 0.0
    orth = 0.0
    hm = sol.restrict().data
    rep = [m_tilde.grid.n[i] // w.cells[i] for i in range(3)]
    cw = w.cell_weights()
    wz = 1.0 / np.prod(w.micro_n)
    sel = np.ones(w.micro_n, dtype=bool) if domain == "Q" else chi0
    if domain not in ("Q", "Q0"):
        raise PreconditionError(f"unknown micro domain {domain!r}")
    for i in range(w.cells[0]):
        hz = hdz_array(w.data[i], axes=(-4, -3, -2))
        micro += float(np.sum(cw[i] * np.sum(np.sum(hz * hz, axis=-1) * sel, axis=(2, 3, 4)))) * wz
        # macro field averaged per cell, paired with the mean-free micro field
        hcell = hm[i * rep[0]:(i + 1) * rep[0]].reshape(rep[0], w.cells[1], rep[1], w.cells[2], rep[2], 3).mean(axis=(0, 2, 4))
        orth += float(np.sum(cw[i] * np.einsum("abc,abxyzc->ab", hcell, hz))) * wz
    return HomogenizedStray(macro, micro, orth)
