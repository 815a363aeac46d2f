"""Uniform 3-D grids, sampled vector fields and the TSF1 binary format."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage, signal

from .errors import (
    FieldFormatError,
    FieldIOError,
    GridMismatchError,
    MollifierError,
    PreconditionError,
    SphereConstraintError,
)

UNIT_TOL = 1e-12


def _triple(v, cast):
    arr = np.broadcast_to(np.asarray(v), (3,))
    return tuple(cast(x) for x in arr)


@dataclass(frozen=True)
class Grid:
    """Tensor grid on the box ``origin + [0, extent]``.

    Periodic axes are sampled at cell midpoints ``origin + (i + 1/2) h`` with
    ``h = extent / n``; non-periodic axes use the endpoint nodes
    ``origin + i h`` with ``h = extent / (n - 1)``.
    """

    origin: tuple
    extent: tuple
    n: tuple
    periodic: tuple = (True, True, True)

    def __post_init__(self):
        object.__setattr__(self, "origin", _triple(self.origin, float))
        object.__setattr__(self, "extent", _triple(self.extent, float))
        object.__setattr__(self, "n", _triple(self.n, int))
        object.__setattr__(self, "periodic", _triple(self.periodic, bool))
        if min(self.extent) <= 0 or not all(np.isfinite(self.extent + self.origin)):
            raise PreconditionError(f"grid extent must be positive and finite, got {self.extent}")
        if min(self.n) < 2:
            raise PreconditionError(f"need at least 2 points per axis, got {self.n}")

    @classmethod
    def unit(cls, n, periodic=True):
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), n, periodic)

    @property
    def shape(self):
        return self.n

    @property
    def spacing(self) -> np.ndarray:
        return np.array(
            [e / (k if p else k - 1) for e, k, p in zip(self.extent, self.n, self.periodic)]
        )

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def axis(self, i) -> np.ndarray:
        h = self.spacing[i]
        shift = 0.5 if self.periodic[i] else 0.0
        return self.origin[i] + (np.arange(self.n[i]) + shift) * h

    def points(self) -> np.ndarray:
        """Node coordinates, shape (n1, n2, n3, 3)."""
        return np.stack(np.meshgrid(*(self.axis(i) for i in range(3)), indexing="ij"), axis=-1)

    def weights_1d(self, i) -> np.ndarray:
        w = np.full(self.n[i], self.spacing[i])
        if not self.periodic[i]:
            w[0] *= 0.5
            w[-1] *= 0.5
        return w

    def weights(self) -> np.ndarray:
        """Quadrature weights: midpoint rule on periodic axes, trapezoid otherwise."""
        w0, w1, w2 = (self.weights_1d(i) for i in range(3))
        return w0[:, None, None] * w1[None, :, None] * w2[None, None, :]


@dataclass(frozen=True, eq=False)
class VectorField:
    """Immutable samples of an R^c valued field; ``data`` has shape (*grid.n, c)."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.shape == tuple(self.grid.n):
            arr = arr[..., None]
        if arr.ndim != 4 or arr.shape[:3] != tuple(self.grid.n):
            raise GridMismatchError(f"data shape {arr.shape} does not match grid {self.grid.n}")
        if not np.all(np.isfinite(arr)):
            raise PreconditionError("field contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def ncomp(self) -> int:
        return self.data.shape[-1]

    @classmethod
    def from_function(cls, grid: Grid, f):
        return cls(grid, np.asarray(f(grid.points()), dtype=np.float64))

    @classmethod
    def zeros(cls, grid: Grid, ncomp=3):
        return cls(grid, np.zeros(tuple(grid.n) + (ncomp,)))

    def with_data(self, data):
        return type(self)(self.grid, data)

    def pointwise_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data * self.data, axis=-1))

    def __add__(self, other):
        _check_same_grid(self, other)
        return VectorField(self.grid, self.data + other.data)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return VectorField(self.grid, self.data - other.data)

    def scaled(self, c):
        return VectorField(self.grid, c * self.data)


class SphereField(VectorField):
    """Vector field with |m| = 1 at every node (checked to 1e-12)."""

    def __post_init__(self):
        super().__post_init__()
        if self.ncomp != 3:
            raise SphereConstraintError("sphere-valued fields need 3 components")
        dev = float(np.max(np.abs(self.pointwise_norm() - 1.0)))
        if dev > UNIT_TOL:
            raise SphereConstraintError(f"|m| deviates from 1 by {dev:.3e}", dev)

    @classmethod
    def normalized(cls, field_or_grid, data=None):
        """Project samples onto the sphere; zero vectors are rejected."""
        if data is None:
            grid, data = field_or_grid.grid, field_or_grid.data
        else:
            grid = field_or_grid
        data = np.asarray(data, dtype=np.float64)
        nrm = np.sqrt(np.sum(data * data, axis=-1, keepdims=True))
        if np.any(nrm == 0):
            raise SphereConstraintError("cannot normalize a zero vector")
        return cls(grid, data / nrm)


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


def _as_data(f, grid=None):
    if isinstance(f, VectorField):
        if grid is not None and f.grid != grid:
            raise GridMismatchError("mask lives on a different grid")
        return f.data
    return np.asarray(f)


def inner(f: VectorField, g: VectorField) -> float:
    """L^2 inner product with the grid quadrature."""
    _check_same_grid(f, g)
    return float(np.sum(f.grid.weights() * np.sum(f.data * g.data, axis=-1)))


def l2_norm(f: VectorField, mask=None) -> float:
    """Quadrature L^2 norm, optionally restricted by a 0/1 (or weight) mask."""
    w = f.grid.weights()
    if mask is not None:
        m = _as_data(mask, f.grid).astype(np.float64)
        if m.ndim == 4:
            m = m[..., 0]
        if m.shape != w.shape:
            raise GridMismatchError(f"mask shape {m.shape} does not match grid {w.shape}")
        w = w * m
    return float(np.sqrt(np.sum(w * np.sum(f.data * f.data, axis=-1))))


def _spectral_wavenumbers(grid: Grid, i):
    n = grid.n[i]
    k = 2.0 * np.pi * sfft.fftfreq(n, d=grid.spacing[i])
    if n % 2 == 0:
        k[n // 2] = 0.0
    return k


def spectral_derivative(data, grid: Grid, axis):
    """d/dx_axis of array ``data`` (grid axes first) by FFT; Nyquist mode dropped."""
    k = _spectral_wavenumbers(grid, axis)
    shape = [1] * data.ndim
    shape[axis] = k.size
    return sfft.ifft(1j * k.reshape(shape) * sfft.fft(data, axis=axis), axis=axis).real


def gradient(f: VectorField, spectral=False, interior=False) -> VectorField:
    """Gradient with component layout ``3 * i + j`` for d f_i / d x_j.

    Periodic axes use wrap-around central differences unless ``interior`` is
    set, in which case (as on non-periodic axes) the stencil never leaves the
    box and becomes one-sided, second order, at the two ends.
    """
    data = f.data
    g = f.grid
    out = np.empty(data.shape[:3] + (data.shape[3], 3))
    for j in range(3):
        if spectral:
            if not g.periodic[j] or interior:
                raise PreconditionError("spectral gradient needs a periodic axis")
            out[..., j] = spectral_derivative(data, g, j)
        elif g.periodic[j] and not interior:
            h = g.spacing[j]
            out[..., j] = (np.roll(data, -1, axis=j) - np.roll(data, 1, axis=j)) / (2 * h)
        else:
            out[..., j] = np.gradient(data, g.spacing[j], axis=j, edge_order=2)
    return VectorField(g, out.reshape(data.shape[:3] + (3 * data.shape[3],)))


def friedrichs_kernel(grid: Grid, radius):
    """Standard C-infinity bump of the given radius tabulated on grid offsets, unit sum."""
    h = grid.spacing
    r = [int(np.floor(radius / h[i])) for i in range(3)]
    ax = [np.arange(-r[i], r[i] + 1) * h[i] for i in range(3)]
    X = np.meshgrid(*ax, indexing="ij")
    rho2 = (X[0] ** 2 + X[1] ** 2 + X[2] ** 2) / radius**2
    k = np.zeros_like(rho2)
    inside = rho2 < 1.0
    k[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    if k.sum() == 0.0:
        k[tuple(ri for ri in r)] = 1.0
    return k / k.sum(), r


def mollify(f: VectorField, radius, support=None, wrap=None) -> VectorField:
    """Convolve with the Friedrichs mollifier of the given radius.

    Periodic axes wrap around unless ``wrap`` is False.  Along non-wrapping
    axes the field is zero-extended and the result divided by the local
    kernel mass, so constants are reproduced up to the boundary.  If a
    boolean ``support`` mask is given, output values closer than ``radius``
    to its complement are set to zero.
    """
    radius = float(radius)
    g = f.grid
    if radius < 0:
        raise MollifierError("radius must be non-negative")
    if radius > 0.5 * min(g.extent):
        raise MollifierError(f"radius {radius} exceeds half the domain extent {0.5 * min(g.extent)}")
    if radius == 0.0:
        return f
    kern, r = friedrichs_kernel(g, radius)
    if wrap is None:
        wrap = g.periodic
    wrap = _triple(wrap, bool)
    wrap = tuple(w and p for w, p in zip(wrap, g.periodic))

    def conv(a):
        pad = [(ri, ri) for ri in r]
        out = a
        for ax in range(3):
            width = [(0, 0)] * a.ndim
            width[ax] = pad[ax]
            out = np.pad(out, width, mode="wrap" if wrap[ax] else "constant")
        return signal.fftconvolve(out, kern, mode="valid")

    data = np.stack([conv(f.data[..., c]) for c in range(f.ncomp)], axis=-1)
    if not all(wrap):
        mass = conv(np.ones(g.n))
        data = data / mass[..., None]
    if support is not None:
        sup = np.asarray(_as_data(support, g), dtype=bool)
        if sup.ndim == 4:
            sup = sup[..., 0]
        dist = ndimage.distance_transform_edt(sup, sampling=g.spacing)
        data = data * (dist >= radius)[..., None]
    return type(f)(g, data) if not isinstance(f, SphereField) else VectorField(g, data)


# ---------------------------------------------------------------------------
# TSF1 binary format
#
#   bytes 0-3   magic b"TSF1"
#   byte  4     ncomp (u8)
#   byte  5     periodic flags, bit i for axis i
#   6..17       n1 n2 n3 (u32 little endian)
#   18..41      origin (3 x f64)
#   42..65      extent (3 x f64)
#   66..        samples, f64 little endian, z-index fastest, component innermost

TSF1_HEADER = struct.Struct("<4sBB3I3d3d")
MAX_SAMPLES = 2**34


def write_field(path, f: VectorField) -> None:
    if not path:
        raise FieldIOError("empty path")
    if f.ncomp > 255 or max(f.grid.n) >= 2**32:
        raise FieldFormatError("dimension overflow", 4)
    flags = sum(1 << i for i, p in enumerate(f.grid.periodic) if p)
    header = TSF1_HEADER.pack(b"TSF1", f.ncomp, flags, *f.grid.n, *f.grid.origin, *f.grid.extent)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())
    except OSError as exc:
        raise FieldIOError(str(exc)) from exc


def _read_bytes(path):
    if not path:
        raise FieldIOError("empty path")
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FieldIOError(str(exc)) from exc


def read_field(path) -> VectorField:
    raw = _read_bytes(path)
    if len(raw) < 4 or raw[:4] != b"TSF1":
        raise FieldFormatError("bad magic, expected TSF1", 0)
    if len(raw) < TSF1_HEADER.size:
        raise FieldFormatError("truncated header", len(raw))
    _, ncomp, flags, n1, n2, n3, *rest = TSF1_HEADER.unpack_from(raw)
    if ncomp == 0 or min(n1, n2, n3) == 0:
        raise FieldFormatError("zero-sized dimension", 4)
    count = n1 * n2 * n3 * ncomp
    if count > MAX_SAMPLES:
        raise FieldFormatError("dimension overflow", 6)
    need = TSF1_HEADER.size + 8 * count
    if len(raw) < need:
        raise FieldFormatError(f"truncated payload, need {need} bytes", len(raw))
    if len(raw) > need:
        raise FieldFormatError("trailing bytes after payload", need)
    grid = Grid(rest[:3], rest[3:], (n1, n2, n3), tuple(bool(flags >> i & 1) for i in range(3)))
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=TSF1_HEADER.size)
    return VectorField(grid, data.reshape(n1, n2, n3, ncomp))


def ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
