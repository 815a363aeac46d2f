"""Built-in demonstration inputs: constant, saturated bump and alternating tessellation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .fields import Grid, SphereField
from .geometry import CellGeometry, build_cell
from .recovery import CorrectorOscillation, RecoveryInput, smooth_step
from .unfolding import cell_layout, macro_micro_coords

DEFAULT_HOLE = (((1 / 6,) * 3, (5 / 6,) * 3),)
SCENARIOS = ("constant", "bump", "tessellation")


def bump(x, center, radius):
    """exp(1 - 1/(1 - rho^2)) for rho = |x - c| / radius < 1, else 0; value 1 at c."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    u = np.sum(d * d, axis=-1) / radius**2
    inside = u < 1.0
    out = np.zeros(u.shape)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside]))
    return out


def bump_gradient(x, center, radius):
    d = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    u = np.sum(d * d, axis=-1) / radius**2
    b = bump(x, center, radius)
    inside = u < 1.0
    fac = np.zeros(u.shape)
    fac[inside] = -b[inside] / (1.0 - u[inside]) ** 2 * 2.0 / radius**2
    return fac[..., None] * d


def gaussian(x, center, sigma):
    d = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return np.exp(-0.5 * np.sum(d * d, axis=-1) / sigma**2)


def gaussian_gradient(x, center, sigma):
    d = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return (-gaussian(x, center, sigma) / sigma**2)[..., None] * d


def rotate_e3(phi):
    """R_{e2}(phi) e3 = (sin phi, 0, cos phi)."""
    phi = np.asarray(phi, dtype=np.float64)
    return np.stack([np.sin(phi), np.zeros_like(phi), np.cos(phi)], axis=-1)


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    input: RecoveryInput
    params: dict

    @property
    def cell(self):
        return self.input.cell


def constant_scenario(cell: CellGeometry, direction=(0.0, 0.0, 1.0)) -> Scenario:
    s = np.asarray(direction, dtype=np.float64)
    s = s / np.linalg.norm(s)

    def m_tilde(x):
        return np.broadcast_to(s, np.shape(x)[:-1] + (3,)).copy()

    def w(x, z):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(z)))

    def grad(x):
        return np.zeros(np.shape(x)[:-1] + (3, 3))

    inp = RecoveryInput(m_tilde, w, cell, None, True, grad, "constant")
    return Scenario("constant", inp, {"direction": tuple(s)})


def bump_scenario(cell: CellGeometry, amplitude=1.0, beta=1.5, sigma=0.2, w_radius=0.35,
                  center=(0.5, 0.5, 0.5), z_radius=None, corrector=True) -> Scenario:
    """m~ = R(A g(x)) e3 and w = R(A g(x) + beta b_w(x) eta(z)) e3 - m~.

    g is a Gaussian of width ``sigma`` and b_w a compact bump of radius
    ``w_radius``, both centred at ``center``.  eta is a radial bump centred
    in the first hole box with radius ``z_radius`` (default 3/4 of its
    half-width), so |m~ + w| = 1 on the hole and w vanishes outside it.  The oscillation psi is the cell corrector
    applied to grad m~.
    """
    lo, hi = cell.holes[0]
    zc = 0.5 * (np.asarray(lo) + np.asarray(hi))
    hw = 0.5 * min(h - l for l, h in zip(lo, hi))
    zr = 0.75 * hw if z_radius is None else float(z_radius)
    if not 0 < zr <= hw:
        raise PreconditionError("z_radius must lie in (0, hole half-width]")

    def theta(x):
        return amplitude * gaussian(x, center, sigma)

    def m_tilde(x):
        return rotate_e3(theta(x))

    def grad(x):
        t = theta(x)
        d = np.stack([np.cos(t), np.zeros_like(t), -np.sin(t)], axis=-1)
        return d[..., :, None] * (amplitude * gaussian_gradient(x, center, sigma))[..., None, :]

    def w(x, z):
        t = theta(x)
        eta = bump(np.mod(z, 1.0), zc, zr)
        return rotate_e3(t + beta * bump(x, center, w_radius) * eta) - rotate_e3(t)

    psi = CorrectorOscillation(grad, cell) if corrector else None
    inp = RecoveryInput(m_tilde, w, cell, psi, True, grad, "bump")
    params = dict(amplitude=amplitude, beta=beta, sigma=sigma, w_radius=w_radius, z_radius=zr)
    return Scenario("bump", inp, params)


@dataclass(frozen=True, eq=False)
class Tessellation:
    """Cells carry phi_+ or phi_- by checkerboard parity.

    phi_pm(z) = cos(theta(z)) s pm sin(theta(z)) e, with theta = pi/2 on the
    core K of the hole and 0 on the matrix.  Both are unit vectors; their
    average cos(theta) s is the two-scale limit, which vanishes on K.
    """

    cell: CellGeometry
    s: np.ndarray
    e: np.ndarray
    core: float  # depth of K below the hole boundary (0: K = hole)
    sharp: bool

    def theta(self, z):
        d = self.cell.depth(z)
        if self.sharp or self.core == 0.0:
            return np.where(d > 0, 0.5 * np.pi, 0.0)
        return 0.5 * np.pi * smooth_step(d / self.core)

    def phi(self, z, sign):
        t = self.theta(z)[..., None]
        return np.cos(t) * self.s + sign * np.sin(t) * self.e

    def limit(self, x, z):
        t = self.theta(z)
        shape = np.broadcast_shapes(np.shape(x)[:-1], t.shape)
        return np.broadcast_to(np.cos(t)[..., None] * self.s, shape + (3,))

    def field(self, omega: Grid, eps) -> SphereField:
        lay = cell_layout(omega, eps)
        x, z = macro_micro_coords(omega, lay.eps)
        t = [np.arange(omega.n[i]) // lay.n[i] + lay.t0[i] for i in range(3)]
        par = (t[0][:, None, None] + t[1][None, :, None] + t[2][None, None, :]) % 2
        sign = np.where(par == 0, 1.0, -1.0)[..., None]
        th = self.theta(z)[..., None]
        data = np.cos(th) * self.s + sign * np.sin(th) * self.e
        return SphereField.normalized(omega, data)

    def saturation_defect(self, omega: Grid, micro_n=24, x_n=4) -> float:
        """|| |m~ + w| - 1 ||_{L2(Omega x Q0)}."""
        z = Grid.unit(micro_n).points()
        chi = self.cell.indicator(z)
        t = self.theta(z)
        dev = (np.abs(np.cos(t)) - 1.0) ** 2 * chi
        return float(np.sqrt(np.mean(dev) * omega.volume))


def tessellation_scenario(cell: CellGeometry, direction=(0.0, 0.0, 1.0), core=None, sharp=False) -> Scenario:
    s = np.asarray(direction, dtype=np.float64)
    s = s / np.linalg.norm(s)
    k = int(np.argmin(np.abs(s)))
    e = np.cross(s, np.eye(3)[k])
    e /= np.linalg.norm(e)
    lo, hi = cell.holes[0]
    hw = 0.5 * min(h - l for l, h in zip(lo, hi))
    core = 0.25 * hw if core is None else float(core)
    tess = Tessellation(cell, s, e, core, sharp)

    def m_tilde(x):
        return np.broadcast_to(s, np.shape(x)[:-1] + (3,)).copy()

    def w(x, z):
        t = tess.theta(np.asarray(z))
        shape = np.broadcast_shapes(np.shape(x)[:-1], t.shape)
        return np.broadcast_to(((np.cos(t) - 1.0)[..., None]) * s, shape + (3,))

    def grad(x):
        return np.zeros(np.shape(x)[:-1] + (3, 3))

    inp = RecoveryInput(m_tilde, w, cell, None, False, grad, "tessellation")
    return Scenario("tessellation", inp, {"core": core, "sharp": sharp, "tessellation": tess})


def scenario(name, holes=DEFAULT_HOLE, micro_n=24, **kw) -> Scenario:
    cell = build_cell(holes, micro_n)
    if name == "constant":
        return constant_scenario(cell, **kw)
    if name == "bump":
        return bump_scenario(cell, **kw)
    if name == "tessellation":
        return tessellation_scenario(cell, **kw)
    raise PreconditionError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")


@dataclass(frozen=True)
class TessellationReport:
    eps: tuple
    unit_residual: tuple
    pairing_error: tuple  # max over the dictionary, per eps
    saturation_defect: float


def tessellation_check(sc: Scenario, omega: Grid, eps_list, order=2) -> TessellationReport:
    """Unfolded pairings of the checkerboard fields against the averaged limit."""
    from .unfolding import limit_pairing, pairing_dictionary, unfolded_pairing

    tess = sc.params["tessellation"]
    units, errs = [], []
    for eps in eps_list:
        m = tess.field(omega, eps)
        units.append(float(np.max(np.abs(m.pointwise_norm() - 1.0))))
        n = cell_layout(omega, eps).n
        worst = 0.0
        for _, psi in pairing_dictionary():
            a = unfolded_pairing(m, psi, eps, order)
            b = limit_pairing(tess.limit, psi, omega, eps, n, order)
            worst = max(worst, abs(a - b))
        errs.append(worst)
    return TessellationReport(tuple(eps_list), tuple(units), tuple(errs), tess.saturation_defect(omega))
