import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microhom.cellsolve import FhomCache
from microhom.demag import hd
from microhom.energies import (
    energy_G_eps,
    exchange_energies,
    extend_matrix,
    gamma_study,
    limit_energy_G,
    split_energies,
)
from microhom.errors import GridMismatchError, PreconditionError
from microhom.fields import Grid, SphereField, VectorField
from microhom.geometry import build_cell, build_composite, full_cell
from microhom.recovery import RecoveryInput, smooth_step
from microhom.scenarios import bump_scenario, constant_scenario, gaussian, rotate_e3, tessellation_scenario

TAU = 2 * np.pi
QUARTER = (((0.25,) * 3, (0.75,) * 3),)


def geometry(n, eps, holes=QUARTER, micro=8):
    return build_composite(build_cell(holes, micro), eps, Grid.unit(n))


def const_field(g, s=(0.0, 0.0, 1.0)):
    return SphereField(g, np.broadcast_to(np.asarray(s, dtype=float), g.n + (3,)))


def hole_rotation(geom):
    """Unit field equal to e3 on the matrix, turning by pi/2 in the hole cores."""
    x = geom.omega.points()
    z = np.mod(x / geom.eps, 1.0)
    depth = geom.cell.depth(z)
    theta = 0.5 * np.pi * smooth_step(depth / 0.15)
    return SphereField(geom.omega, rotate_e3(theta))


def test_constant_field_energies():
    geom = geometry(32, 0.25)
    m = const_field(geom.omega)
    rep = energy_G_eps(m, geom)
    assert rep.F0 == 0.0 and rep.F1 == 0.0
    assert rep.Wself == pytest.approx(hd(m).energy(), rel=1e-14)
    assert rep.Gtotal == rep.F0 + rep.F1 + rep.Wself


def test_grid_mismatch():
    geom = geometry(32, 0.25)
    with pytest.raises(GridMismatchError):
        exchange_energies(const_field(Grid.unit(16)), geom)


def test_hole_only_gradient():
    vals = []
    for n, eps in ((32, 0.5), (64, 0.25)):
        geom = geometry(n, eps, micro=n * eps)
        F1, F0 = exchange_energies(hole_rotation(geom), geom)
        assert F1 == 0.0
        vals.append(F0)
    assert 0 < vals[0] and abs(vals[1] / vals[0] - 1) < 0.2


def test_full_cell_exchange_is_dirichlet_energy():
    g = Grid.unit(32)
    geom = build_composite(full_cell(8), 0.25, g)
    x = g.points()
    # profile flat at the outer faces, where no edge crosses
    m = SphereField(g, rotate_e3(0.5 * np.sin(np.pi * x[..., 0]) ** 2))
    F1, F0 = exchange_energies(m, geom)
    assert F0 == 0.0
    ref = 0.5 * np.sum((0.25 * TAU * np.sin(TAU * x[..., 0])) ** 2) * g.cell_volume
    assert F1 == pytest.approx(ref, rel=0.02)


def test_extension_of_constant():
    geom = geometry(32, 0.25)
    m = const_field(geom.omega, (0.6, 0.0, 0.8))
    ext = extend_matrix(m, geom)
    assert np.max(np.abs(ext.field.data - m.data)) <= 1e-10


def test_extension_ignores_hole_values():
    geom = geometry(32, 0.25)
    rng = np.random.default_rng(0)
    data = np.broadcast_to([0.0, 0, 1], geom.omega.n + (3,)).copy()
    junk = rng.standard_normal(data.shape)
    junk /= np.linalg.norm(junk, axis=-1, keepdims=True)
    data[geom.chi0] = junk[geom.chi0]
    ext = extend_matrix(SphereField(geom.omega, data), geom)
    assert np.max(np.abs(ext.field.data - [0, 0, 1])) <= 1e-10


def test_extension_constants_uniform_in_eps():
    ratios = []
    for eps in (0.25, 0.125, 0.0625):
        geom = geometry(64, eps, micro=64 * eps)
        x = geom.omega.points()
        theta = 0.8 * gaussian(x, (0.5, 0.5, 0.5), 0.25) + 0.3 * np.sin(TAU * x[..., 0] / eps) * np.sin(TAU * x[..., 1])
        ext = extend_matrix(SphereField(geom.omega, rotate_e3(theta)), geom)
        assert np.max(np.abs(ext.field.data[geom.chi1] - rotate_e3(theta)[geom.chi1])) == 0.0
        ratios.append((ext.l2_ratio, ext.grad_ratio))
    r = np.array(ratios)
    assert np.all(r.max(axis=0) <= 2 * r.min(axis=0))


def test_split_without_extension_change():
    geom = geometry(32, 0.25)
    m = hole_rotation(geom)
    sp = split_energies(m, geom, m)
    assert sp.F0_w == 0.0
    assert sp.R == pytest.approx(sp.F0_m, rel=1e-14)
    c = const_field(geom.omega)
    sp0 = split_energies(c, geom, c)
    assert sp0.F0_m == sp0.F1_m == sp0.F0_w == sp0.F1_ext == sp0.R == 0.0


def test_split_rejects_matrix_mismatch():
    geom = geometry(32, 0.25)
    m = const_field(geom.omega)
    with pytest.raises(PreconditionError):
        split_energies(m, geom, const_field(geom.omega, (1.0, 0, 0)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 0.25]))
def test_split_identity_and_bound(seed, eps):
    geom = geometry(16, eps, micro=16 * eps)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(geom.omega.n + (3,))
    m = SphereField(geom.omega, d / np.linalg.norm(d, axis=-1, keepdims=True))
    ext = extend_matrix(m, geom, seed=seed)
    sp = split_energies(m, geom, ext.field)
    assert abs(sp.identity_residual) <= 1e-12 * max(1.0, sp.F0_m + sp.F1_m)
    assert sp.bound_holds


def test_limit_constant():
    cell = build_cell(QUARTER, 8)
    g = Grid.unit(16)
    inp = constant_scenario(cell).input
    lim = limit_energy_G(inp.m_tilde, inp.w, cell, g, micro_n=8, quad_eps=0.25)
    assert lim.F0 == 0.0 and lim.F1 == 0.0 and lim.W_micro == 0.0
    assert lim.total == pytest.approx(hd(const_field(g)).energy(), rel=1e-14)


def test_limit_full_cell_is_dirichlet_energy():
    g = Grid.unit(32)
    x = g.points()
    theta = lambda x: 0.5 * np.sin(TAU * x[..., 0])
    m_tilde = lambda x: rotate_e3(theta(x))

    def jac(x):
        t = theta(x)
        d = np.stack([np.cos(t), 0 * t, -np.sin(t)], axis=-1)
        grad = np.zeros(x.shape)
        grad[..., 0] = 0.5 * TAU * np.cos(TAU * x[..., 0])
        return d[..., :, None] * grad[..., None, :]

    zero = lambda x, z: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(z)))
    lim = limit_energy_G(m_tilde, zero, full_cell(8), g, micro_n=8, quad_eps=0.25, jacobian=jac)
    ref = 0.5 * np.sum(np.sum(jac(x) ** 2, axis=(-2, -1))) * g.cell_volume
    assert lim.F1 == pytest.approx(ref, rel=1e-10)


def test_limit_tensor_matches_pointwise_solves():
    cell = build_cell(QUARTER, 8)
    sc = bump_scenario(cell)
    g = Grid.unit(6)
    kw = dict(micro_n=8, quad_eps=0.5, jacobian=sc.input.grad_m_tilde)
    a = limit_energy_G(sc.input.m_tilde, sc.input.w, cell, g, **kw)
    b = limit_energy_G(sc.input.m_tilde, sc.input.w, cell, g, pointwise=FhomCache(cell, tol=1e-12), **kw)
    assert abs(a.F1 - b.F1) <= 1e-6 * abs(b.F1)


def test_limit_quadrature_doubling():
    cell = build_cell(QUARTER, 8)
    sc = bump_scenario(cell)
    f = [limit_energy_G(sc.input.m_tilde, sc.input.w, cell, Grid.unit(n), micro_n=8, quad_eps=0.25,
                        jacobian=sc.input.grad_m_tilde).F1 for n in (48, 96)]
    assert abs(f[1] - f[0]) <= 1e-4 * abs(f[1])


def test_limit_orthogonality():
    cell = build_cell(QUARTER, 8)
    sc = bump_scenario(cell)
    lim = limit_energy_G(sc.input.m_tilde, sc.input.w, cell, Grid.unit(16), micro_n=8, quad_eps=0.25,
                         jacobian=sc.input.grad_m_tilde)
    assert abs(lim.orthogonality) <= 1e-8
    assert lim.F0 > 0 and lim.W_micro > 0


def test_study_trivial_input():
    cell = build_cell((((1 / 6,) * 3, (5 / 6,) * 3),), 12)
    inp = constant_scenario(cell).input
    st_ = gamma_study(inp, [0.5, 0.25], Grid.unit(24), j_max=1, limit_micro_n=12, limit_quad_eps=0.25)
    assert np.all(st_.column("F0") == 0) and np.all(st_.column("F1") == 0)
    assert st_.limit.F0 == 0 and st_.limit.F1 == 0
    assert st_.claim


def test_study_unsaturated_input_has_no_gap():
    cell = build_cell((((1 / 6,) * 3, (5 / 6,) * 3),), 12)
    inp = tessellation_scenario(cell).input
    st_ = gamma_study(inp, [0.5], Grid.unit(24), j_max=1, limit_micro_n=12, limit_quad_eps=0.25)
    assert not st_.claim
    assert np.isnan(st_.rows[0].gap)
    assert np.isfinite(st_.rows[0].Gtotal)
