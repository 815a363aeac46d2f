import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microhom.cellsolve import (
    cell_tensor,
    fhom,
    fhom_closed_form,
    fhom_dense_oracle,
    fhom_from_tensor,
    hdz,
    solve_cell_poisson,
    spectral_curl,
    tangent_basis,
    unconstrained_minimum,
)
from microhom.errors import SolvabilityError, SphereConstraintError
from microhom.fields import Grid, VectorField
from microhom.geometry import build_cell, full_cell

TAU = 2 * np.pi
QUARTER = (((0.25,) * 3, (0.75,) * 3),)


@pytest.fixture(scope="module")
def cell16():
    return build_cell(QUARTER, 16)


@pytest.fixture(scope="module")
def cell8():
    return build_cell(QUARTER, 8)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_poisson_zero():
    sol = solve_cell_poisson(VectorField.zeros(Grid.unit(8), 1))
    assert np.all(sol.data == 0)


def test_poisson_single_mode():
    g = Grid.unit(16)
    r = np.sin(TAU * g.points()[..., 0])
    sol = solve_cell_poisson(VectorField(g, 4 * np.pi**2 * r))
    assert np.max(np.abs(sol.data[..., 0] - r)) <= 1e-12
    assert abs(sol.data.mean()) <= 1e-15


def test_poisson_rejects_nonzero_mean():
    with pytest.raises(SolvabilityError, match="mean"):
        solve_cell_poisson(VectorField(Grid.unit(8), np.ones((8, 8, 8))))


def test_hdz_constant_is_zero():
    g = Grid.unit(8)
    assert np.max(np.abs(hdz(VectorField(g, np.ones(g.n + (3,)))).data)) <= 1e-15


def test_hdz_single_mode():
    g = Grid.unit(16)
    m = np.zeros(g.n + (3,))
    m[..., 0] = np.sin(TAU * g.points()[..., 0])
    h = hdz(VectorField(g, m)).data
    assert np.max(np.abs(h + m)) <= 1e-10


def test_hdz_divergence_free_input():
    g = Grid.unit(16)
    m = np.zeros(g.n + (3,))
    m[..., 0] = np.sin(TAU * g.points()[..., 1])
    assert np.max(np.abs(hdz(VectorField(g, m)).data)) <= 1e-12


def test_tangent_basis_e3():
    # k = 1: t1 = e1 x e3 = -e2, t2 = e3 x t1 = e1
    b = tangent_basis([0, 0, 1.0])
    assert np.allclose(b.t1, [0, -1, 0]) and np.allclose(b.t2, [1, 0, 0])


def test_tangent_basis_e1():
    # k = 2 is the first minimiser of |s_k| (ties broken by lowest index)
    b = tangent_basis([1.0, 0, 0])
    assert np.allclose(b.t1, [0, 0, -1]) and np.allclose(b.t2, [0, 1, 0])


def test_tangent_basis_diagonal():
    b = tangent_basis(unit([1, 1, 1]))
    F = np.stack([b.s, b.t1, b.t2])
    assert np.max(np.abs(F @ F.T - np.eye(3))) <= 1e-12
    assert np.linalg.det(F) == pytest.approx(1.0, abs=1e-12)


def test_tangent_basis_rejects_non_unit():
    with pytest.raises(SphereConstraintError):
        tangent_basis([1.0, 1.0, 0.0])


def test_fhom_zero_gradient(cell8):
    r = fhom([0, 0, 1.0], np.zeros((3, 3)), cell8)
    assert r.value == 0.0
    assert np.all(r.corrector.data == 0)


def test_fhom_full_cell():
    rng = np.random.default_rng(3)
    xi = rng.standard_normal((3, 3))
    r = fhom(unit(rng.standard_normal(3)), xi, full_cell(8))
    assert abs(r.value - 0.5 * np.sum(xi**2)) <= 1e-10 * np.sum(xi**2)
    assert np.max(np.abs(r.corrector.data)) <= 1e-10


def test_fhom_matches_dense_oracle(cell16):
    xi = np.zeros((3, 3))
    xi[0, 0] = 1.0
    r = fhom([0, 0, 1.0], xi, cell16)
    dense, _ = fhom_dense_oracle([0, 0, 1.0], xi, cell16)
    assert 0 < r.value <= 0.5 * (7 / 8)
    assert abs(r.value - dense) <= 1e-8


def test_fhom_homogeneity(cell8):
    rng = np.random.default_rng(5)
    s, xi = unit(rng.standard_normal(3)), rng.standard_normal((3, 3))
    base = fhom(s, xi, cell8).value
    for t in (2.0, -1.0, 1 / 3):
        assert abs(fhom(s, t * xi, cell8).value - t * t * base) <= 1e-10 * t * t * base


def test_corrector_is_tangent(cell8):
    rng = np.random.default_rng(6)
    s = unit(rng.standard_normal(3))
    r = fhom(s, rng.standard_normal((3, 3)), cell8)
    assert np.max(np.abs(r.corrector.data @ s)) <= 1e-12


def test_tensor_agrees_with_direct_solve(cell8):
    t = cell_tensor(cell8)
    rng = np.random.default_rng(7)
    for _ in range(3):
        s, xi = unit(rng.standard_normal(3)), rng.standard_normal((3, 3))
        assert fhom_from_tensor(s, xi, t) == pytest.approx(fhom(s, xi, cell8).value, rel=1e-8)


def test_closed_form_zero(cell8):
    rep = fhom_closed_form([0, 0, 1.0], np.zeros((3, 3)), cell8)
    assert rep.value == 0.0 and rep.discrepancy == 0.0


def test_closed_form_full_cell_unsolvable():
    rep = fhom_closed_form([0, 0, 1.0], np.eye(3), full_cell(8))
    assert not rep.solvable
    assert rep.rhs_mean == 1.0
    assert rep.status.startswith("failed")


def test_closed_form_reports_discrepancy(cell16):
    xi = np.zeros((3, 3))
    xi[0, 0] = 1.0
    rep = fhom_closed_form([0, 0, 1.0], xi, cell16)
    assert not rep.solvable
    assert np.isfinite(rep.discrepancy)
    assert rep.display_matrix.shape == (3, 3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hdz_gradient_field_and_weak_divergence(seed):
    g = Grid.unit(12)
    rng = np.random.default_rng(seed)
    m = VectorField(g, rng.standard_normal(g.n + (3,)))
    h = hdz(m)
    assert np.max(np.abs(spectral_curl(h).data)) <= 1e-10
    assert np.max(np.abs(h.data.mean(axis=(0, 1, 2)))) <= 1e-12
    z = g.points()
    b = m.data + h.data
    for _ in range(20):
        k = rng.integers(-4, 5, size=3)
        phase = rng.uniform(0, TAU)
        arg = TAU * (z @ k) + phase
        grad_psi = -np.sin(arg)[..., None] * (TAU * k)
        res = np.mean(np.sum(b * grad_psi, axis=-1))
        assert abs(res) <= 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fhom_bounds_and_relaxation(seed):
    cell = build_cell(QUARTER, 8)
    rng = np.random.default_rng(seed)
    s, xi = unit(rng.standard_normal(3)), rng.standard_normal((3, 3))
    val = fhom(s, xi, cell).value
    assert val >= 0
    assert val <= 0.5 * cell.matrix_volume * np.sum(xi**2) + 1e-12
    assert val >= unconstrained_minimum(xi, cell) - 1e-10


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_corrector_ignores_normal_rows(seed):
    cell = build_cell(QUARTER, 8)
    rng = np.random.default_rng(seed)
    s, xi, a = unit(rng.standard_normal(3)), rng.standard_normal((3, 3)), rng.standard_normal(3)
    c1 = fhom(s, xi, cell).corrector.coeffs
    c2 = fhom(s, xi + np.outer(s, a), cell).corrector.coeffs
    assert np.max(np.abs(c1 - c2)) <= 1e-12 * max(1.0, np.max(np.abs(c1)))
