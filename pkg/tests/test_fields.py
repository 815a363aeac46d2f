import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microhom.errors import FieldFormatError, FieldIOError, MollifierError, SphereConstraintError
from microhom.fields import (
    Grid,
    SphereField,
    VectorField,
    gradient,
    l2_norm,
    mollify,
    read_field,
    write_field,
)


def test_l2_norm_zero_field():
    assert l2_norm(VectorField.zeros(Grid.unit(8))) == 0.0


def test_l2_norm_unit_constant():
    g = Grid.unit(8)
    f = VectorField(g, np.broadcast_to([1.0, 0.0, 0.0], g.n + (3,)))
    assert l2_norm(f) == pytest.approx(1.0, abs=1e-14)


def test_l2_norm_sine_is_exact_on_midpoints():
    g = Grid.unit(32)
    x = g.points()
    data = np.zeros(g.n + (3,))
    data[..., 0] = np.sin(2 * np.pi * x[..., 0])
    assert abs(l2_norm(VectorField(g, data)) - 1 / np.sqrt(2)) <= 1e-12


def test_l2_norm_mask_shape_checked():
    from microhom.errors import GridMismatchError

    f = VectorField.zeros(Grid.unit(8))
    with pytest.raises(GridMismatchError):
        l2_norm(f, np.ones((4, 4, 4)))


def test_gradient_of_constant_vanishes():
    g = Grid.unit(10)
    f = VectorField(g, np.ones(g.n + (3,)) * [0.3, -1.0, 2.0])
    assert np.max(np.abs(gradient(f).data)) == 0.0


def test_gradient_linear_exact_interior():
    g = Grid((0, 0, 0), (1, 1, 1), 9, periodic=False)
    f = VectorField(g, g.points()[..., :1])
    d = gradient(f).data
    assert np.allclose(d[..., 0], 1.0, atol=1e-13, rtol=0)
    assert np.allclose(d[..., 1:], 0.0, atol=1e-13)


def test_gradient_spectral_single_mode():
    g = Grid.unit(16)
    x = g.points()
    f = VectorField(g, np.sin(2 * np.pi * x[..., 0]))
    d = gradient(f, spectral=True).data[..., 0]
    assert np.max(np.abs(d - 2 * np.pi * np.cos(2 * np.pi * x[..., 0]))) <= 1e-12


def test_mollify_radius_zero_identity():
    g = Grid.unit(12)
    f = VectorField(g, np.random.default_rng(0).standard_normal(g.n + (3,)))
    assert mollify(f, 0.0) is f


def test_mollify_constant_is_fixed():
    g = Grid.unit(16)
    f = VectorField(g, np.full(g.n + (3,), 0.7))
    assert np.max(np.abs(mollify(f, 0.2).data - 0.7)) <= 1e-13


def test_mollify_indicator_mass():
    g = Grid.unit(64)
    x = g.points()
    ind = np.all((x > 0.25) & (x < 0.75), axis=-1).astype(float)
    out = mollify(VectorField(g, ind), 1 / 16)
    assert abs(out.data.sum() * g.cell_volume - 1 / 8) <= 1e-3


def test_mollify_rejects_large_radius():
    with pytest.raises(MollifierError):
        mollify(VectorField.zeros(Grid.unit(8)), 0.6)


def test_mollify_support_damping():
    g = Grid.unit(32)
    x = g.points()
    sup = np.all((x > 0.25) & (x < 0.75), axis=-1)
    out = mollify(VectorField(g, sup.astype(float)), 0.1, support=sup)
    assert np.all(out.data[~sup] == 0.0)


def test_sphere_field_rejects_non_unit():
    g = Grid.unit(4)
    with pytest.raises(SphereConstraintError):
        SphereField(g, np.full(g.n + (3,), 0.5))


def test_round_trip_bytes(tmp_path):
    g = Grid((0.5, -1, 0), (1, 2, 3), (5, 6, 7), (True, False, True))
    f = VectorField(g, np.random.default_rng(1).standard_normal((5, 6, 7, 3)))
    p1, p2 = tmp_path / "a.tsf1", tmp_path / "b.tsf1"
    write_field(p1, f)
    back = read_field(p1)
    write_field(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.grid == g
    assert np.array_equal(back.data, f.data)


def test_empty_path_is_io_error():
    with pytest.raises(FieldIOError):
        write_field("", VectorField.zeros(Grid.unit(4)))
    with pytest.raises(FieldIOError):
        read_field("")


def test_wrong_magic_offset_zero(tmp_path):
    p = tmp_path / "bad.tsf1"
    p.write_bytes(b"XXXX" + bytes(80))
    with pytest.raises(FieldFormatError) as err:
        read_field(p)
    assert err.value.offset == 0


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.tsf1"
    write_field(p, VectorField.zeros(Grid.unit(4)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FieldFormatError):
        read_field(p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.3))
def test_mollify_preserves_mean(seed, radius):
    g = Grid.unit(12)
    f = VectorField(g, np.random.default_rng(seed).standard_normal(g.n + (3,)))
    a = f.data.mean(axis=(0, 1, 2))
    b = mollify(f, radius).data.mean(axis=(0, 1, 2))
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(a)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_gradient_linear(seed, c):
    g = Grid.unit(8)
    rng = np.random.default_rng(seed)
    f = VectorField(g, rng.standard_normal(g.n + (3,)))
    h = VectorField(g, rng.standard_normal(g.n + (3,)))
    lhs = gradient(VectorField(g, f.data + c * h.data)).data
    rhs = gradient(f).data + c * gradient(h).data
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 5), st.floats(-2, 2))
def test_l2_norm_exact_on_trig_polynomials(k1, k2, amp):
    g = Grid.unit(16)
    x = g.points()
    u = np.cos(2 * np.pi * k1 * x[..., 0]) + amp * np.sin(2 * np.pi * (k1 * x[..., 1] + k2 * x[..., 2]))
    exact = np.sqrt(0.5 + 0.5 * amp**2)
    assert abs(l2_norm(VectorField(g, u)) - exact) <= 1e-12 * exact
