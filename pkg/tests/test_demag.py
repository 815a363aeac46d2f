import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microhom.cellsolve import hdz_array
from microhom.demag import (
    ball_magnetisation,
    hd,
    homogenized_stray_energy,
    maxwell_residuals,
    self_energy,
)
from microhom.errors import PreconditionError, SupportError
from microhom.fields import Grid, VectorField
from microhom.geometry import build_cell
from microhom.unfolding import sample_two_scale

TAU = 2 * np.pi


def test_zero_magnetisation():
    m = VectorField.zeros(Grid.unit(8))
    sol = hd(m)
    assert np.all(sol.h == 0)
    assert self_energy(m, sol) == (0.0, 0.0)
    assert maxwell_residuals(m, sol) == (0.0, 0.0)


def test_padding_below_two_rejected():
    with pytest.raises(PreconditionError):
        hd(VectorField.zeros(Grid.unit(8)), pad=1.5)


def test_uniform_cube_axes_equal():
    g = Grid.unit(16)
    energies = []
    for j in range(3):
        d = np.zeros(g.n + (3,))
        d[..., j] = 1.0
        m = VectorField(g, d)
        energies.append(-float(np.sum(hd(m).restrict().data[..., j])) * g.cell_volume)
    assert max(energies) - min(energies) <= 0.01 * max(energies)


def test_smooth_magnetisation_divergence_free_residual():
    g = Grid.unit(32)
    x = g.points()
    r2 = np.sum((x - 0.5) ** 2, axis=-1)
    bump = np.where(r2 < 0.16, np.exp(-1 / np.maximum(1e-300, 1 - r2 / 0.16)), 0.0)
    m = VectorField(g, bump[..., None] * [0.3, -0.5, 1.0])
    div, curl = maxwell_residuals(m, hd(m))
    assert div <= 1e-8 and curl <= 1e-10


def test_padding_convergence_reported():
    g = Grid.unit(32)
    m = ball_magnetisation(g)
    e2 = hd(m, 2.0).energy()
    e3 = hd(m, 3.0).energy()
    e4 = hd(m, 4.0).energy()
    assert abs(e4 - e3) < abs(e3 - e2)


def test_homogenized_without_w_is_plain_self_energy():
    g = Grid.unit(16)
    cell = build_cell((((0.25,) * 3, (0.75,) * 3),), 4)
    mt = VectorField(g, np.broadcast_to([0.0, 0.6, 0.8], g.n + (3,)))
    w = sample_two_scale(lambda x, z: np.zeros(np.broadcast_shapes(x.shape, z.shape)), g, 0.25)
    rep = homogenized_stray_energy(mt, w, cell.chi0)
    assert rep.micro == 0.0
    assert rep.macro == pytest.approx(hd(mt).energy(), rel=1e-14)


def test_homogenized_two_terms_assembled():
    g = Grid.unit(32)
    cell = build_cell((((0.25,) * 3, (0.75,) * 3),), 8)
    mt = VectorField.zeros(g)

    def w(x, z):
        eta = cell.indicator(z).astype(float)
        out = np.zeros(np.broadcast_shapes(x.shape, z.shape))
        out[..., 0] = np.sin(TAU * z[..., 0]) * eta + 0.3 * eta
        return out

    ws = sample_two_scale(w, g, 0.25)
    rep = homogenized_stray_energy(mt, ws, cell.chi0)
    # first term: the x-constant integral of w over the cell
    I = ws.data.mean(axis=(3, 4, 5))[0, 0, 0]
    assert rep.macro == pytest.approx(hd(VectorField(g, np.broadcast_to(I, g.n + (3,)))).energy(), rel=1e-12)
    # second term: per-cell micro energies summed
    hz = hdz_array(ws.data[0, 0, 0], axes=(0, 1, 2))
    per_cell = float(np.mean(np.sum(hz * hz, axis=-1)))
    assert rep.micro == pytest.approx(per_cell, rel=1e-12)
    assert abs(rep.orthogonality) <= 1e-12


def test_homogenized_support_violation():
    g = Grid.unit(16)
    cell = build_cell((((0.25,) * 3, (0.75,) * 3),), 4)
    w = sample_two_scale(lambda x, z: np.ones(np.broadcast_shapes(x.shape, z.shape)), g, 0.25)
    with pytest.raises(SupportError):
        homogenized_stray_energy(VectorField.zeros(g), w, cell.chi0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([8, 9, 12]))
def test_energy_identity_and_norm_bound(seed, n):
    g = Grid.unit(n)
    m = VectorField(g, np.random.default_rng(seed).standard_normal(g.n + (3,)))
    sol = hd(m)
    ef, ep = self_energy(m, sol)
    assert abs(ef - ep) <= 1e-6 * max(1.0, ef)
    assert ef <= float(np.sum(m.data**2)) * g.cell_volume * (1 + 1e-6)
    _, curl = maxwell_residuals(m, sol)
    assert curl <= 1e-10
