from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fbflow import synth
from fbflow.errors import OffManifold, RadiusTooSmall
from fbflow.geometry import get_pair
from fbflow.grid import (
    ARC,
    FREE,
    INTERIOR,
    Field,
    HalfDiskGrid,
    ball_energy,
    dirichlet_energy,
    energy_density,
    gradient,
    oscillation,
    point_set_diameter,
)

from oracles import brute_diameter, half_disk_identity_energy, stereographic_density, truncated_bubble_energy

SPHERE = get_pair("sphere")


def test_lattice_layout():
    g = HalfDiskGrid(1.0, 1 / 64)
    assert g.shape == (65, 129)
    assert np.all(g.kind[0][g.mask[0]] != INTERIOR)
    assert np.all(g.Y[g.kind == FREE] == 0.0)
    assert (g.kind == ARC).any()
    assert g.weights.sum() == pytest.approx(np.pi / 2, rel=1e-4)


def test_full_disk_quadrature_area():
    g = HalfDiskGrid(1.0, 1 / 64, full=True)
    assert g.weights.sum() == pytest.approx(np.pi, rel=1e-4)
    assert not (g.kind == FREE).any()


def test_constant_field_has_zero_gradient_and_energy():
    g = HalfDiskGrid(1.0, 1 / 32)
    f = synth.constant_field(g, np.array([0.6, 0.0, 0.8]), SPHERE)
    assert np.max(np.abs(gradient(f))) <= 1e-12
    assert dirichlet_energy(f) <= 1e-24
    assert ball_energy(f, (0.1, 0.0), 0.3) <= 1e-24
    assert oscillation(f) == 0


def test_identity_gradient_is_identity():
    g = HalfDiskGrid(1.0, 1 / 32)
    f = synth.identity_field(g)
    grad = gradient(f)
    assert np.allclose(grad[g.kind == INTERIOR], np.eye(2))


def test_identity_energy_and_oscillation_converge():
    errs = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        f = synth.identity_field(HalfDiskGrid(1.0, h))
        errs.append(abs(dirichlet_energy(f) - half_disk_identity_energy()))
        assert abs(oscillation(f) - 2.0) <= 2 * h
    assert errs[2] < errs[0]
    assert errs[2] <= 1 / 64


def test_stereographic_density_second_order():
    errs = []
    for h in (1 / 32, 1 / 64):
        g = HalfDiskGrid(1.0, h)
        f = synth.exact_solution(g, lam=1.0, center=(0.0, 0.0))
        dens = 2 * energy_density(f)
        sel = (g.kind == INTERIOR) & (g.Y > 0.1) & (np.hypot(g.X, g.Y) < 0.8)
        ref = stereographic_density(np.stack([g.X, g.Y], -1))
        errs.append(np.max(np.abs(dens - ref)[sel]))
    assert errs[0] / errs[1] > 3.5


def test_truncated_full_plane_bubble_energy():
    g = HalfDiskGrid(1.0, 1 / 128, full=True)
    u = synth.inverse_stereographic(np.stack([g.X, g.Y], -1), 0.1)
    f = Field(g, u, SPHERE, check=False)
    ref = truncated_bubble_energy(1.0, 0.1)
    assert ref == pytest.approx(4 * np.pi * 100 / 101, rel=1e-10)
    assert dirichlet_energy(f) == pytest.approx(ref, rel=0.01)


def test_ball_energy_limits():
    g = HalfDiskGrid(1.0, 1 / 64)
    f = synth.exact_solution(g)
    assert ball_energy(f, (0.0, 0.0), 1.5) == pytest.approx(dirichlet_energy(f), rel=1e-12)
    with pytest.raises(RadiusTooSmall):
        ball_energy(f, (0.0, 0.0), g.h)


def test_ball_around_glued_bubble_captures_most_energy():
    lam = 1 / 32
    g = HalfDiskGrid(1.0, 1 / 256)
    base = synth.constant_base(np.array([0.0, 0.0, 1.0]))
    f = synth.attach(base, synth.BOUNDARY_DISK, (0.1, 0.0), lam).sample(g)
    assert ball_energy(f, (0.1, 0.0), 10 * lam) >= 0.9 * 2 * np.pi


def test_neck_oscillation_of_separated_bubble_is_small():
    lam = 1 / 256
    g = HalfDiskGrid(1.0, 1 / 256)
    base = synth.constant_base(np.array([0.0, 0.0, 1.0]))
    f = synth.attach(base, synth.BOUNDARY_DISK, (0.1, 0.0), lam).sample(g)
    r = np.hypot(g.X - 0.1, g.Y)
    neck = (r > 40 * lam) & (r < 0.25)
    assert oscillation(f, neck) <= 0.05


def test_field_rejects_off_manifold_values():
    g = HalfDiskGrid(1.0, 1 / 16)
    vals = np.broadcast_to([0.0, 0.0, 1.1], g.shape + (3,))
    with pytest.raises(OffManifold):
        Field(g, vals, SPHERE)
    vals = np.broadcast_to([0.0, 0.6, 0.8], g.shape + (3,))
    with pytest.raises(OffManifold):
        Field(g, vals, SPHERE)


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 400), st.integers(1, 3)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_diameter_matches_brute_force(pts):
    assert point_set_diameter(pts) == pytest.approx(brute_diameter(pts), rel=1e-12, abs=1e-12)


def test_diameter_large_clouds_exact():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6000, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    cap = x[x[:, 2] > 0.2]
    for pts in (x, cap, rng.uniform(size=(5000, 2))):
        assert point_set_diameter(pts) == pytest.approx(brute_diameter(pts), rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.5), st.floats(-0.3, 0.3))
def test_disk_fraction_is_area(r, cx):
    g = HalfDiskGrid(1.0, 1 / 64)
    area = g.disk_fraction((cx, 0.0), r).sum() * g.h**2
    assert area == pytest.approx(np.pi * r**2 / 2, rel=0.01)
