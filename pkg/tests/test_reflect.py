from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbflow import flow, reflect, synth
from fbflow.errors import LeftTube
from fbflow.geometry import get_pair
from fbflow.grid import Field, HalfDiskGrid

from oracles import geodesic_reflection

SPHERE = get_pair("sphere")
FLAT = get_pair("flat")


def exact(h, lam=1.5, center=(0.1, 0.0)):
    return synth.exact_solution(HalfDiskGrid(1.0, h), lam=lam, center=center)


def smooth_sphere_field(h, a, b, c):
    """A smooth map into the sphere, close to K, satisfying the free boundary condition."""
    g = HalfDiskGrid(1.0, h)
    th = a * g.X + c * g.X * g.Y
    ph = b * g.Y * (1 + 0.5 * g.X)
    vals = np.stack([np.cos(ph) * np.cos(th), np.sin(ph), np.cos(ph) * np.sin(th)], -1)
    return Field(g, vals, SPHERE)


def test_ghost_values():
    y = np.array([0.6, 0.0, 0.8])
    assert np.array_equal(reflect.ghost_value(SPHERE, y), y)
    assert np.allclose(reflect.ghost_value(FLAT, np.array([0.3, 0.7])), [0.3, -0.7])
    v = np.array([0.6, 0.48, 0.64]) / np.linalg.norm([0.6, 0.48, 0.64])
    out = reflect.ghost_value(SPHERE, v)
    assert np.allclose(out, v * [1, -1, 1], atol=1e-15)
    assert np.allclose(out, geodesic_reflection(v), atol=1e-12)


def test_even_reflection_of_k_valued_field():
    g = HalfDiskGrid(1.0, 1 / 16)
    th = 0.3 * g.X + 0.2 * g.Y
    f = Field(g, np.stack([np.cos(th), np.zeros_like(th), np.sin(th)], -1), SPHERE)
    rf = reflect.extend(f)
    assert np.array_equal(rf.grid.Y, -rf.grid.Y[::-1])
    assert np.array_equal(rf.values, rf.values[::-1])


def test_flat_identity_extends_to_identity():
    f = synth.identity_field(HalfDiskGrid(1.0, 1 / 16))
    rf = reflect.extend(f)
    pts = np.stack([rf.grid.X, rf.grid.Y], -1)
    assert np.array_equal(rf.values[rf.grid.mask], pts[rf.grid.mask])


def test_exact_map_extends_to_full_disk_stereographic():
    h = 1 / 32
    rf = reflect.extend(exact(h))
    full = synth.inverse_stereographic(np.stack([rf.grid.X, rf.grid.Y], -1), 1.5, (0.1, 0.0))
    assert np.max(np.abs(rf.values - full)[rf.grid.mask]) <= 1e-12
    assert reflect.trace_gap(rf) == 0.0


def test_leaving_the_tube_raises():
    with pytest.raises(LeftTube):
        reflect.extend(exact(1 / 16, lam=0.5))


def test_constant_on_k_gives_zero_potentials():
    g = HalfDiskGrid(1.0, 1 / 16)
    f = synth.constant_field(g, np.array([0.6, 0.0, 0.8]), SPHERE)
    rf = reflect.extend(f)
    pa = reflect.assemble_potentials(rf)
    assert np.max(np.abs(pa.Omega[pa.mask])) <= 1e-12
    tau = flow.tension_field(f)
    assert reflect.divergence_form_residual(rf, pa, tau) <= 1e-12
    assert reflect.global_form_residual(rf, tau).residual <= 1e-12


def test_flat_pair_potentials_and_residuals():
    f = synth.identity_field(HalfDiskGrid(1.0, 1 / 16))
    rf = reflect.extend(f)
    pa = reflect.assemble_potentials(rf)
    lower = rf.grid.mask & (rf.grid.Y < 0)
    assert np.array_equal(pa.Q[lower], np.broadcast_to(np.diag([1.0, -1.0]), (lower.sum(), 2, 2)))
    assert np.max(np.abs(pa.Omega)) == 0.0
    tau = flow.tension_field(f)
    assert reflect.divergence_form_residual(rf, pa, tau) <= 1e-12
    assert reflect.global_form_residual(rf, tau).residual <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_potentials_are_antisymmetric(a, b, c):
    f = smooth_sphere_field(1 / 16, a, b, c)
    pa = reflect.assemble_potentials(reflect.extend(f))
    assert pa.antisymmetry_max() <= 1e-10
    assert reflect.eigen_boundary_gap(reflect.extend(f), pa) <= 1e-8


def test_divergence_residual_converges_on_exact_map():
    res = []
    for h in (1 / 32, 1 / 64):
        f = exact(h)
        rf = reflect.extend(f)
        pa = reflect.assemble_potentials(rf)
        res.append(reflect.divergence_form_residual(rf, pa, flow.tension_field(f)))
    assert res[0] / res[1] >= 1.8
    assert np.log2(res[0] / res[1]) >= 1.0


def test_global_form_agrees_and_reports_constants():
    f = exact(1 / 32)
    rf = reflect.extend(f)
    tau = flow.tension_field(f)
    rep = reflect.global_form_residual(rf, tau)
    pa = reflect.assemble_potentials(rf)
    assert rep.residual == pytest.approx(reflect.divergence_form_residual(rf, pa, tau), rel=1e-6)
    assert np.isfinite(rep.upsilon_constant) and rep.upsilon_constant > 0
    assert reflect.upper_equivalence_gap(rf, pa, tau) <= 1e-10
