from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbflow.errors import OutsideTube
from fbflow.geometry import (
    FlatPlane,
    Sphere,
    d_sigma,
    get_pair,
    involute,
    p_matrix,
    project_to_target,
    second_fundamental_form,
)

from oracles import fd_jacobian, fd_second_fundamental_form, geodesic_reflection, sphere_projection

SPHERE = get_pair("sphere")
FLAT = get_pair("flat")

unit = st.tuples(*[st.floats(-2, 2, allow_nan=False)] * 3).map(np.array).filter(lambda v: np.linalg.norm(v) > 0.1)


def near_k(max_angle=1.2):
    """Points on the sphere within ``max_angle`` of the great circle {y2 = 0}."""
    return st.tuples(st.floats(0, 2 * np.pi), st.floats(-max_angle, max_angle)).map(
        lambda a: np.array([np.cos(a[1]) * np.cos(a[0]), np.sin(a[1]), np.cos(a[1]) * np.sin(a[0])]))


def test_projection_examples():
    t = Sphere()
    assert np.allclose(project_to_target(t, np.array([0.0, 0.0, 2.0])), [0, 0, 1])
    y = np.array([0.0, 0.6, 0.8])
    assert np.array_equal(project_to_target(t, y), y / np.linalg.norm(y))
    out = project_to_target(t, np.array([0.3, 0.4, 0.0]))
    assert np.allclose(out, sphere_projection([0.3, 0.4, 0.0]))
    assert np.allclose(out, [0.6, 0.8, 0.0])
    assert abs(np.linalg.norm(out) - 1) < 1e-15


@given(unit)
def test_projection_idempotent(y):
    t = Sphere()
    p = project_to_target(t, y)
    assert np.allclose(project_to_target(t, p), p, atol=1e-15)
    assert t.distance(p) < 1e-14


def test_second_fundamental_form_examples():
    t = Sphere()
    y = np.array([0.0, 0.0, 1.0])
    e1 = np.array([1.0, 0.0, 0.0])
    assert np.allclose(second_fundamental_form(t, y, e1, e1), [0, 0, -1])
    assert np.allclose(second_fundamental_form(t, y, np.zeros(3), e1), 0)
    assert np.allclose(second_fundamental_form(FlatPlane(), np.array([0.3, 0.2]), np.array([1.0, 2.0]),
                                               np.array([0.5, 0.1])), 0)


@given(near_k(1.5), unit, unit)
def test_second_fundamental_form_matches_projector_derivative(y, a, b):
    t = Sphere()
    xi, eta = t.tangent(y, a), t.tangent(y, b)
    ref = fd_second_fundamental_form(y, xi, eta)
    assert np.allclose(second_fundamental_form(t, y, xi, eta), ref, atol=1e-7)


def test_involution_matches_geodesic_reflection():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(100, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts = pts[np.abs(pts[:, 1]) < 0.95]
    for y in pts:
        assert np.allclose(involute(SPHERE, y), geodesic_reflection(y), atol=1e-12)


def test_involution_fixes_k_and_flat_case():
    y = np.array([0.6, 0.0, 0.8])
    assert np.array_equal(involute(SPHERE, y), y)
    assert np.allclose(involute(FLAT, np.array([0.3, 0.7])), [0.3, -0.7])


@given(near_k())
def test_involution_is_an_involution(y):
    assert np.allclose(involute(SPHERE, involute(SPHERE, y)), y, atol=1e-14)


def test_d_sigma_on_k():
    y = np.array([1.0, 0.0, 0.0])
    D = d_sigma(SPHERE, y)
    e2, e3 = np.eye(3)[1], np.eye(3)[2]
    assert np.allclose(D @ e3, e3)
    assert np.allclose(D @ e2, -e2)
    assert np.allclose(d_sigma(FLAT, np.array([0.2, 0.4])), np.diag([1.0, -1.0]))


@given(near_k())
def test_d_sigma_matches_finite_differences_on_tangents(y):
    t = SPHERE.target
    fd = fd_jacobian(lambda z: involute(SPHERE, z / np.linalg.norm(z)), y)
    D = d_sigma(SPHERE, y)
    P = t.tangent_projector(y)
    assert np.allclose(D @ P, fd @ P, atol=1e-7)


@given(near_k(), unit)
def test_d_sigma_composition_is_identity_on_tangents(y, a):
    v = SPHERE.target.tangent(y, a)
    back = d_sigma(SPHERE, involute(SPHERE, y)) @ (d_sigma(SPHERE, y) @ v)
    assert np.allclose(back, v, atol=1e-12)


def test_p_matrix_eigenvalues_on_k():
    y = np.array([0.6, 0.0, 0.8])
    assert np.allclose(p_matrix(SPHERE, y).eigenvalues, 1.0, atol=1e-8)


def test_p_matrix_flat_pair():
    r = p_matrix(FLAT, np.array([0.3, -0.2]))
    assert np.allclose(r.P, np.diag([1.0, -1.0]))
    assert np.allclose(r.Xi, np.eye(2))


def test_p_matrix_diagonalizes_ptp():
    th = 0.1
    y = np.array([0.6 * np.cos(th), np.sin(th), 0.8 * np.cos(th)])
    assert abs(SPHERE.dist_to_k(y) - 0.1) < 1e-12
    r = p_matrix(SPHERE, y)
    assert np.max(np.abs(r.O.T @ r.P.T @ r.P @ r.O - r.Xi)) <= 1e-10


def test_tube_check():
    far = np.array([0.0, 1.0, 0.0])
    with pytest.raises(OutsideTube):
        SPHERE.check_tube(far)
    with pytest.raises(OutsideTube):
        project_to_target(Sphere(), np.zeros(3))
    with pytest.raises(OutsideTube):
        project_to_target(Sphere(tubular_radius=0.5), np.array([0.0, 0.0, 0.4]))


@settings(max_examples=50)
@given(near_k())
def test_project_k_lands_on_k(y):
    z = SPHERE.project_k(y)
    assert SPHERE.dist_to_k(z) < 1e-14
    assert abs(np.linalg.norm(z) - 1) < 1e-14
