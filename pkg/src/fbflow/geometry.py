"""Embedded targets, free-boundary pairs and the reflection calculus.

All evaluators act on arrays whose last axis is the ambient dimension and
broadcast over any leading axes, so a whole field can be processed at once.

Sign convention: ``second_fundamental_form`` returns the classical
``A(y)(xi, eta) = D Tan(y)[xi] eta``, which for the unit sphere is
``-<xi, eta> y``.  With it the tension field is ``Tan(u) Lap u`` and
``Lap u = Tan(u) Lap u + A(u)(grad u, grad u)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FrameUnavailable, OutsideTube, SingularP


def _dot(a, b):
    return np.sum(a * b, axis=-1)


class EmbeddedTarget:
    """A closed submanifold N of R^m given by closed-form evaluators."""

    name = "target"
    ambient_dim: int
    intrinsic_dim: int
    tubular_radius: float

    def distance(self, y):
        raise NotImplementedError

    def project(self, y):
        raise NotImplementedError

    def tangent_projector(self, y):
        raise NotImplementedError

    def second_fundamental_form(self, y, xi, eta):
        raise NotImplementedError

    def normal_frame(self, y):
        """Orthonormal normal vectors at ``y``, shape ``(..., m, m - n)``."""
        raise NotImplementedError

    def projection_hessian(self, y, a, b):
        """Second derivative ``D^2 Pi_N(y)(a, b)`` of the nearest-point map."""
        raise NotImplementedError

    def residual(self, y):
        """Defining-equation residual, zero exactly on N."""
        raise NotImplementedError

    def tangent(self, y, v):
        return np.einsum("...ij,...j->...i", self.tangent_projector(y), v)


@dataclass(frozen=True)
class Sphere(EmbeddedTarget):
    """Unit sphere S^n in R^(n+1).

    The nearest-point map is defined everywhere except at the origin, so the
    tube only limits the inner side: ``project`` accepts ``|y| > 1 - tubular_radius``.
    """

    n: int = 2
    tubular_radius: float = 1.0

    name = "sphere"

    @property
    def ambient_dim(self) -> int:
        return self.n + 1

    @property
    def intrinsic_dim(self) -> int:
        return self.n

    def distance(self, y):
        return np.abs(np.linalg.norm(y, axis=-1) - 1.0)

    def residual(self, y):
        return _dot(y, y) - 1.0

    def project(self, y):
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        if np.any(~(r > 1.0 - self.tubular_radius)):
            raise OutsideTube(f"|y| = {np.min(r):.3g} is inside the tube radius {self.tubular_radius} of the sphere")
        return y / r

    def tangent_projector(self, y):
        y = np.asarray(y, dtype=float)
        m = self.ambient_dim
        return np.eye(m) - y[..., :, None] * y[..., None, :]

    def tangent(self, y, v):
        return v - _dot(y, v)[..., None] * y

    def second_fundamental_form(self, y, xi, eta):
        y = np.asarray(y, dtype=float)
        xi_t = self.tangent(y, np.asarray(xi, dtype=float))
        eta_t = self.tangent(y, np.asarray(eta, dtype=float))
        return -_dot(xi_t, eta_t)[..., None] * y

    def normal_frame(self, y):
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        if np.any(r < 1e-12):
            raise FrameUnavailable("the radial normal is undefined at the origin")
        return (y / r)[..., :, None]

    def projection_hessian(self, y, a, b):
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        ya, yb, ab = _dot(y, a)[..., None], _dot(y, b)[..., None], _dot(a, b)[..., None]
        return -(b * ya + a * yb + y * ab) / r**3 + 3.0 * y * ya * yb / r**5


@dataclass(frozen=True)
class FlatPlane(EmbeddedTarget):
    """N = R^2 sitting in itself; every curvature term vanishes."""

    tubular_radius: float = np.inf

    name = "plane"
    ambient_dim = 2
    intrinsic_dim = 2

    def distance(self, y):
        return np.zeros(np.shape(y)[:-1])

    def residual(self, y):
        return np.zeros(np.shape(y)[:-1])

    def project(self, y):
        return np.array(y, dtype=float)

    def tangent_projector(self, y):
        return np.broadcast_to(np.eye(2), np.shape(y)[:-1] + (2, 2)).copy()

    def tangent(self, y, v):
        return np.array(v, dtype=float)

    def second_fundamental_form(self, y, xi, eta):
        return np.zeros(np.broadcast_shapes(np.shape(y), np.shape(xi), np.shape(eta)))

    def normal_frame(self, y):
        return np.zeros(np.shape(y)[:-1] + (2, 0))

    def projection_hessian(self, y, a, b):
        return np.zeros(np.broadcast_shapes(np.shape(y), np.shape(a)))


class FreeBoundaryPair:
    """A target N with a submanifold K and the geodesic reflection across K.

    Catalogue pairs have a linear involution ``sigma(y) = diag(signs) y``;
    ``signs`` is exposed so the time stepper can use a compiled kernel.
    """

    name: str
    target: EmbeddedTarget
    k_dim: int
    delta0: float
    signs: np.ndarray | None = None

    def dist_to_k(self, y):
        raise NotImplementedError

    def project_k(self, y):
        raise NotImplementedError

    def involute(self, y):
        raise NotImplementedError

    def d_sigma(self, y):
        raise NotImplementedError

    def k_tangent_projector(self, y):
        """Orthogonal projector of R^m onto T_yK for y on K."""
        raise NotImplementedError

    def sigma_pi_hessian(self, z, a, b):
        """``D^2(sigma o Pi_N)(z)(a, b)`` for pairs whose involution is linear."""
        if self.signs is None:
            raise NotImplementedError("second derivative needs a linear involution")
        return self.signs * self.target.projection_hessian(z, a, b)

    def check_tube(self, y, error=OutsideTube):
        d = self.dist_to_k(y)
        if np.any(~(d < self.delta0)):
            raise error(f"distance {np.max(d):.4g} to K reaches the tube radius {self.delta0:.4g}")
        return d


@dataclass(frozen=True)
class SphereSubspherePair(FreeBoundaryPair):
    """S^n with K = S^n intersected with the coordinate subspace V.

    ``flip`` lists the ambient axes orthogonal to V; the default is the great
    circle ``{y_2 = 0}`` of S^2 (axis index 1).  The reflection across a
    totally geodesic great subsphere is the linear map ``2 Pi_V - I``.
    """

    n: int = 2
    flip: tuple[int, ...] = (1,)
    delta0: float = 0.9 * np.pi / 2
    name: str = "sphere"
    target: Sphere = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "target", Sphere(self.n))

    @property
    def k_dim(self) -> int:
        return self.n - len(self.flip)

    @property
    def signs(self) -> np.ndarray:
        s = np.ones(self.n + 1)
        s[list(self.flip)] = -1.0
        return s

    def _pv(self, y):
        out = np.array(y, dtype=float)
        out[..., list(self.flip)] = 0.0
        return out

    def dist_to_k(self, y):
        y = np.asarray(y, dtype=float)
        return np.arctan2(np.linalg.norm(y[..., list(self.flip)], axis=-1), np.linalg.norm(self._pv(y), axis=-1))

    def project_k(self, y):
        self.check_tube(y)
        p = self._pv(y)
        return p / np.linalg.norm(p, axis=-1, keepdims=True)

    def involute(self, y):
        self.check_tube(y)
        return np.asarray(y, dtype=float) * self.signs

    def d_sigma(self, y):
        self.check_tube(y)
        return self.signs[:, None] * self.target.tangent_projector(y)

    def k_tangent_projector(self, y):
        y = np.asarray(y, dtype=float)
        pv = np.diag((self.signs > 0).astype(float))
        return pv - y[..., :, None] * y[..., None, :]


@dataclass(frozen=True)
class FlatLinePair(FreeBoundaryPair):
    """N = R^2 with K the first coordinate axis."""

    delta0: float = np.inf
    name: str = "flat"
    target: FlatPlane = field(default_factory=FlatPlane)
    k_dim: int = 1

    @property
    def signs(self) -> np.ndarray:
        return np.array([1.0, -1.0])

    def dist_to_k(self, y):
        return np.abs(np.asarray(y, dtype=float)[..., 1])

    def project_k(self, y):
        out = np.array(y, dtype=float)
        out[..., 1] = 0.0
        return out

    def involute(self, y):
        return np.asarray(y, dtype=float) * self.signs

    def d_sigma(self, y):
        return np.broadcast_to(np.diag(self.signs), np.shape(y)[:-1] + (2, 2)).copy()

    def k_tangent_projector(self, y):
        return np.broadcast_to(np.diag([1.0, 0.0]), np.shape(y)[:-1] + (2, 2)).copy()


PAIRS = {"sphere": SphereSubspherePair, "flat": FlatLinePair}


def get_pair(name: str, **params) -> FreeBoundaryPair:
    try:
        return PAIRS[name](**params)
    except KeyError:
        raise KeyError(f"unknown pair {name!r}; choose from {sorted(PAIRS)}") from None


# ---- operation-level API -------------------------------------------------


def project_to_target(t: EmbeddedTarget, y):
    return t.project(y)


def second_fundamental_form(t: EmbeddedTarget, y, xi, eta):
    return t.second_fundamental_form(y, xi, eta)


def involute(p: FreeBoundaryPair, y):
    return p.involute(y)


def d_sigma(p: FreeBoundaryPair, y):
    return p.d_sigma(y)


@dataclass(frozen=True)
class ReflectionMatrices:
    P: np.ndarray
    Xi: np.ndarray
    O: np.ndarray
    Qtilde: np.ndarray

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.diagonal(self.Xi, axis1=-2, axis2=-1)


def _align_frames(vecs, vals, ref, tol=1e-8):
    """Make eigenvector columns follow ``ref`` as closely as possible.

    Columns sharing an eigenvalue (within ``tol``) are rotated inside their
    eigenspace onto the nearest orthogonal match of ``ref``; isolated columns
    only get their sign fixed.
    """
    out = vecs.copy()
    m = vals.shape[0]
    i = 0
    while i < m:
        j = i + 1
        while j < m and abs(vals[j] - vals[i]) <= tol * max(1.0, abs(vals[i])):
            j += 1
        block = out[:, i:j]
        if j - i == 1:
            if block[:, 0] @ ref[:, i] < 0:
                out[:, i] = -block[:, 0]
        else:
            # Procrustes: rotate the eigenspace basis towards the reference columns.
            u, _, vt = np.linalg.svd(block.T @ ref[:, i:j])
            out[:, i:j] = block @ (u @ vt)
        i = j
    return out


def p_and_eigen(p: FreeBoundaryPair, y):
    """P at every point of ``y`` with the raw sorted eigen-decomposition of P^T P."""
    y = np.asarray(y, dtype=float)
    m = y.shape[-1]
    flat = y.reshape(-1, m)
    p.check_tube(flat)
    ds = p.d_sigma(flat)
    tan = p.target.tangent_projector(flat)
    nu = p.target.normal_frame(flat)
    nu_s = p.target.normal_frame(p.involute(flat))
    P = ds @ tan + nu_s @ np.swapaxes(nu, -1, -2)
    det = np.linalg.det(P)
    if np.any(np.abs(det) < 1e-10):
        raise SingularP(f"|det P| = {np.min(np.abs(det)):.3g}")
    vals, vecs = np.linalg.eigh(np.swapaxes(P, -1, -2) @ P)
    return P, vals, vecs


def assemble_reflection(P, vals, O, shape) -> ReflectionMatrices:
    m = P.shape[-1]
    sq = np.sqrt(vals)
    Qt = (O * sq[:, None, :]) @ np.swapaxes(O, -1, -2)
    Qt = 0.5 * (Qt + np.swapaxes(Qt, -1, -2))
    Xi = vals[:, :, None] * np.eye(m)
    return ReflectionMatrices(
        P.reshape(shape + (m, m)), Xi.reshape(shape + (m, m)), O.reshape(shape + (m, m)), Qt.reshape(shape + (m, m))
    )


def p_matrix_field(p: FreeBoundaryPair, y, reference=None) -> ReflectionMatrices:
    """P, Xi, O and Qtilde at every point of ``y`` (shape ``(..., m)``).

    Eigenvalues are sorted ascending and eigenvectors are aligned with
    ``reference`` (default: the identity frame).  Use
    :func:`fbflow.reflect.smooth_frames` to align along a field instead.
    """
    y = np.asarray(y, dtype=float)
    m = y.shape[-1]
    P, vals, vecs = p_and_eigen(p, y)
    ref = np.eye(m) if reference is None else np.asarray(reference, dtype=float)
    O = np.empty_like(vecs)
    for k in range(vecs.shape[0]):
        O[k] = _align_frames(vecs[k], vals[k], ref)
    return assemble_reflection(P, vals, O, y.shape[:-1])


def p_matrix(p: FreeBoundaryPair, y) -> ReflectionMatrices:
    return p_matrix_field(p, y)
