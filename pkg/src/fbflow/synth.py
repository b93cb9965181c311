"""Exact solutions and planted bubbling families.

The workhorse is the degree-one conformal map of the plane onto S^2,

    u(x) = (2X_1, 2X_2, |X|^2 - 1) / (1 + |X|^2),   X = (x - c) / lam,

which sends the center to the south pole, infinity to the north pole and the
real axis into the great circle ``{y_2 = 0}``.  Restricted to the upper half
plane it is a harmonic disk with free boundary on that circle.

A :class:`PlantedMap` combines a smooth base map with bubbles glued in along
quintic collars; it can be sampled on any grid, which is how the analysis
works on windows finer than the global lattice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import MismatchAtInfinity
from .geometry import FreeBoundaryPair, SphereSubspherePair
from .grid import Field, HalfDiskGrid

INTERIOR_SPHERE = "interior_sphere"
BOUNDARY_DISK = "boundary_disk"

NORTH = np.array([0.0, 0.0, 1.0])


def inverse_stereographic(x, lam: float = 1.0, center=(0.0, 0.0), rotation=None):
    """Inverse stereographic map evaluated at points ``x`` (shape ``(..., 2)``)."""
    x = np.asarray(x, dtype=float)
    X = (x - np.asarray(center, dtype=float)) / lam
    q = np.sum(X * X, axis=-1)
    d = 1.0 + q
    u = np.stack([2 * X[..., 0] / d, 2 * X[..., 1] / d, (q - 1.0) / d], axis=-1)
    if rotation is not None:
        u = u @ np.asarray(rotation).T
    return u


def inverse_stereographic_jacobian(x, lam: float = 1.0, center=(0.0, 0.0), rotation=None):
    """Closed-form derivative, shape ``(..., 2, 3)`` with row ``a`` = d/dx_a."""
    x = np.asarray(x, dtype=float)
    X = (x - np.asarray(center, dtype=float)) / lam
    q = np.sum(X * X, axis=-1)
    d = 1.0 + q
    a, b = X[..., 0], X[..., 1]
    # derivatives with respect to X, then the 1/lam chain factor
    du_da = np.stack([2 / d - 4 * a * a / d**2, -4 * a * b / d**2, 4 * a / d**2], axis=-1)
    du_db = np.stack([-4 * a * b / d**2, 2 / d - 4 * b * b / d**2, 4 * b / d**2], axis=-1)
    J = np.stack([du_da, du_db], axis=-2) / lam
    if rotation is not None:
        J = J @ np.asarray(rotation).T
    return J


def conformal_density(x, lam: float = 1.0, center=(0.0, 0.0)):
    """``|grad u|^2 = 8 lam^2 / (lam^2 + r^2)^2`` for the map above."""
    r2 = np.sum((np.asarray(x, dtype=float) - np.asarray(center, dtype=float)) ** 2, axis=-1)
    return 8 * lam**2 / (lam**2 + r2) ** 2


def rotation_about_y2(phi: float) -> np.ndarray:
    """Rotation fixing the ``y_2`` axis that takes the north pole to ``(sin phi, 0, cos phi)``."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_taking(a, b) -> np.ndarray:
    """Smallest rotation of R^3 with ``R a = b`` for unit vectors ``a``, ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if np.linalg.norm(v) < 1e-14:
        if c > 0:
            return np.eye(3)
        # antipodal: rotate by pi about any axis orthogonal to a
        p = np.eye(3)[np.argmin(np.abs(a))]
        w = np.cross(a, p)
        w /= np.linalg.norm(w)
        return 2 * np.outer(w, w) - np.eye(3)
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + K + K @ K / (1 + c)


def smoothstep5(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t * t)


@dataclass(frozen=True)
class BubbleSpec:
    kind: str
    center: tuple[float, float]
    scale: float
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.kind not in (INTERIOR_SPHERE, BOUNDARY_DISK):
            raise ValueError(f"unknown bubble kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("bubble scale must be positive")
        if self.kind == BOUNDARY_DISK and self.center[1] != 0.0:
            raise ValueError("boundary_disk bubbles must be centred on x2 = 0")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))

    @property
    def value_at_infinity(self) -> np.ndarray:
        return self.orientation @ NORTH

    @property
    def energy(self) -> float:
        return 4 * np.pi if self.kind == INTERIOR_SPHERE else 2 * np.pi

    def __call__(self, x):
        return inverse_stereographic(x, self.scale, self.center, self.orientation)

    def jacobian(self, x):
        return inverse_stereographic_jacobian(x, self.scale, self.center, self.orientation)

    def oriented_towards(self, q) -> "BubbleSpec":
        """Same bubble rotated so that its value at infinity is ``q``.

        Boundary disks are only rotated about the ``y_2`` axis so their
        boundary image stays on ``{y_2 = 0}``.
        """
        q = np.asarray(q, dtype=float)
        if self.kind == BOUNDARY_DISK:
            if abs(q[1]) > 1e-12:
                raise MismatchAtInfinity("a boundary disk must attach at a point of K")
            rot = rotation_about_y2(np.arctan2(q[0], q[2]))
        else:
            rot = rotation_taking(NORTH, q)
        return BubbleSpec(self.kind, self.center, self.scale, rot)


Evaluator = Callable[[np.ndarray], np.ndarray]


def constant_base(value) -> Evaluator:
    v = np.asarray(value, dtype=float)
    return lambda x: np.broadcast_to(v, np.shape(x)[:-1] + v.shape).copy()


def tilted_base(c: float) -> Evaluator:
    """``x -> (1, c x_2, c x_1) / |.|``: smooth, on K along ``x_2 = 0``, energy ~ pi c^2 / 2."""

    def ev(x):
        x = np.asarray(x, dtype=float)
        v = np.stack([np.ones(x.shape[:-1]), c * x[..., 1], c * x[..., 0]], axis=-1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    return ev


def _blend(inner, outer, s, pair: FreeBoundaryPair, on_line):
    v = (1 - s)[..., None] * inner + s[..., None] * outer
    v = pair.target.project(v)
    if np.any(on_line):
        v[on_line] = pair.project_k(v[on_line])
    return v


@dataclass
class PlantedMap:
    """A base map with bubbles glued in; evaluable at arbitrary points.

    Bubbles are glued in order, each onto the map built so far, so a tower
    is two specs with the same center and decreasing scales.
    """

    base: Evaluator
    bubbles: Sequence[BubbleSpec] = ()
    neck_factor: float = 8.0
    pair: FreeBoundaryPair = field(default_factory=SphereSubspherePair)
    tol: float = 1e-6

    def _value(self, x, upto: int):
        v = self.base(x)
        on_line = np.asarray(x)[..., 1] == 0.0
        for spec in self.bubbles[:upto]:
            w = self.neck_factor * spec.scale
            rho = np.hypot(x[..., 0] - spec.center[0], x[..., 1] - spec.center[1])
            s = smoothstep5((rho - w) / w)
            near = s < 1.0
            if np.any(near):
                v = v.copy()
                v[near] = _blend(spec(x[near]), v[near], s[near], self.pair, on_line[near])
        return v

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        self.check_attachment()
        return self._value(x, len(self.bubbles))

    def check_attachment(self):
        for k, spec in enumerate(self.bubbles):
            at = self._value(np.array([spec.center]), k)[0]
            gap = np.linalg.norm(spec.value_at_infinity - at)
            if gap > self.tol:
                raise MismatchAtInfinity(f"bubble {k} attaches {gap:.3g} away from the map below it")

    def sample(self, grid: HalfDiskGrid, check: bool = True) -> Field:
        vals = np.zeros(grid.shape + (self.pair.target.ambient_dim,))
        pts = np.stack([grid.X[grid.mask], grid.Y[grid.mask]], axis=-1)
        if not grid.full:
            pts[grid.line[grid.mask], 1] = 0.0
        vals[grid.mask] = self(pts)
        return Field(grid, vals, self.pair, check=check)

    def base_map(self) -> "PlantedMap":
        return PlantedMap(self.base, (), self.neck_factor, self.pair, self.tol)

    @property
    def planted_energy(self) -> float:
        return float(sum(b.energy for b in self.bubbles))


def attach(base: Evaluator, kind: str, center, scale: float, **kw) -> PlantedMap:
    """Plant one bubble oriented to match the base at its center."""
    spec = BubbleSpec(kind, tuple(center), scale)
    q = base(np.array([center], dtype=float))[0]
    return PlantedMap(base, (spec.oriented_towards(q),), **kw)


def glue(base: Field, spec: BubbleSpec, neck_width: float | None = None, tol: float = 1e-6) -> Field:
    """Glue ``spec`` into a sampled field across the collar ``[w, 2w]``."""
    grid = base.grid
    w = 8 * spec.scale if neck_width is None else neck_width
    j, i = grid.index_of(spec.center)
    at = base.values[j, i]
    if np.hypot(grid.xs[i] - spec.center[0], grid.ys[j] - spec.center[1]) > 1e-9 * max(1.0, grid.h):
        # off-lattice center: the stored sample is only an approximation of base(center)
        tol = max(tol, 2 * w)
    gap = np.linalg.norm(spec.value_at_infinity - at)
    if gap > tol:
        raise MismatchAtInfinity(f"bubble value at infinity is {gap:.3g} away from the base")
    pts = np.stack([grid.X, grid.Y], axis=-1)
    rho = np.hypot(grid.X - spec.center[0], grid.Y - spec.center[1])
    s = smoothstep5((rho - w) / w)
    near = grid.mask & (s < 1.0)
    vals = np.array(base.values)
    vals[near] = _blend(spec(pts[near]), vals[near], s[near], base.pair, grid.line[near])
    return Field(grid, vals, base.pair)


def bubbling_sequence(base: Evaluator, specs: Sequence[BubbleSpec], scales: Sequence[float],
                      grids: Sequence[HalfDiskGrid] | HalfDiskGrid | None = None, **kw):
    """Planted maps ``u_n`` with every bubble rescaled to ``scales[n]``.

    A second spec sharing the first one's center becomes a tower with scale
    ``scales[n]**2`` (the ``lam, lam^2`` construction).  When ``grids`` is
    given the maps are sampled and Fields are returned.
    """
    scales = list(scales)
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly decreasing")
    out = []
    for lam in scales:
        planted: list[BubbleSpec] = []
        current = PlantedMap(base, (), **kw)
        for k, spec in enumerate(specs):
            same = k > 0 and np.allclose(spec.center, specs[0].center)
            s = lam**2 if same else lam
            q = current(np.array([spec.center]))[0]
            planted.append(BubbleSpec(spec.kind, spec.center, s).oriented_towards(q))
            current = PlantedMap(base, tuple(planted), **kw)
        out.append(current)
    if grids is None:
        return out
    if isinstance(grids, HalfDiskGrid):
        grids = [grids] * len(out)
    return [p.sample(g) for p, g in zip(out, grids)]


def exact_solution(grid: HalfDiskGrid, lam: float = 0.5, center=(0.1, 0.0), phi: float = 0.0,
                   pair: FreeBoundaryPair | None = None) -> Field:
    """The free-boundary harmonic map (a half bubble centred on the flat boundary)."""
    pair = pair or SphereSubspherePair()
    vals = np.zeros(grid.shape + (3,))
    pts = np.stack([grid.X[grid.mask], grid.Y[grid.mask]], axis=-1)
    vals[grid.mask] = inverse_stereographic(pts, lam, center, rotation_about_y2(phi))
    vals[grid.line] = pair.project_k(vals[grid.line])
    return Field(grid, vals, pair)


def identity_field(grid: HalfDiskGrid, pair: FreeBoundaryPair | None = None) -> Field:
    """``u(x) = x`` into the flat pair."""
    from .geometry import FlatLinePair

    pair = pair or FlatLinePair()
    vals = np.stack([grid.X, grid.Y], axis=-1)
    return Field(grid, vals, pair)


def constant_field(grid: HalfDiskGrid, value, pair: FreeBoundaryPair) -> Field:
    vals = np.broadcast_to(np.asarray(value, float), grid.shape + (len(value),))
    return Field(grid, vals, pair)
