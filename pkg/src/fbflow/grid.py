"""Half-disk and disk lattices, fields on them, gradients and quadrature.

Nodes live on a uniform Cartesian lattice masked to the domain.  Arrays are
stored densely with shape ``(ny, nx)`` (or ``(ny, nx, m)`` for values), row
``j`` holding ``y = ys[j]``.  Nodes outside the domain carry zero values and
are ignored by every operator.

Quadrature weights are the area fraction of each node's cell that lies in
the domain, so free-boundary nodes get exactly one half and arc nodes get
their clipped share.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit
from scipy.spatial.distance import pdist

from .errors import OffManifold, RadiusTooSmall
from .geometry import FreeBoundaryPair

OUTSIDE, INTERIOR, FREE, ARC = -1, 0, 1, 2
KIND_LETTERS = {INTERIOR: "I", FREE: "F", ARC: "A"}
LETTER_KINDS = {v: k for k, v in KIND_LETTERS.items()}

_SUPERSAMPLE = 16


@dataclass(frozen=True)
class HalfDiskGrid:
    """Lattice of spacing ``h`` on the half-disk ``{|x - c| <= radius, x2 >= 0}``.

    With ``full=True`` the domain is the whole disk and there is no free
    boundary.  For half-disks the center must lie on the line ``x2 = 0``.
    """

    radius: float = 1.0
    h: float = 1.0 / 64
    center: tuple[float, float] = (0.0, 0.0)
    full: bool = False

    def __post_init__(self):
        if not (self.radius > 0 and self.h > 0):
            raise ValueError("radius and h must be positive")
        if not self.full and self.center[1] != 0.0:
            raise ValueError("a half-disk must be centred on the line x2 = 0")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @cached_property
    def n(self) -> int:
        return int(np.floor(self.radius / self.h + 1e-9))

    @cached_property
    def xs(self) -> np.ndarray:
        return self.center[0] + self.h * (np.arange(2 * self.n + 1) - self.n)

    @cached_property
    def ys(self) -> np.ndarray:
        if self.full:
            return self.center[1] + self.h * (np.arange(2 * self.n + 1) - self.n)
        return self.h * np.arange(self.n + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ys.size, self.xs.size)

    @cached_property
    def X(self) -> np.ndarray:
        return np.broadcast_to(self.xs[None, :], self.shape)

    @cached_property
    def Y(self) -> np.ndarray:
        return np.broadcast_to(self.ys[:, None], self.shape)

    def _inside(self, x, y):
        r2 = (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2
        ok = r2 <= self.radius**2 * (1 + 1e-12)
        if not self.full:
            ok &= y >= -1e-12 * self.h
        return ok

    @cached_property
    def mask(self) -> np.ndarray:
        return self._inside(self.X, self.Y)

    @cached_property
    def kind(self) -> np.ndarray:
        m = self.mask
        k = np.where(m, INTERIOR, OUTSIDE)
        pad = np.pad(m, 1, constant_values=False)
        nb = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
        if not self.full:
            # the missing south neighbour of the bottom row is the free boundary, not the arc
            nb[0] = pad[2, 1:-1] & pad[1, :-2] & pad[1, 2:]
        k[m & ~nb] = ARC
        if not self.full:
            line = m[0] & (np.abs(self.xs - self.center[0]) < self.radius * (1 - 1e-12))
            k[0, line & nb[0]] = FREE
        return k

    @cached_property
    def line(self) -> np.ndarray:
        """Masked nodes on the flat boundary line ``x2 = 0`` (corners included)."""
        out = np.zeros(self.shape, bool)
        if not self.full:
            out[0] = self.mask[0]
        return out

    def cell_fraction(self, inside, candidates=None, samples=_SUPERSAMPLE) -> np.ndarray:
        """Fraction of each masked node's cell for which ``inside(x, y)`` holds.

        ``candidates`` marks the cells that may straddle the boundary of the
        set; the rest are decided by their node alone.
        """
        X, Y = self.X, self.Y
        frac = (self.mask & inside(X, Y)).astype(float)
        if candidates is None:
            candidates = self.mask
        idx = np.nonzero(candidates & self.mask)
        if idx[0].size:
            off = ((np.arange(samples) + 0.5) / samples - 0.5) * self.h
            sx = X[idx][:, None, None] + off[None, None, :]
            sy = Y[idx][:, None, None] + off[None, :, None]
            sx, sy = np.broadcast_arrays(sx, sy)
            hit = inside(sx, sy) & self._inside(sx, sy)
            frac[idx] = hit.reshape(hit.shape[0], -1).mean(axis=1)
        return frac

    def _circle_straddle(self, x0, r):
        d = np.hypot(self.X - x0[0], self.Y - x0[1])
        return np.abs(d - r) <= self.h * 0.7072

    @cached_property
    def domain_fraction(self) -> np.ndarray:
        """In-domain cell fractions; cells of outside nodes are lumped onto a masked neighbour."""
        cand = self._circle_straddle(self.center, self.radius)
        if not self.full:
            cand = cand.copy()
            cand[0] = True
        frac = self.mask.astype(float)
        idx = np.nonzero(cand)
        off = ((np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5) * self.h
        sx = self.X[idx][:, None, None] + off[None, None, :]
        sy = self.Y[idx][:, None, None] + off[None, :, None]
        sx, sy = np.broadcast_arrays(sx, sy)
        hit = self._inside(sx, sy)
        frac[idx] = hit.reshape(hit.shape[0], -1).mean(axis=1)
        ny, nx = self.shape
        for j, i in zip(*np.nonzero(~self.mask & (frac > 0))):
            best, dbest = None, np.inf
            for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                jj, ii = j + dj, i + di
                if 0 <= jj < ny and 0 <= ii < nx and self.mask[jj, ii]:
                    d = np.hypot(self.xs[ii] - self.center[0], self.ys[jj] - self.center[1])
                    if d < dbest:
                        best, dbest = (jj, ii), d
            if best is not None:
                frac[best] += frac[j, i]
            frac[j, i] = 0.0
        return frac

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights (area units): ``h^2`` times the in-domain cell fraction."""
        return self.domain_fraction * self.h**2

    def disk_fraction(self, x0, r, samples=8) -> np.ndarray:
        """Cell fractions of ``D_r(x0)`` intersected with the domain."""
        x0 = (float(x0[0]), float(x0[1]))
        d = np.hypot(self.X - x0[0], self.Y - x0[1])
        strad = np.abs(d - r) <= self.h * 0.7072
        inner = (d < r) & ~strad
        frac = np.where(inner, self.domain_fraction, 0.0)
        idx = np.nonzero(strad & self.mask)
        if idx[0].size:
            off = ((np.arange(samples) + 0.5) / samples - 0.5) * self.h
            sx = self.X[idx][:, None, None] + off[None, None, :]
            sy = self.Y[idx][:, None, None] + off[None, :, None]
            sx, sy = np.broadcast_arrays(sx, sy)
            hit = ((sx - x0[0]) ** 2 + (sy - x0[1]) ** 2 <= r * r) & self._inside(sx, sy)
            frac[idx] = hit.reshape(hit.shape[0], -1).mean(axis=1)
        return frac

    def annulus_fraction(self, x0, r_in, r_out, samples=8) -> np.ndarray:
        return self.disk_fraction(x0, r_out, samples) - self.disk_fraction(x0, r_in, samples)

    def disk_nodes(self, x0, r) -> np.ndarray:
        """Masked nodes whose position lies in the closed disk ``D_r(x0)``."""
        return self.mask & ((self.X - x0[0]) ** 2 + (self.Y - x0[1]) ** 2 <= r * r * (1 + 1e-12))

    def node_positions(self) -> np.ndarray:
        j, i = np.nonzero(self.mask)
        return np.stack([self.xs[i], self.ys[j]], axis=1)

    def index_of(self, x) -> tuple[int, int]:
        """Nearest lattice index ``(j, i)`` to the point ``x``."""
        i = int(np.rint((x[0] - self.xs[0]) / self.h))
        j = int(np.rint((x[1] - self.ys[0]) / self.h))
        return j, i

    def describe(self) -> dict:
        return {"radius": self.radius, "h": self.h, "center": list(self.center), "full": self.full}


def default_grid() -> HalfDiskGrid:
    return HalfDiskGrid(1.0, 1.0 / 64)


class Field:
    """Values of a map from grid nodes into the ambient space of a pair's target."""

    def __init__(self, grid: HalfDiskGrid, values, pair: FreeBoundaryPair, check: bool = True, tol: float = 1e-9):
        values = np.asarray(values, dtype=float)
        if values.shape[:2] != grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {grid.shape}")
        self.grid = grid
        self.values = np.where(grid.mask[..., None], values, 0.0)
        self.values.setflags(write=False)
        self.pair = pair
        if check:
            self.validate(tol)

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    @property
    def target_tag(self) -> str:
        return self.pair.name

    def node_values(self) -> np.ndarray:
        return self.values[self.grid.mask]

    def manifold_defect(self) -> tuple[float, int]:
        d = self.pair.target.distance(self.node_values())
        k = int(np.argmax(d)) if d.size else 0
        return (float(d[k]) if d.size else 0.0), k

    def boundary_defect(self) -> tuple[float, int]:
        fb = self.grid.kind == FREE
        if not fb.any():
            return 0.0, 0
        d = self.pair.dist_to_k(self.values[fb])
        k = int(np.argmax(d))
        flat_index = int(np.flatnonzero(fb[self.grid.mask])[k])
        return float(d[k]), flat_index

    def validate(self, tol: float = 1e-9) -> None:
        d, k = self.manifold_defect()
        if not d <= tol:
            raise OffManifold(k, d, "N")
        d, k = self.boundary_defect()
        if not d <= tol:
            raise OffManifold(k, d, "K")

    def with_values(self, values, check: bool = True) -> "Field":
        return Field(self.grid, values, self.pair, check=check)


# ---- differential operators ----------------------------------------------


def _shift(a, k, axis):
    """``out[i] = a[i + k]`` along ``axis`` with zero fill."""
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(k) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if k > 0:
        src[axis], dst[axis] = slice(k, None), slice(0, n - k)
    else:
        src[axis], dst[axis] = slice(0, n + k), slice(-k, None)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _diff(u, mask, axis, h):
    p1, m1 = _shift(mask, 1, axis), _shift(mask, -1, axis)
    p2, m2 = _shift(mask, 2, axis), _shift(mask, -2, axis)
    up1, um1 = _shift(u, 1, axis), _shift(u, -1, axis)
    up2, um2 = _shift(u, 2, axis), _shift(u, -2, axis)
    central = (up1 - um1) / (2 * h)
    fwd2 = (-3 * u + 4 * up1 - up2) / (2 * h)
    bwd2 = (3 * u - 4 * um1 + um2) / (2 * h)
    fwd1 = (up1 - u) / h
    bwd1 = (u - um1) / h
    e = (slice(None), slice(None), None)
    out = np.where((p1 & m1)[e], central,
          np.where((p1 & p2)[e], fwd2,
          np.where((m1 & m2)[e], bwd2,
          np.where(p1[e], fwd1,
          np.where(m1[e], bwd1, 0.0)))))
    return np.where(mask[e], out, 0.0)


def gradient_array(values, grid: HalfDiskGrid) -> np.ndarray:
    """Finite-difference gradient of a dense ``(ny, nx, m)`` array, shape ``(ny, nx, 2, m)``."""
    gx = _diff(values, grid.mask, 1, grid.h)
    gy = _diff(values, grid.mask, 0, grid.h)
    return np.stack([gx, gy], axis=-2)


def gradient(f: Field) -> np.ndarray:
    """Central differences inside, second-order one-sided differences at the boundary."""
    return gradient_array(f.values, f.grid)


def energy_density(f: Field, grad=None) -> np.ndarray:
    """Pointwise ``|grad u|^2 / 2``."""
    g = gradient(f) if grad is None else grad
    return 0.5 * np.sum(g * g, axis=(-2, -1))


def _region_fraction(grid: HalfDiskGrid, region):
    if region is None:
        return grid.domain_fraction
    region = np.asarray(region)
    if region.dtype == bool:
        return np.where(region, grid.domain_fraction, 0.0)
    return region


def dirichlet_energy(f: Field, region=None, density=None) -> float:
    """``1/2 int |grad u|^2`` over ``region``.

    ``region`` may be ``None`` (whole domain), a boolean node mask, or an
    array of cell fractions such as :meth:`HalfDiskGrid.disk_fraction`.
    """
    e = energy_density(f) if density is None else density
    frac = _region_fraction(f.grid, region)
    return float(np.sum(e * frac) * f.grid.h**2)


def ball_energy(f: Field, x0, r: float, density=None) -> float:
    if r < 2 * f.grid.h:
        raise RadiusTooSmall(f"r = {r:.4g} is below 2h = {2 * f.grid.h:.4g}")
    return dirichlet_energy(f, f.grid.disk_fraction(x0, r), density)


def point_set_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance in a point cloud.

    Large clouds use a dual-tree search over a kd-tree: node pairs whose
    bounding boxes cannot beat the best distance found so far are skipped,
    so the result is exact.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n < 2:
        return 0.0
    if n <= 3000:
        return float(np.max(pdist(pts)))
    pts = np.ascontiguousarray(pts)
    a = pts[np.argmax(np.linalg.norm(pts - pts[0], axis=1))]
    da = np.linalg.norm(pts - a, axis=1)
    b = pts[np.argmax(da)]
    best = max(float(da.max()), float(np.linalg.norm(pts - b, axis=1).max()))
    perm, start, end, left, right, lo, hi = _kd_build(pts, 16)
    return float(_dual_tree_diameter(pts[perm], start, end, left, right, lo, hi, best))


@njit(cache=True)
def _kd_build(p, leaf):
    n, d = p.shape
    cap = 4 * (n // leaf + 1) + 1
    perm = np.arange(n)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    left = -np.ones(cap, np.int64)
    right = -np.ones(cap, np.int64)
    lo = np.zeros((cap, d))
    hi = np.zeros((cap, d))
    start[0], end[0] = 0, n
    count = 1
    stack = [0]
    while len(stack):
        k = stack.pop()
        s, e = start[k], end[k]
        for c in range(d):
            lo[k, c] = np.inf
            hi[k, c] = -np.inf
        for t in range(s, e):
            for c in range(d):
                v = p[perm[t], c]
                lo[k, c] = min(lo[k, c], v)
                hi[k, c] = max(hi[k, c], v)
        if e - s <= leaf:
            continue
        axis = int(np.argmax(hi[k] - lo[k]))
        if hi[k, axis] == lo[k, axis]:
            continue
        seg = perm[s:e]
        perm[s:e] = seg[np.argsort(p[seg, axis])]
        mid = (s + e) // 2
        start[count], end[count] = s, mid
        start[count + 1], end[count + 1] = mid, e
        left[k], right[k] = count, count + 1
        stack.append(count)
        stack.append(count + 1)
        count += 2
    return perm, start[:count], end[:count], left[:count], right[:count], lo[:count], hi[:count]


@njit(cache=True)
def _box_reach2(lo, hi, a, b):
    s = 0.0
    for c in range(lo.shape[1]):
        s += max(hi[a, c] - lo[b, c], hi[b, c] - lo[a, c]) ** 2
    return s


@njit(cache=True)
def _dual_tree_diameter(p, start, end, left, right, lo, hi, best):
    d = p.shape[1]
    best2 = best * best
    sa = [0]
    sb = [0]
    while len(sa):
        a = sa.pop()
        b = sb.pop()
        if _box_reach2(lo, hi, a, b) <= best2:
            continue
        if left[a] < 0 and left[b] < 0:
            for i in range(start[a], end[a]):
                far = 0.0
                for c in range(d):
                    far += max(abs(p[i, c] - lo[b, c]), abs(p[i, c] - hi[b, c])) ** 2
                if far <= best2:
                    continue
                for j in range(start[b], end[b]):
                    s = 0.0
                    for c in range(d):
                        s += (p[i, c] - p[j, c]) ** 2
                    if s > best2:
                        best2 = s
            continue
        if a == b:
            l, r = left[a], right[a]
            sa.append(l)
            sb.append(l)
            sa.append(r)
            sb.append(r)
            sa.append(l)
            sb.append(r)
            continue
        if left[a] < 0 or (left[b] >= 0 and end[b] - start[b] > end[a] - start[a]):
            a, b = b, a
        l, r = left[a], right[a]
        # visit the more promising child first
        if _box_reach2(lo, hi, l, b) > _box_reach2(lo, hi, r, b):
            l, r = r, l
        sa.append(l)
        sb.append(b)
        sa.append(r)
        sb.append(b)
    return np.sqrt(best2)


def oscillation(f: Field, region=None) -> float:
    """Diameter of the value set of ``f`` over ``region`` (boolean node mask)."""
    sel = f.grid.mask if region is None else (np.asarray(region, bool) & f.grid.mask)
    return point_set_diameter(f.values[sel])
