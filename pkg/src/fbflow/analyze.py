"""Blow-up analysis: concentration, scale selection, necks, Pohozaev balances.

Bubbles at the scales of interest are far below any single lattice that fits
in memory, so the analysis works on a :class:`FieldStack`: the domain lattice
plus a chain of nested windows, each half the radius of the previous one and
centred on the energy peak, down to a level where the map is resolved.
Level ``k`` is authoritative on the ring between its own disk and the next
one, and every integral is the sum of the ring integrals.  A single
:class:`~fbflow.grid.Field` is a one-level stack, so every function accepts
either.

Energies are ``E = 1/2 int |grad u|^2``; regions are boolean predicates of
``(x, y)`` intersected with the domain, integrated with supersampled cell
fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import fftconvolve

from .errors import BadCenter, MissingSnapshot, NoScale, OutOfDomain, RadiusTooSmall, ScaleOverlap
from .geometry import FreeBoundaryPair
from .grid import Field, HalfDiskGrid, ball_energy, energy_density, gradient, point_set_diameter

INTERIOR_REGIME = "interior"
BOUNDARY_FINITE = "boundary_finite_a"
BOUNDARY_INFINITE = "boundary_infinite"

Region = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ---- regions ---------------------------------------------------------------


def disk(c, r: float) -> Region:
    cx, cy = float(c[0]), float(c[1])
    return lambda x, y: (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def outside(c, r: float) -> Region:
    cx, cy = float(c[0]), float(c[1])
    return lambda x, y: (x - cx) ** 2 + (y - cy) ** 2 > r * r


def both(*regions: Region | None) -> Region | None:
    rs = [r for r in regions if r is not None]
    if not rs:
        return None

    def inside(x, y):
        out = rs[0](x, y)
        for r in rs[1:]:
            out = out & r(x, y)
        return out

    return inside


def annulus(c, r_in: float, r_out: float) -> Region:
    return both(disk(c, r_out), outside(c, r_in))


def region_fraction(grid: HalfDiskGrid, inside: Region | None, samples: int = 8) -> np.ndarray:
    """Per-node cell fraction of ``inside`` intersected with the grid's domain."""
    if inside is None:
        return grid.domain_fraction
    X, Y, h = grid.X, grid.Y, grid.h
    at = inside(X, Y)
    straddle = np.zeros(grid.shape, bool)
    for dx, dy in ((-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)):
        straddle |= inside(X + dx * h, Y + dy * h) != at
    cand = (straddle | (grid.domain_fraction < 1.0)) & grid.mask
    frac = grid.cell_fraction(inside, cand, samples)
    return np.where(cand, frac, np.where(at, grid.domain_fraction, 0.0))


# ---- multi-resolution stacks ----------------------------------------------


@dataclass(frozen=True)
class Level:
    field: Field
    center: tuple[float, float]
    radius: float  # authoritative disk radius (inf for the domain level)


@dataclass(frozen=True)
class FieldStack:
    """Domain lattice plus nested refinement windows."""

    levels: tuple[Level, ...]

    @classmethod
    def single(cls, f: Field) -> "FieldStack":
        return cls((Level(f, f.grid.center, math.inf),))

    @property
    def pair(self) -> FreeBoundaryPair:
        return self.levels[0].field.pair

    @property
    def base_grid(self) -> HalfDiskGrid:
        return self.levels[0].field.grid

    @property
    def finest(self) -> Level:
        return self.levels[-1]

    @property
    def has_free_boundary(self) -> bool:
        return not self.base_grid.full

    def ring(self, k: int) -> Region | None:
        lv = self.levels[k]
        inner = None if k + 1 == len(self.levels) else outside(self.levels[k + 1].center, self.levels[k + 1].radius)
        outer = None if math.isinf(lv.radius) else disk(lv.center, lv.radius)
        return both(outer, inner)

    def integrate(self, integrand: Callable[[Field], np.ndarray], inside: Region | None = None) -> float:
        total = 0.0
        for k, lv in enumerate(self.levels):
            g = lv.field.grid
            frac = region_fraction(g, both(self.ring(k), inside))
            total += float(np.sum(integrand(lv.field) * frac) * g.h**2)
        return total

    def energy(self, inside: Region | None = None) -> float:
        return self.integrate(energy_density, inside)

    def values(self, inside: Region | None = None) -> np.ndarray:
        out = []
        for k, lv in enumerate(self.levels):
            g = lv.field.grid
            reg = both(self.ring(k), inside)
            sel = g.mask if reg is None else (g.mask & reg(g.X, g.Y))
            out.append(lv.field.values[sel])
        return np.concatenate(out, axis=0)

    def oscillation(self, inside: Region | None = None) -> float:
        return point_set_diameter(self.values(inside))

    def level_for(self, x0, r: float) -> Level:
        """Finest level whose authoritative disk contains ``D_r(x0)``."""
        best = self.levels[0]
        for lv in self.levels[1:]:
            if np.hypot(x0[0] - lv.center[0], x0[1] - lv.center[1]) + r <= lv.radius * (1 + 1e-12):
                best = lv
        return best

    def resample(self, evaluator) -> "FieldStack":
        """The same geometry sampled from another map (for example the base map)."""
        lv = []
        for L in self.levels:
            lv.append(Level(_sample(evaluator, L.field.grid, self.pair), L.center, L.radius))
        return FieldStack(tuple(lv))

    def describe(self) -> list[dict]:
        return [{"center": list(L.center), "radius": None if math.isinf(L.radius) else L.radius,
                 "h": L.field.grid.h} for L in self.levels]


def as_stack(f) -> FieldStack:
    return f if isinstance(f, FieldStack) else FieldStack.single(f)


def _sample(evaluator, grid: HalfDiskGrid, pair: FreeBoundaryPair) -> Field:
    if hasattr(evaluator, "sample"):
        return evaluator.sample(grid)
    vals = np.zeros(grid.shape + (pair.target.ambient_dim,))
    pts = np.stack([grid.X[grid.mask], grid.Y[grid.mask]], axis=-1)
    vals[grid.mask] = evaluator(pts)
    if grid.line.any():
        vals[grid.line] = pair.project_k(vals[grid.line])
    return Field(grid, vals, pair)


def max_jump(f: Field, inside: Region | None = None) -> float:
    """Largest value difference between lattice neighbours (a resolution indicator)."""
    g, u, m = f.grid, f.values, f.grid.mask
    sel = m if inside is None else (m & inside(g.X, g.Y))
    worst = 0.0
    for axis in (0, 1):
        d = np.linalg.norm(np.diff(u, axis=axis), axis=-1)
        both_in = np.take(m, range(0, m.shape[axis] - 1), axis) & np.take(m, range(1, m.shape[axis]), axis)
        near = np.take(sel, range(0, m.shape[axis] - 1), axis) | np.take(sel, range(1, m.shape[axis]), axis)
        ok = both_in & near
        if ok.any():
            worst = max(worst, float(np.max(d[ok])))
    return worst


def _window(center, radius: float, h: float, has_line: bool) -> tuple[HalfDiskGrid, tuple[float, float]]:
    cx, cy = center
    if has_line and cy < radius:
        # the window touches the flat boundary: use a half-disk centred on its projection
        return HalfDiskGrid(radius + cy, h, (cx, 0.0)), (cx, cy)
    return HalfDiskGrid(radius, h, (cx, cy), full=True), (cx, cy)


def zoom(evaluator, pair: FreeBoundaryPair, domain: HalfDiskGrid, focus=None, *, first_radius: float = 0.25,
         resolution: int = 64, jump_tol: float = 0.02, margin: float = 1.25, max_levels: int = 30) -> FieldStack:
    """Refine around the energy peak until neighbouring values differ by at most ``jump_tol``.

    Each window has half the authoritative radius of the previous one, a
    lattice of ``resolution`` spacings per radius and a ``margin`` so that
    its own edge stays away from the ring it is responsible for.
    """
    f0 = _sample(evaluator, domain, pair)
    levels = [Level(f0, domain.center, math.inf)]
    if focus is None:
        focus = _peak(f0, None)
    focus = (float(focus[0]), float(focus[1]))
    rho = first_radius
    while len(levels) < max_levels:
        cur = levels[-1]
        region = None if math.isinf(cur.radius) else disk(cur.center, cur.radius)
        if max_jump(cur.field, both(region, disk(focus, 2 * rho))) <= jump_tol:
            break
        if len(levels) > 1:
            focus = _peak(cur.field, disk(cur.center, cur.radius - rho))
        h = margin * rho / resolution
        grid, c = _window(focus, margin * rho, h, not domain.full)
        if not _inside_domain(domain, grid):
            raise OutOfDomain(f"refinement window around {focus} leaves the domain")
        levels.append(Level(_sample(evaluator, grid, pair), c, rho))
        rho /= 2
    return FieldStack(tuple(levels))


def _inside_domain(domain: HalfDiskGrid, g: HalfDiskGrid) -> bool:
    d = np.hypot(g.center[0] - domain.center[0], g.center[1] - domain.center[1])
    return d + g.radius <= domain.radius * (1 + 1e-12)


def _peak(f: Field, inside: Region | None):
    e = energy_density(f)
    g = f.grid
    sel = g.mask if inside is None else (g.mask & inside(g.X, g.Y))
    e = np.where(sel, e, -np.inf)
    j, i = np.unravel_index(int(np.argmax(e)), e.shape)
    return float(g.xs[i]), float(g.ys[j])


# ---- concentration ---------------------------------------------------------


def fraction_kernel(h: float, r: float, samples: int = 8) -> np.ndarray:
    """Cell fractions of ``D_r(0)`` on the lattice of spacing ``h``."""
    n = int(np.ceil(r / h + 1))
    k = np.arange(-n, n + 1) * h
    off = ((np.arange(samples) + 0.5) / samples - 0.5) * h
    sx = k[:, None, None, None] + off[None, None, :, None]
    sy = k[None, :, None, None] + off[None, None, None, :]
    hit = (sx**2 + sy**2) <= r * r
    return hit.mean(axis=(2, 3)).T


def ball_energy_field(f: Field, r: float, density=None) -> np.ndarray:
    """``E(D_r(x))`` at every node by FFT convolution with a fractional disk kernel."""
    e = energy_density(f) if density is None else density
    w = e * f.grid.weights
    return fftconvolve(w, fraction_kernel(f.grid.h, r), mode="same")


def detect_concentration(f, eps_bar: float = 1.0, r_det: float | None = None) -> list[tuple[float, float]]:
    """Local maxima of the ball energy at radius ``r_det`` that exceed ``eps_bar^2``.

    Each maximum is reported at the energy-density peak inside its ball.

    Maxima closer than ``r_det`` are merged into the stronger one.  For a
    stack, each level is scanned on its own ring and the results merged.
    """
    st = as_stack(f)
    found: list[tuple[float, tuple[float, float]]] = []
    for k, lv in enumerate(st.levels):
        g = lv.field.grid
        r = 8 * g.h if r_det is None else r_det
        if r < 4 * g.h * (1 - 1e-12):
            raise RadiusTooSmall(f"r_det = {r:.4g} is below 4h = {4 * g.h:.4g}")
        bm = ball_energy_field(lv.field, r)
        reg = st.ring(k)
        sel = g.mask if reg is None else (g.mask & reg(g.X, g.Y))
        pad = np.pad(np.where(sel, bm, -np.inf), 1, constant_values=-np.inf)
        core = pad[1:-1, 1:-1]
        is_max = sel & (core > eps_bar**2)
        for dj in (-1, 0, 1):
            for di in (-1, 0, 1):
                if dj or di:
                    is_max &= core >= pad[1 + dj:pad.shape[0] - 1 + dj, 1 + di:pad.shape[1] - 1 + di]
        dens = energy_density(lv.field)
        for j, i in zip(*np.nonzero(is_max)):
            # the ball maximum is flat near a concentration; the density peak inside it pins the site
            near = sel & (np.hypot(g.X - g.xs[i], g.Y - g.ys[j]) <= r)
            jj, ii = np.unravel_index(np.argmax(np.where(near, dens, -np.inf)), dens.shape)
            found.append((float(bm[j, i]), (float(g.xs[ii]), float(g.ys[jj]))))
    found.sort(key=lambda t: (-t[0], t[1]))
    points: list[tuple[float, float]] = []
    merge = r_det if r_det is not None else 8 * st.base_grid.h
    for _, x in found:
        if all(np.hypot(x[0] - p[0], x[1] - p[1]) > merge for p in points):
            points.append(x)
    return points


def locate_bubbles(evaluator, pair: FreeBoundaryPair, domain: HalfDiskGrid, eps_bar: float = 1.0,
                   unresolved_jump: float = 0.25, **zoom_kw) -> list[FieldStack]:
    """Find concentration sites of an evaluable map and refine a stack around each.

    Candidates on the domain lattice are nodes whose ball energy at ``8h``
    exceeds ``eps_bar^2`` or whose neighbour jump says the map is not
    resolved there; a candidate is kept if the refined stack confirms the
    ball energy.
    """
    f0 = _sample(evaluator, domain, pair)
    h = domain.h
    r_det = 8 * h
    bm = ball_energy_field(f0, r_det)
    jump = np.zeros(domain.shape)
    u = f0.values
    for axis in (0, 1):
        d = np.linalg.norm(np.diff(u, axis=axis), axis=-1)
        ok = np.take(domain.mask, range(0, domain.shape[axis] - 1), axis) & \
            np.take(domain.mask, range(1, domain.shape[axis]), axis)
        d = np.where(ok, d, 0.0)
        pad = [(0, 0), (0, 0)]
        pad[axis] = (0, 1)
        jump = np.maximum(jump, np.pad(d, pad))
        pad[axis] = (1, 0)
        jump = np.maximum(jump, np.pad(d, pad))
    cand = domain.mask & ((bm > eps_bar**2) | (jump > unresolved_jump))
    score = np.where(cand, energy_density(f0), -np.inf)
    order = np.argsort(-score, axis=None)
    seeds: list[tuple[float, float]] = []
    for flat in order:
        j, i = np.unravel_index(flat, score.shape)
        if not np.isfinite(score[j, i]):
            break
        x = (float(domain.xs[i]), float(domain.ys[j]))
        if all(np.hypot(x[0] - s[0], x[1] - s[1]) > 2 * r_det for s in seeds):
            seeds.append(x)
    stacks = []
    for s in seeds:
        st = zoom(evaluator, pair, domain, s, **zoom_kw)
        c = st.finest.center if len(st.levels) > 1 else s
        if st.energy(disk(c, r_det)) > eps_bar**2:
            stacks.append(st)
    return stacks


@dataclass(frozen=True)
class ConcentrationPoint:
    x: tuple[float, float]
    r: float
    d: float
    regime: str
    energy: float
    target: float
    h: float

    @property
    def a(self) -> float:
        return self.d / self.r

    @property
    def projection(self) -> tuple[float, float]:
        """``x'``: the nearest point of the flat boundary (``x`` itself in the interior regime)."""
        return (self.x[0], 0.0) if self.regime != INTERIOR_REGIME else self.x

    @property
    def bubble_kind(self) -> str:
        return "harmonic_disk" if self.regime == BOUNDARY_FINITE else "harmonic_sphere"

    def as_dict(self) -> dict:
        return {"x": list(self.x), "r": self.r, "d": self.d, "a": self.a, "regime": self.regime,
                "energy": self.energy, "target": self.target, "h": self.h, "bubble": self.bubble_kind}


def select_scale(f, x_hint, eps_bar: float = 1.0, *, a_max: float = 100.0, search_radius: float | None = None,
                 tol: float = 0.05) -> ConcentrationPoint:
    """Smallest ``r`` at which the largest ball energy near ``x_hint`` reaches ``eps_bar^2 / 32``."""
    st = as_stack(f)
    target = eps_bar**2 / 32
    lv = st.level_for(x_hint, 0.0)
    g = lv.field.grid
    h = g.h
    if search_radius is None:
        search_radius = lv.radius / 4 if math.isfinite(lv.radius) else 16 * h
    r_hi = search_radius if math.isfinite(lv.radius) else 4 * search_radius
    dens = energy_density(lv.field)
    sel = g.mask & disk(x_hint, search_radius)(g.X, g.Y)
    if not sel.any():
        raise NoScale("no lattice node near the hint")

    def best(r):
        bm = np.where(sel, ball_energy_field(lv.field, r, dens), -np.inf)
        k = int(np.argmax(bm))
        return float(bm.flat[k]), np.unravel_index(k, bm.shape)

    lo, hi = 4 * h, r_hi
    if best(lo)[0] > target:
        raise NoScale(f"the selection radius is below 4h = {4 * h:.3g}; refine the lattice")
    if best(hi)[0] < target:
        raise NoScale("no ball near the hint reaches the selection energy")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if best(mid)[0] < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * hi:
            break
    r = hi
    _, (j, i) = best(r)
    x = (float(g.xs[i]), float(g.ys[j]))
    e = ball_energy(lv.field, x, r, dens)
    if abs(e - target) > tol * target:
        raise NoScale(f"ball energy {e:.4g} misses the target {target:.4g} by more than {tol:.0%}")
    if st.has_free_boundary:
        d = x[1]
        regime = BOUNDARY_FINITE if d / r <= a_max else BOUNDARY_INFINITE
    else:
        d, regime = math.inf, INTERIOR_REGIME
    return ConcentrationPoint(x, r, d, regime, e, target, h)


# ---- rescaling ---------------------------------------------------------------


@dataclass(frozen=True)
class Rescaled:
    """``v(x) = u(x_n + r_n x)``; the field lives on ``xi = x + offset``."""

    field: Field
    offset: tuple[float, float]
    origin: tuple[float, float]
    scale: float

    def unit_ball_energy(self) -> float:
        return ball_energy(self.field, self.offset, 1.0)

    @property
    def boundary_line(self) -> float | None:
        """Height of the rescaled free boundary in ``x`` coordinates."""
        return -self.offset[1] if not self.field.grid.full else None


def interpolate(f: Field, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of the values of ``f`` at points ``pts`` (shape ``(k, 2)``)."""
    g = f.grid
    it = RegularGridInterpolator((g.ys, g.xs), f.values, method="linear", bounds_error=True)
    return it(pts[:, ::-1])


def rescale(f, c: ConcentrationPoint, R: float = 8.0, n: int = 64) -> Rescaled:
    st = as_stack(f)
    boundary = c.regime != INTERIOR_REGIME and st.has_free_boundary
    origin = c.projection if boundary else c.x
    a = c.d / c.r if boundary else 0.0
    reach = c.r * (R + a)
    lv = st.level_for(origin, reach)
    if not math.isfinite(lv.radius):
        g0 = lv.field.grid
        if np.hypot(origin[0] - g0.center[0], origin[1] - g0.center[1]) + reach > g0.radius * (1 - 1e-12):
            raise OutOfDomain("the rescaled disk leaves the domain")
    elif np.hypot(origin[0] - lv.center[0], origin[1] - lv.center[1]) + reach > lv.radius:
        raise OutOfDomain("the rescaled disk leaves the refined region")
    hr = R / n
    if boundary:
        grid = HalfDiskGrid(R + a, hr, (0.0, 0.0))
    else:
        grid = HalfDiskGrid(R, hr, (0.0, 0.0), full=True)
    pts = np.stack([grid.X[grid.mask], grid.Y[grid.mask]], axis=-1)
    phys = np.asarray(origin) + c.r * pts
    if boundary:
        phys[:, 1] = np.maximum(phys[:, 1], 0.0)
    pair = st.pair
    v = pair.target.project(interpolate(lv.field, phys))
    vals = np.zeros(grid.shape + (v.shape[-1],))
    vals[grid.mask] = v
    if grid.line.any():
        vals[grid.line] = pair.project_k(vals[grid.line])
    return Rescaled(Field(grid, vals, pair), (0.0, a), origin, c.r)


# ---- neck decomposition ---------------------------------------------------------


@dataclass(frozen=True)
class NeckPiece:
    name: str
    region: Region
    energy: float
    oscillation: float


@dataclass(frozen=True)
class NeckDecomposition:
    point: ConcentrationPoint
    delta: float
    R: float
    pieces: tuple[NeckPiece, ...]
    annulus: Region
    energy: float
    oscillation: float

    def piece(self, name: str) -> NeckPiece:
        for p in self.pieces:
            if p.name == name:
                return p
        raise KeyError(name)

    def node_sets(self, grid: HalfDiskGrid) -> dict[str, np.ndarray]:
        return {p.name: grid.mask & p.region(grid.X, grid.Y) for p in self.pieces}

    def as_dict(self) -> dict:
        return {"delta": self.delta, "R": self.R, "energy": self.energy, "oscillation": self.oscillation,
                "pieces": {p.name: {"energy": p.energy, "oscillation": p.oscillation} for p in self.pieces}}


def _minus(a: Region, *bs: Region) -> Region:
    def inside(x, y):
        out = a(x, y)
        for b in bs:
            out = out & ~b(x, y)
        return out

    return inside


def neck_pieces(c: ConcentrationPoint, delta: float, R: float) -> tuple[Region, list[tuple[str, Region]]]:
    """The neck ``D_delta(x) minus D_{rR}(x)`` and its partition, innermost piece first."""
    x, xp, rR = c.x, c.projection, c.r * R
    A = annulus(x, rR, delta)
    if c.regime == BOUNDARY_FINITE:
        s3 = both(A, disk(xp, 2 * rR))
        s2 = _minus(both(A, disk(xp, delta / 2)), s3)
        s1 = _minus(A, s3, s2)
        return A, [("omega3", s3), ("omega2", s2), ("omega1", s1)]
    d = c.d
    s4 = both(A, disk(x, d))
    s3 = _minus(both(A, disk(xp, 2 * d)), s4)
    s2 = _minus(both(A, disk(xp, delta / 2)), s4, s3)
    s1 = _minus(A, s4, s3, s2)
    return A, [("omega4", s4), ("omega3", s3), ("omega2", s2), ("omega1", s1)]


def neck_decompose(f, c: ConcentrationPoint, delta: float = 0.25, R: float = 8.0) -> NeckDecomposition:
    if 2 * c.r * R >= delta / 2:
        raise ScaleOverlap(f"2 r R = {2 * c.r * R:.4g} must stay below delta / 2 = {delta / 2:.4g}")
    st = as_stack(f)
    A, parts = neck_pieces(c, delta, R)
    pieces = tuple(NeckPiece(n, reg, st.energy(reg), st.oscillation(reg)) for n, reg in parts)
    return NeckDecomposition(c, delta, R, pieces, A, st.energy(A), st.oscillation(A))


def oscillation_neck(f, nd: NeckDecomposition) -> float:
    return as_stack(f).oscillation(nd.annulus)


# ---- Pohozaev balances --------------------------------------------------------


def _radial(f: Field, x0, grad=None):
    """``|u_r|^2 - |grad u|^2 / 2`` and ``r u_r`` at every node."""
    g = gradient(f) if grad is None else grad
    dx, dy = f.grid.X - x0[0], f.grid.Y - x0[1]
    r = np.hypot(dx, dy)
    ru_r = dx[..., None] * g[..., 0, :] + dy[..., None] * g[..., 1, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        u_r = np.where(r[..., None] > 0, ru_r / np.where(r > 0, r, 1.0)[..., None], 0.0)
    integrand = np.sum(u_r**2, -1) - 0.5 * np.sum(g * g, axis=(-2, -1))
    return integrand, ru_r


def _check_center(f: Field, x0, t: float, outer: float):
    g = f.grid
    if g.full or abs(x0[1]) > 1e-12:
        raise BadCenter("the center must lie on the flat boundary of a half-disk lattice")
    if t < 4 * g.h * (1 - 1e-12):
        raise RadiusTooSmall(f"t = {t:.4g} is below 4h")
    if abs(x0[0] - g.center[0]) + outer > g.radius - 2 * g.h + 1e-12:
        raise OutOfDomain("the half-disk leaves the lattice")


@dataclass(frozen=True)
class PohozaevBalance:
    lhs: float
    rhs: float

    @property
    def defect(self) -> float:
        return abs(self.lhs - self.rhs)

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.defect))


def pohozaev_boundary(f: Field, tau, x0, t: float, nodes_per_h: int = 4) -> PohozaevBalance:
    """Both sides of the half-disk Pohozaev identity centred on the flat boundary.

    ``lhs`` is a Gauss-Legendre rule on the half circle of ``r (|u_r|^2 - |grad u|^2/2)``
    with bilinearly interpolated gradients; ``rhs`` is the area quadrature of
    ``r u_r . tau``.
    """
    _check_center(f, x0, t, t)
    g = f.grid
    grad = gradient(f)
    integrand, ru_r = _radial(f, x0, grad)
    m = max(32, int(np.ceil(nodes_per_h * np.pi * t / g.h)))
    s, w = np.polynomial.legendre.leggauss(m)
    th = 0.5 * np.pi * (s + 1)
    pts = np.stack([x0[0] + t * np.cos(th), x0[1] + t * np.sin(th)], axis=-1)
    gi = RegularGridInterpolator((g.ys, g.xs), grad.reshape(g.shape + (-1,)), method="linear")
    gp = gi(np.stack([np.maximum(pts[:, 1], g.ys[0]), pts[:, 0]], axis=-1)).reshape(m, 2, -1)
    rhat = np.stack([np.cos(th), np.sin(th)], axis=-1)
    u_r = np.einsum("ka,kam->km", rhat, gp)
    vals = np.sum(u_r**2, -1) - 0.5 * np.sum(gp**2, axis=(-2, -1))
    lhs = float(np.sum(w * vals) * 0.5 * np.pi * t * t)
    frac = g.disk_fraction(x0, t)
    rhs = float(np.sum(frac * np.sum(ru_r * np.asarray(tau), -1)) * g.h**2)
    return PohozaevBalance(lhs, rhs)


@dataclass(frozen=True)
class AnnulusBalance:
    value: float
    bound: float
    slack: float = 0.1

    @property
    def holds(self) -> bool:
        return self.value <= self.bound * (1 + self.slack) + 1e-14

    def as_dict(self) -> dict:
        return {"value": self.value, "bound": self.bound, "holds": self.holds}


def pohozaev_annulus(f: Field, tau, x0, t: float, slack: float = 0.1) -> AnnulusBalance:
    """``int_{D_2t \\ D_t} (|u_r|^2 - |grad u|^2/2)`` against ``t |grad u|_2 |tau|_2``.

    The norms are taken over ``D_2t(x0)``, the region the estimate integrates over.
    """
    _check_center(f, x0, t, 2 * t)
    g = f.grid
    grad = gradient(f)
    integrand, _ = _radial(f, x0, grad)
    value = float(np.sum(integrand * g.annulus_fraction(x0, t, 2 * t)) * g.h**2)
    big = g.disk_fraction(x0, 2 * t)
    ng = np.sqrt(np.sum(big * np.sum(grad * grad, axis=(-2, -1))) * g.h**2)
    nt = np.sqrt(np.sum(big * np.sum(np.asarray(tau) ** 2, -1)) * g.h**2)
    return AnnulusBalance(value, float(t * ng * nt), slack)


# ---- dyadic profile ---------------------------------------------------------


@dataclass(frozen=True)
class DyadicProfile:
    center: tuple[float, float]
    base_radius: float
    radii: np.ndarray
    energies: np.ndarray
    pohozaev: np.ndarray

    @property
    def count(self) -> int:
        return len(self.energies)

    def middle(self) -> np.ndarray:
        m = self.count
        return self.energies[math.ceil(m / 3):math.ceil(2 * m / 3)]

    def middle_max(self) -> float:
        mid = self.middle()
        return float(mid.max()) if mid.size else 0.0

    @property
    def monotone_decay(self) -> bool:
        if self.count == 0 or not np.any(self.energies > 0):
            return True
        k = int(np.argmax(self.energies))
        return k in (0, self.count - 1)

    def humps(self, floor: float = 1e-3) -> list[int]:
        e = self.energies
        top = float(e.max()) if e.size else 0.0
        out = []
        for i in range(len(e)):
            left = e[i - 1] if i > 0 else -np.inf
            right = e[i + 1] if i + 1 < len(e) else -np.inf
            if e[i] >= left and e[i] >= right and e[i] > floor * top:
                out.append(i)
        return out

    def as_dict(self) -> dict:
        return {"center": list(self.center), "base_radius": self.base_radius, "radii": self.radii.tolist(),
                "energies": self.energies.tolist(), "pohozaev": self.pohozaev.tolist(),
                "monotone_decay": self.monotone_decay, "middle_max": self.middle_max()}


def dyadic_profile(f, c: ConcentrationPoint, delta: float = 0.25, R: float = 8.0) -> DyadicProfile:
    """Energies of the dyadic annuli ``Q(i) = D_{2^{i+1} s} minus D_{2^i s}``, ``s = 2 r R``.

    The annuli are centred at ``x'`` for boundary bubbles and at ``x`` itself
    otherwise; the last annulus is clipped at ``delta / 2``.
    """
    s = 2 * c.r * R
    if s >= delta / 2:
        raise ScaleOverlap(f"2 r R = {s:.4g} must stay below delta / 2 = {delta / 2:.4g}")
    st = as_stack(f)
    xp = c.projection if c.regime == BOUNDARY_FINITE else c.x
    m = int(math.ceil(math.log2((delta / 2) / s) - 1e-12))
    radii = np.minimum(s * 2.0 ** np.arange(m + 1), delta / 2)
    E, P = [], []
    for i in range(m):
        reg = annulus(xp, radii[i], radii[i + 1])
        E.append(st.energy(reg))
        P.append(st.integrate(lambda fl: _radial(fl, xp)[0], reg))
    return DyadicProfile(xp, s, radii, np.array(E), np.array(P))


# ---- energy ledger ------------------------------------------------------------


@dataclass(frozen=True)
class EnergyLedger:
    E_total: float
    E_base: float
    bubble_energies: tuple[float, ...]
    E_neck: float
    bubble_kinds: tuple[str, ...] = ()

    @property
    def residual(self) -> float:
        return self.E_total - self.E_base - sum(self.bubble_energies) - self.E_neck

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / self.E_total if self.E_total > 0 else 0.0

    def as_dict(self) -> dict:
        return {"E_total": self.E_total, "E_base": self.E_base, "bubble_energies": list(self.bubble_energies),
                "bubble_kinds": list(self.bubble_kinds), "E_neck": self.E_neck, "residual": self.residual,
                "relative_residual": self.relative_residual}


def energy_ledger(f, base, points: Sequence[ConcentrationPoint] = (), delta: float = 0.25,
                  R: float | Sequence[float] | None = None) -> EnergyLedger:
    """Split the energy of ``f`` into base, bubble cores and necks.

    ``base`` is the limit map (a field, a stack, or an evaluator sampled on
    the geometry of ``f``).  Each bubble core is ``D_{rR}(x)``; with
    ``R=None`` the core radius is ``delta / 5`` (``R = delta / (5 r)``),
    the largest fixed fraction of ``delta`` compatible with the neck
    decomposition, which stands in for the ``R -> infinity`` limit.
    """
    st = as_stack(f)
    if isinstance(base, (Field, FieldStack)):
        bst = as_stack(base)
    else:
        bst = st.resample(base)
    Rs = _radii_list(points, delta, R)
    cores, necks = [], 0.0
    for c, Rc in zip(points, Rs):
        cores.append(st.energy(disk(c.x, c.r * Rc)))
        necks += st.energy(annulus(c.x, c.r * Rc, delta))
    return EnergyLedger(st.energy(), bst.energy(), tuple(cores), necks, tuple(c.bubble_kind for c in points))


def core_R(c: ConcentrationPoint, delta: float) -> float:
    return delta / (5 * c.r)


def _radii_list(points, delta, R):
    if R is None:
        return [core_R(c, delta) for c in points]
    if np.isscalar(R):
        return [float(R)] * len(points)
    return [float(r) for r in R]


# ---- concentration mass --------------------------------------------------------


def concentration_mass(snapshots: Sequence, x0, final, radii: Sequence[float] | None = None,
                       approach: Sequence[float] | None = None, order: float = 2.0) -> float:
    """Mass of the Dirac part of ``|grad u|^2 dx / 2`` at ``x0``.

    For each radius the excess ``E(u_k; D_r(x0)) - E(final; D_r(x0))`` is
    extrapolated along the snapshots: with ``approach`` (a parameter that
    tends to zero, such as the bubble scale or the time to the singularity)
    the last two snapshots are combined assuming an error ``c p^order``;
    otherwise the last snapshot is used.  The radii (default ``8h, 16h, 32h``
    on the lattice of ``final``) are then extrapolated to ``r = 0`` by a
    least-squares line.
    """
    if len(snapshots) == 0:
        raise MissingSnapshot("no snapshots to extrapolate from")
    if approach is not None and len(approach) != len(snapshots):
        raise ValueError("approach must have one entry per snapshot")
    fin = as_stack(final)
    if radii is None:
        h = fin.base_grid.h
        radii = (8 * h, 16 * h, 32 * h)
    snaps = [as_stack(s) for s in snapshots]
    ms = []
    for r in radii:
        reg = disk(x0, r)
        ref = fin.energy(reg)
        D = [s.energy(reg) - ref for s in snaps]
        if approach is not None and len(D) >= 2:
            p1, p2 = approach[-2] ** order, approach[-1] ** order
            ms.append((p1 * D[-1] - p2 * D[-2]) / (p1 - p2))
        else:
            ms.append(D[-1])
    if len(radii) == 1:
        return float(ms[0])
    slope, intercept = np.polyfit(np.asarray(radii, float), np.asarray(ms), 1)
    return float(intercept)
