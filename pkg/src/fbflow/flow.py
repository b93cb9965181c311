"""Projected explicit time stepping of the harmonic map heat flow.

One step is ``u <- Pi_N(u + dt * tau(u))`` followed by projecting the nodes
on the flat boundary onto K.  The discrete tension is the tangential part of
the five-point Laplacian; on the flat boundary the missing south neighbour
is the reflection ghost ``sigma(u_north)``, and at arc nodes absent
neighbours are simply dropped (natural Neumann condition).

The scheme is the projected gradient descent of the lumped edge energy

    E_h = 1/2 sum_edges w_e |u_i - u_j|^2,

with ``w_e = 1/2`` on edges lying along ``x2 = 0`` and node masses ``1/2``
there (1 elsewhere).  For ``dt < h^2 / 4`` every accepted step decreases
``E_h``; that is the energy recorded in the history.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.signal import fftconvolve

from .errors import CflViolation, LeftTube, MissingSnapshot
from .geometry import FreeBoundaryPair, Sphere
from .grid import Field, HalfDiskGrid, ball_energy, energy_density


# ---- discrete operators (vectorised reference implementation) ------------


def _shifted(a, dj, di):
    """``out[j, i] = a[j + dj, i + di]`` with zero fill."""
    out = np.zeros_like(a)
    ny, nx = a.shape[:2]
    sj = slice(max(dj, 0), ny + min(dj, 0))
    si = slice(max(di, 0), nx + min(di, 0))
    tj = slice(max(-dj, 0), ny + min(-dj, 0))
    ti = slice(max(-di, 0), nx + min(-di, 0))
    out[tj, ti] = a[sj, si]
    return out


def laplacian_with_ghost(f: Field) -> np.ndarray:
    """Five-point Laplacian using present neighbours and the reflection ghost."""
    g, u = f.grid, f.values
    mask = g.mask
    lap = np.zeros_like(u)
    for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = _shifted(mask, dj, di) & mask
        lap += np.where(nb[..., None], _shifted(u, dj, di) - u, 0.0)
    line = g.line
    if line.any():
        north = line & _shifted(mask, 1, 0)
        if north.any():
            un = u[1][north[0]]
            f.pair.check_tube(un, LeftTube)
            lap[0][north[0]] += f.pair.involute(un) - u[0][north[0]]
    return np.where(mask[..., None], lap / g.h**2, 0.0)


def tension_field(f: Field) -> np.ndarray:
    """``tau = Tan(u) Lap_h u`` at every node, shape ``(ny, nx, m)``."""
    lap = laplacian_with_ghost(f)
    tau = np.zeros_like(lap)
    m = f.grid.mask
    tau[m] = f.pair.target.tangent(f.values[m], lap[m])
    return tau


def node_masses(grid: HalfDiskGrid) -> np.ndarray:
    return np.where(grid.line, 0.5, 1.0) * grid.mask


def lumped_energy(f: Field) -> float:
    """``E_h``: half the weighted sum of squared edge differences."""
    g, u, mask = f.grid, f.values, f.grid.mask
    d = np.diff(u, axis=1)
    ex = (mask[:, 1:] & mask[:, :-1]) * np.sum(d * d, axis=-1)
    wx = np.ones(ex.shape)
    if not g.full:
        wx[0] = 0.5
    d = np.diff(u, axis=0)
    ey = (mask[1:] & mask[:-1]) * np.sum(d * d, axis=-1)
    return float(0.5 * (np.sum(wx * ex) + np.sum(ey)))


def tension_l2(f: Field, tau=None) -> float:
    tau = tension_field(f) if tau is None else tau
    return float(np.sqrt(np.sum(node_masses(f.grid)[..., None] * tau * tau) * f.grid.h**2))


def enforce_free_boundary(f: Field) -> Field:
    """Project the values on the flat boundary onto K."""
    line = f.grid.line
    if not line.any():
        return f
    vals = np.array(f.values)
    f.pair.check_tube(vals[line], LeftTube)
    vals[line] = f.pair.project_k(vals[line])
    return Field(f.grid, vals, f.pair)


# ---- compiled kernel for catalogue pairs ----------------------------------


@numba.njit(cache=True)
def _advance(U, nbr, line, mass, signs, sphere, h, dt, nsteps, sin_tube, E, T, K):
    """Take ``nsteps`` steps in place; fill energy, tension norm and kinetic increments.

    Returns -1 on success or the step index at which a ghost left the tube.
    """
    nn, m = U.shape
    tau = np.zeros((nn, m))
    lap = np.zeros(m)
    inv_h2 = 1.0 / (h * h)
    for s in range(nsteps):
        tn = 0.0
        for i in range(nn):
            for c in range(m):
                lap[c] = 0.0
            for k in range(4):
                j = nbr[i, k]
                if j >= 0:
                    for c in range(m):
                        lap[c] += U[j, c] - U[i, c]
            if line[i] and nbr[i, 2] >= 0:
                j = nbr[i, 2]
                if sphere:
                    off = 0.0
                    for c in range(m):
                        if signs[c] < 0:
                            off += U[j, c] * U[j, c]
                    if off >= sin_tube * sin_tube:
                        return s
                for c in range(m):
                    lap[c] += signs[c] * U[j, c] - U[i, c]
            if sphere:
                ul = 0.0
                for c in range(m):
                    ul += U[i, c] * lap[c]
                for c in range(m):
                    tau[i, c] = (lap[c] - ul * U[i, c]) * inv_h2
            else:
                for c in range(m):
                    tau[i, c] = lap[c] * inv_h2
            for c in range(m):
                tn += mass[i] * tau[i, c] * tau[i, c]
        tn *= h * h
        for i in range(nn):
            nrm = 0.0
            for c in range(m):
                U[i, c] += dt * tau[i, c]
                if line[i] and signs[c] < 0:
                    U[i, c] = 0.0
                nrm += U[i, c] * U[i, c]
            if sphere:
                nrm = np.sqrt(nrm)
                for c in range(m):
                    U[i, c] /= nrm
        e = 0.0
        for i in range(nn):
            for k in (0, 2):
                j = nbr[i, k]
                if j >= 0:
                    w = 0.5 if (k == 0 and line[i]) else 1.0
                    d2 = 0.0
                    for c in range(m):
                        d = U[j, c] - U[i, c]
                        d2 += d * d
                    e += 0.5 * w * d2
        E[s] = e
        T[s] = np.sqrt(tn)
        K[s] = dt * tn
    return -1


@numba.njit(cache=True)
def _advance_s2(U, nbr, line, mass, flipc, h, dt, nsteps, sin_tube, E, T, K):
    """Unrolled variant of :func:`_advance` for S^2 with the single flipped axis ``flipc``."""
    nn = U.shape[0]
    tau = np.zeros((nn, 3))
    inv_h2 = 1.0 / (h * h)
    for s in range(nsteps):
        tn = 0.0
        for i in range(nn):
            u0, u1, u2 = U[i, 0], U[i, 1], U[i, 2]
            l0 = l1 = l2 = 0.0
            for k in range(4):
                j = nbr[i, k]
                if j >= 0:
                    l0 += U[j, 0] - u0
                    l1 += U[j, 1] - u1
                    l2 += U[j, 2] - u2
            if line[i] and nbr[i, 2] >= 0:
                j = nbr[i, 2]
                a0, a1, a2 = U[j, 0], U[j, 1], U[j, 2]
                if flipc == 0:
                    off, a0 = a0, -a0
                elif flipc == 1:
                    off, a1 = a1, -a1
                else:
                    off, a2 = a2, -a2
                if off * off >= sin_tube * sin_tube:
                    return s
                l0 += a0 - u0
                l1 += a1 - u1
                l2 += a2 - u2
            ul = u0 * l0 + u1 * l1 + u2 * l2
            t0 = (l0 - ul * u0) * inv_h2
            t1 = (l1 - ul * u1) * inv_h2
            t2 = (l2 - ul * u2) * inv_h2
            tau[i, 0], tau[i, 1], tau[i, 2] = t0, t1, t2
            tn += mass[i] * (t0 * t0 + t1 * t1 + t2 * t2)
        tn *= h * h
        for i in range(nn):
            v0 = U[i, 0] + dt * tau[i, 0]
            v1 = U[i, 1] + dt * tau[i, 1]
            v2 = U[i, 2] + dt * tau[i, 2]
            if line[i]:
                if flipc == 0:
                    v0 = 0.0
                elif flipc == 1:
                    v1 = 0.0
                else:
                    v2 = 0.0
            r = np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
            U[i, 0], U[i, 1], U[i, 2] = v0 / r, v1 / r, v2 / r
        e = 0.0
        for i in range(nn):
            j = nbr[i, 0]
            if j >= 0:
                d0, d1, d2 = U[j, 0] - U[i, 0], U[j, 1] - U[i, 1], U[j, 2] - U[i, 2]
                e += (0.25 if line[i] else 0.5) * (d0 * d0 + d1 * d1 + d2 * d2)
            j = nbr[i, 2]
            if j >= 0:
                d0, d1, d2 = U[j, 0] - U[i, 0], U[j, 1] - U[i, 1], U[j, 2] - U[i, 2]
                e += 0.5 * (d0 * d0 + d1 * d1 + d2 * d2)
        E[s] = e
        T[s] = np.sqrt(tn)
        K[s] = dt * tn
    return -1


@dataclass(frozen=True)
class _NodeGraph:
    index: np.ndarray
    nbr: np.ndarray
    line: np.ndarray
    mass: np.ndarray


def node_graph(grid: HalfDiskGrid) -> _NodeGraph:
    """Flattened masked-node numbering with E, W, N, S neighbour indices (-1 if absent)."""
    mask = grid.mask
    index = -np.ones(grid.shape, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    pad = np.pad(index, 1, constant_values=-1)
    nbr = np.stack([pad[1:-1, 2:], pad[1:-1, :-2], pad[2:, 1:-1], pad[:-2, 1:-1]], axis=-1)[mask]
    line = grid.line[mask]
    return _NodeGraph(index, np.ascontiguousarray(nbr), line, node_masses(grid)[mask])


def _linear_catalogue(pair: FreeBoundaryPair) -> bool:
    return pair.signs is not None and pair.name in ("sphere", "flat")


# ---- state and stepping ----------------------------------------------------


@dataclass(frozen=True)
class ConcentrationEvent:
    time: float
    step: int
    x: tuple[float, float]
    energy: float
    radius: float


@dataclass(frozen=True)
class FlowState:
    time: float
    field: Field
    dt: float
    energy_history: tuple = ()
    kinetic_accum: float = 0.0
    tension_norm_history: tuple = ()
    step_index: int = 0
    cfl: float = 0.2
    check_cfl: bool = True
    event: ConcentrationEvent | None = None

    @property
    def energy(self) -> float:
        return self.energy_history[-1][1] if self.energy_history else lumped_energy(self.field)

    @property
    def initial_energy(self) -> float:
        return self.energy_history[0][1] if self.energy_history else lumped_energy(self.field)


def initial_state(f: Field, dt_factor: float = 0.2, cfl: float = 0.2, check_cfl: bool = True) -> FlowState:
    f = enforce_free_boundary(f)
    dt = dt_factor * f.grid.h**2
    if check_cfl and dt > cfl * f.grid.h**2 * (1 + 1e-12):
        raise CflViolation(f"dt = {dt:.3g} exceeds {cfl} h^2")
    return FlowState(0.0, f, dt, ((0.0, lumped_energy(f)),), 0.0, ((0.0, tension_l2(f)),), 0, cfl, check_cfl)


def _check(s: FlowState):
    if s.check_cfl and s.dt > s.cfl * s.field.grid.h**2 * (1 + 1e-12):
        raise CflViolation(f"dt = {s.dt:.3g} exceeds {s.cfl} h^2")


def step_reference(s: FlowState) -> FlowState:
    """One step with the vectorised operators (any pair)."""
    _check(s)
    f = s.field
    tau = tension_field(f)
    tn = tension_l2(f, tau)
    m = f.grid.mask
    vals = np.array(f.values)
    vals[m] = f.pair.target.project(vals[m] + s.dt * tau[m])
    nf = enforce_free_boundary(Field(f.grid, vals, f.pair, check=False))
    t = s.time + s.dt
    return replace(
        s, time=t, field=nf, step_index=s.step_index + 1,
        energy_history=s.energy_history + ((t, lumped_energy(nf)),),
        tension_norm_history=s.tension_norm_history + ((s.time, tn),),
        kinetic_accum=s.kinetic_accum + s.dt * tn * tn,
    )


def step(s: FlowState) -> FlowState:
    return _advance_state(s, 1, record_every=1)[0]


def _advance_state(s: FlowState, nsteps: int, record_every: int = 1):
    """Advance with the compiled kernel when available; returns (state, energies, max_rise)."""
    _check(s)
    f = s.field
    if not _linear_catalogue(f.pair):
        cur = s
        energies = []
        for _ in range(nsteps):
            cur = step_reference(cur)
            energies.append(cur.energy_history[-1][1])
        e0 = s.energy
        rise = float(np.max(np.diff(np.concatenate([[e0], energies])))) if energies else 0.0
        return cur, np.array(energies), rise
    g = node_graph(f.grid)
    U = np.ascontiguousarray(f.values[f.grid.mask])
    E = np.empty(nsteps)
    T = np.empty(nsteps)
    K = np.empty(nsteps)
    sphere = isinstance(f.pair.target, Sphere)
    sin_tube = np.sin(min(f.pair.delta0, np.pi / 2)) if sphere else np.inf
    signs = f.pair.signs.astype(float)
    if sphere and U.shape[1] == 3 and np.sum(signs < 0) == 1:
        bad = _advance_s2(U, g.nbr, g.line, g.mass, int(np.argmin(signs)), f.grid.h, s.dt, nsteps,
                          sin_tube, E, T, K)
    else:
        bad = _advance(U, g.nbr, g.line, g.mass, signs, sphere, f.grid.h, s.dt, nsteps, sin_tube, E, T, K)
    if bad >= 0:
        raise LeftTube(f"a value next to the flat boundary left the reflection tube at step {s.step_index + bad}")
    vals = np.zeros(f.values.shape)
    vals[f.grid.mask] = U
    nf = enforce_free_boundary(Field(f.grid, vals, f.pair, check=False))
    t0 = s.time
    times = t0 + s.dt * np.arange(1, nsteps + 1)
    keep = np.arange(nsteps)
    keep = keep[(keep + 1 + s.step_index) % record_every == 0] if record_every > 1 else keep
    if nsteps - 1 not in keep:
        keep = np.append(keep, nsteps - 1)
    eh = s.energy_history + tuple(zip(times[keep].tolist(), E[keep].tolist()))
    th = s.tension_norm_history + tuple(zip((times[keep] - s.dt).tolist(), T[keep].tolist()))
    rise = float(np.max(np.diff(np.concatenate([[s.energy], E]))))
    new = replace(s, time=float(times[-1]), field=nf, step_index=s.step_index + nsteps,
                  energy_history=eh, tension_norm_history=th,
                  kinetic_accum=s.kinetic_accum + float(np.sum(K)))
    return new, E, rise


def disk_kernel(h: float, r: float) -> np.ndarray:
    n = int(np.floor(r / h + 1e-9))
    k = np.arange(-n, n + 1) * h
    return ((k[:, None] ** 2 + k[None, :] ** 2) <= r * r * (1 + 1e-12)).astype(float)


def ball_energy_map(f: Field, r: float, density=None) -> np.ndarray:
    """Node-based ball energy ``E(D_r(x))`` at every lattice node by FFT convolution."""
    e = energy_density(f) if density is None else density
    w = e * f.grid.weights
    return fftconvolve(w, disk_kernel(f.grid.h, r), mode="same")


def check_concentration(f: Field, eps_bar: float, r_min: float):
    """Largest node ball energy at ``r_min`` and its location if it exceeds ``eps_bar^2``."""
    bm = ball_energy_map(f, r_min)
    bm = np.where(f.grid.mask, bm, -np.inf)
    j, i = np.unravel_index(int(np.argmax(bm)), bm.shape)
    return float(bm[j, i]), (float(f.grid.xs[i]), float(f.grid.ys[j]))


@dataclass
class RunLog:
    """Per-run bookkeeping that does not belong in the immutable state."""

    max_energy_rise: float = -np.inf
    worst_step: int = -1
    steps: int = 0
    snapshots: list = field(default_factory=list)


def run(s: FlowState, t_end: float, callbacks: Sequence[Callable] = (), *, chunk: int = 200,
        eps_bar: float | None = 1.0, r_min_factor: float = 8.0, snapshot_times: Sequence[float] = (),
        record_every: int = 1, log: RunLog | None = None) -> FlowState:
    """Advance to ``t_end`` or until a concentration event.

    Every ``chunk`` steps the ball energy at radius ``r_min_factor * h`` is
    compared with ``eps_bar^2``.  Snapshots are taken at the first step on or
    after each time in ``snapshot_times``; each callback receives every
    snapshot state.
    """
    if not t_end > s.time:
        raise ValueError("t_end must exceed the current time")
    log = log if log is not None else RunLog()
    pending = sorted(t for t in snapshot_times if t >= s.time)
    cur = s
    h = s.field.grid.h
    while cur.time < t_end - 1e-12 * max(1.0, t_end):
        remaining = int(np.ceil((t_end - cur.time) / cur.dt - 1e-9))
        n = min(chunk, remaining)
        if pending:
            to_snap = int(np.ceil((pending[0] - cur.time) / cur.dt - 1e-9))
            if to_snap >= 1:
                n = min(n, to_snap)
        start, e_before = cur.step_index, cur.energy
        cur, E, rise = _advance_state(cur, n, record_every)
        log.steps += n
        if rise > log.max_energy_rise:
            log.max_energy_rise = rise
            log.worst_step = start + 1 + int(np.argmax(np.diff(np.concatenate([[e_before], E]))))
        while pending and cur.time >= pending[0] - 1e-12:
            pending.pop(0)
            log.snapshots.append(cur)
            for cb in callbacks:
                cb(cur)
        if eps_bar is not None:
            peak, x = check_concentration(cur.field, eps_bar, r_min_factor * h)
            if peak > eps_bar**2:
                ev = ConcentrationEvent(cur.time, cur.step_index, x, peak, r_min_factor * h)
                cur = replace(cur, event=ev)
                break
    return cur


# ---- localized energy inequalities -----------------------------------------


@dataclass(frozen=True)
class TwoBallReport:
    lhs_forward: float
    rhs_forward: float
    c_forward: float
    lhs_backward: float
    rhs_backward: float
    c_backward: float
    violation: bool

    def as_dict(self) -> dict:
        return {k: float(v) if not isinstance(v, bool) else v for k, v in self.__dict__.items()}


def _inferred_c(lhs, rhs, coeff):
    gap = lhs - rhs
    if gap <= 1e-14 * max(1.0, abs(lhs)):
        return 0.0
    return gap / coeff if coeff > 0 else np.inf


def two_ball_check(history: Sequence[FlowState], x0, R: float, t: float, s: float, c_max: float = 50.0,
                   e0: float | None = None) -> TwoBallReport:
    """Localized energy inequalities between the snapshots at times ``t <= s``.

    Returns each side without the unknown constant and the smallest ``C``
    that makes the inequality hold.
    """
    def at(time):
        for st in history:
            if abs(st.time - time) <= 1e-9 * max(1.0, abs(time)):
                return st
        raise MissingSnapshot(f"no snapshot at t = {time}")

    if s < t:
        raise ValueError("need t <= s")
    st_t, st_s = at(t), at(s)
    h = st_t.field.grid.h
    if R < 4 * h:
        raise ValueError("R must be at least 4h")
    e0 = history[0].initial_energy if e0 is None else e0
    E = lambda st, r: ball_energy(st.field, x0, r)
    lhs1, rhs1 = E(st_s, R), E(st_t, 2 * R)
    coeff = (s - t) / R**2 * e0
    lhs2, rhs2 = E(st_t, R), E(st_s, 2 * R)
    kin = st_s.kinetic_accum - st_t.kinetic_accum
    c1 = _inferred_c(lhs1, rhs1, coeff)
    c2 = _inferred_c(lhs2, rhs2, kin + coeff)
    return TwoBallReport(lhs1, rhs1, c1, lhs2, rhs2, c2, bool(c1 > c_max or c2 > c_max))
