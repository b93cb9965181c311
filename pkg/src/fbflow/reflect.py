"""Extension of a half-disk field across the flat boundary and its potentials.

``extend`` builds ``u_hat(x1, x2) = sigma(u(x1, -x2))`` on the lower half of a
full-disk lattice.  ``assemble_potentials`` evaluates, node by node, the
matrices ``Q``, ``Qtilde`` and the antisymmetric potentials of the
divergence-form system

    div(Qtilde grad u_hat) = Omega Qtilde grad u_hat + Qtilde^-1 Q^T F(rho'(x)),

and the two residual functions measure how well a discrete field satisfies
that system and the non-divergence form ``Lap u_hat + Y(grad u_hat, grad u_hat) = F_hat``.

Derivatives of matrix fields (O, Q, normals) use the central-difference
stencil of :func:`fbflow.grid.gradient_array`; each branch formula (upper or
lower half) is differentiated as a smooth field on the whole lattice and then
restricted, so no stencil straddles the kink of a piecewise definition.
The gradient that multiplies a potential is projected onto ``T_u N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LeftTube
from .geometry import FreeBoundaryPair, _align_frames, assemble_reflection, p_and_eigen
from .grid import INTERIOR, Field, HalfDiskGrid, gradient_array

COPIED, REFLECTED = 0, 1


@dataclass(frozen=True)
class ReflectedField:
    grid: HalfDiskGrid
    values: np.ndarray
    provenance: np.ndarray
    pair: FreeBoundaryPair
    source: Field

    @property
    def lower(self) -> np.ndarray:
        return self.grid.mask & (self.grid.Y < 0)

    @property
    def upper(self) -> np.ndarray:
        return self.grid.mask & (self.grid.Y >= 0)

    def half_index(self):
        """Row map from the full lattice to the half lattice (``rho'``)."""
        n = self.grid.n
        return np.abs(np.arange(2 * n + 1) - n)


def mirror_grid(g: HalfDiskGrid) -> HalfDiskGrid:
    return HalfDiskGrid(g.radius, g.h, g.center, full=True)


def extend(f: Field) -> ReflectedField:
    """Reflect ``f`` across ``x2 = 0`` with the involution of its pair."""
    g = f.grid
    if g.full:
        raise ValueError("extend needs a half-disk field")
    fg = mirror_grid(g)
    n = g.n
    vals = np.zeros(fg.shape + (f.m,))
    prov = np.full(fg.shape, -1, dtype=int)
    vals[n:] = f.values
    prov[n:][g.mask] = COPIED
    lower = f.values[1:][::-1]
    lm = g.mask[1:][::-1]
    if lm.any():
        f.pair.check_tube(lower[lm], LeftTube)
        refl = np.zeros_like(lower)
        refl[lm] = f.pair.involute(lower[lm])
        vals[:n] = refl
        prov[:n][lm] = REFLECTED
    return ReflectedField(fg, vals, prov, f.pair, f)


def ghost_value(p: FreeBoundaryPair, u_inner):
    """Mirror value ``sigma(u_inner)`` used below a free-boundary node."""
    p.check_tube(u_inner, LeftTube)
    return p.involute(u_inner)


def trace_gap(rf: ReflectedField) -> float:
    """Largest jump between the copied trace and the reflected limit on ``x2 = 0``."""
    n = rf.grid.n
    row = rf.grid.mask[n]
    if not row.any():
        return 0.0
    refl = rf.pair.involute(rf.values[n][row])
    return float(np.max(np.abs(refl - rf.values[n][row])))


def smooth_frames(vals, vecs, mask):
    """Align eigenvector frames along the lattice, row by row.

    Each node is aligned with its left neighbour, the first node of a row
    with the first node of the row below, and the very first with the
    identity, so O inherits the smoothness of the field.
    """
    ny, nx, m = vals.shape
    O = np.zeros_like(vecs)
    prev_row_first = np.eye(m)
    for j in range(ny):
        ref = None
        for i in range(nx):
            if not mask[j, i]:
                continue
            if ref is None:
                ref = prev_row_first
            O[j, i] = _align_frames(vecs[j, i], vals[j, i], ref)
            if ref is prev_row_first:
                prev_row_first = O[j, i]
            ref = O[j, i]
    return O


@dataclass(frozen=True)
class PotentialAssembly:
    Q: np.ndarray
    Qtilde: np.ndarray
    Qtilde_inv: np.ndarray
    Omega: np.ndarray
    Omega1: np.ndarray
    Omega2: np.ndarray
    eigenvalues: np.ndarray
    grad: np.ndarray
    mask: np.ndarray

    def antisymmetry_max(self) -> float:
        worst = 0.0
        for X in (self.Omega, self.Omega1, self.Omega2):
            s = X + np.swapaxes(X, -1, -2)
            worst = max(worst, float(np.max(np.abs(s[self.mask]))) if self.mask.any() else 0.0)
        return worst


def _mat_grad(M, grid):
    """Stencil gradient of an ``(ny, nx, a, b)`` matrix field, shape ``(ny, nx, 2, a, b)``."""
    ny, nx, a, b = M.shape
    g = gradient_array(M.reshape(ny, nx, a * b), grid)
    return g.reshape(ny, nx, 2, a, b)


def _sym_inv(M):
    inv = np.linalg.inv(M)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def tangent_gradient(rf: ReflectedField) -> np.ndarray:
    """Stencil gradient of ``u_hat`` projected onto ``T_u N``, shape ``(ny, nx, 2, m)``."""
    g = gradient_array(rf.values, rf.grid)
    mask = rf.grid.mask
    out = np.zeros_like(g)
    u = rf.values[mask]
    for a in range(2):
        out[..., a, :][mask] = rf.pair.target.tangent(u, g[..., a, :][mask])
    return out


def assemble_potentials(rf: ReflectedField) -> PotentialAssembly:
    grid, pair, u = rf.grid, rf.pair, rf.values
    mask, lower = grid.mask, rf.lower
    ny, nx, m = u.shape
    eye = np.eye(m)

    # P, eigenvalues and frames from the lower-half branch, evaluated on every node
    P = np.broadcast_to(eye, (ny, nx, m, m)).copy()
    vals = np.ones((ny, nx, m))
    vecs = np.broadcast_to(eye, (ny, nx, m, m)).copy()
    Pm, vm, wm = p_and_eigen(pair, u[mask])
    P[mask], vals[mask], vecs[mask] = Pm, vm, wm
    O = smooth_frames(vals, vecs, mask)
    rm = assemble_reflection(P[mask], vals[mask], O[mask], (int(mask.sum()),))
    Qt_low = np.broadcast_to(eye, (ny, nx, m, m)).copy()
    Qt_low[mask] = rm.Qtilde

    Q = np.where(lower[..., None, None], P, eye)
    Qt = np.where(lower[..., None, None], Qt_low, eye)
    Qt_inv = _sym_inv(Qt)
    Q_inv = np.linalg.inv(Q)

    # normal frames of both branches: nu(u) and nu(sigma(u))
    nu_up = np.zeros((ny, nx, m, m - pair.target.intrinsic_dim))
    nu_lo = np.zeros_like(nu_up)
    nu_up[mask] = pair.target.normal_frame(u[mask])
    nu_lo[mask] = pair.target.normal_frame(pair.involute(u[mask]))
    nu_sig = np.where(lower[..., None, None], nu_lo, nu_up)
    dnu_sig = np.where(lower[..., None, None, None], _mat_grad(nu_lo, grid), _mat_grad(nu_up, grid))
    nu_u = nu_up

    Omega2 = np.zeros((ny, nx, 2, m, m))
    Omega1 = np.zeros_like(Omega2)
    last = np.zeros_like(Omega2)
    dO = _mat_grad(O, grid)
    dQ = _mat_grad(P, grid)
    sq = np.sqrt(vals)
    Ot = np.swapaxes(O, -1, -2)
    rs = O * sq[..., None, :]  # O sqrt(Xi)
    rsi = O * (1 / sq)[..., None, :]
    Pt = np.swapaxes(P, -1, -2)
    for a in range(2):
        dn = dnu_sig[:, :, a]
        t1 = Qt @ Q_inv @ dn @ np.swapaxes(nu_u, -1, -2) @ Qt_inv
        t2 = Qt_inv @ nu_u @ np.swapaxes(dn, -1, -2) @ np.swapaxes(Q_inv, -1, -2) @ Qt
        Omega2[:, :, a] = t1 - t2
        dOa = dO[:, :, a]
        w1 = dOa @ Ot + 0.5 * rs @ np.swapaxes(dOa, -1, -2) @ rsi @ Ot - 0.5 * rsi @ Ot @ dOa @ rs @ Ot
        Omega1[:, :, a] = np.where(lower[..., None, None], w1, 0.0)
        dQa = dQ[:, :, a]
        anti = 0.5 * (Pt @ dQa - np.swapaxes(dQa, -1, -2) @ P)
        last[:, :, a] = np.where(lower[..., None, None], -Qt_inv @ anti @ Qt_inv, 0.0)
    Omega = Omega2 + Omega1 + last
    mask5 = mask[..., None, None, None]
    return PotentialAssembly(
        Q=np.where(mask[..., None, None], Q, 0.0), Qtilde=np.where(mask[..., None, None], Qt, 0.0),
        Qtilde_inv=Qt_inv, Omega=np.where(mask5, Omega, 0.0), Omega1=np.where(mask5, Omega1, 0.0),
        Omega2=np.where(mask5, Omega2, 0.0), eigenvalues=vals, grad=tangent_gradient(rf), mask=mask,
    )


def transported_tension(rf: ReflectedField, tau) -> np.ndarray:
    """``F(rho'(x))``: half-disk tension data placed at every full-lattice node."""
    rows = rf.half_index()
    F = np.asarray(tau)[rows]
    return np.where(rf.grid.mask[..., None], F, 0.0)


def _div_flux(Qt, u, grid):
    """Flux-form ``div(Qtilde grad u)`` with face-averaged Qtilde, masked to full stencils."""
    h = grid.h
    out = np.zeros_like(u)
    for axis in (0, 1):
        sl_lo = [slice(None)] * 2
        sl_hi = [slice(None)] * 2
        sl_lo[axis], sl_hi[axis] = slice(0, -1), slice(1, None)
        lo, hi = tuple(sl_lo), tuple(sl_hi)
        Qf = 0.5 * (Qt[lo] + Qt[hi])
        flux = np.einsum("...ij,...j->...i", Qf, u[hi] - u[lo]) / h**2
        out[lo] += flux
        out[hi] -= flux
    return out


def interior_nodes(rf: ReflectedField) -> np.ndarray:
    return rf.grid.kind == INTERIOR


def divergence_form_residual(rf: ReflectedField, pa: PotentialAssembly, tau, region=None, return_field=False):
    """Discrete L2 norm of ``div(Qt grad u) - Omega Qt grad u - Qt^-1 Q^T F(rho' x)``."""
    grid = rf.grid
    lhs = _div_flux(pa.Qtilde, rf.values, grid)
    F = transported_tension(rf, tau)
    rhs = np.zeros_like(lhs)
    for a in range(2):
        rhs += np.einsum("...ij,...jk,...k->...i", pa.Omega[:, :, a], pa.Qtilde, pa.grad[:, :, a])
    rhs += np.einsum("...ij,...kj,...k->...i", pa.Qtilde_inv, pa.Q, F)
    r = lhs - rhs
    sel = interior_nodes(rf) if region is None else (np.asarray(region) & interior_nodes(rf))
    norm = float(np.sqrt(np.sum(r[sel] ** 2) * grid.h**2))
    return (norm, r) if return_field else norm


@dataclass(frozen=True)
class GlobalFormReport:
    residual: float
    f_hat_constant: float
    upsilon_constant: float


def global_form_residual(rf: ReflectedField, tau) -> GlobalFormReport:
    """Residual of ``Lap u_hat + Y(grad u_hat, grad u_hat) = F_hat``.

    ``Y`` is ``-A(u)`` on the upper half and ``-D^2(sigma o Pi_N)|_{sigma(u)}(P .., P ..)``
    on the lower half; ``F_hat`` is ``F`` above and ``P(sigma(u)) F(rho x)`` below.
    Also returns the empirical constants ``|F_hat|_{L2(D)} / |F|_{L2(D+)}`` and
    ``max |Y| / |grad u|^2``.
    """
    grid, pair, u = rf.grid, rf.pair, rf.values
    mask, lower = grid.mask, rf.lower
    eye = np.eye(u.shape[-1])
    grad = tangent_gradient(rf)
    lap = _div_flux(np.broadcast_to(eye, u.shape[:2] + eye.shape), u, grid)
    F = transported_tension(rf, tau)

    ups = np.zeros_like(u)
    up = mask & ~lower
    for a in range(2):
        g = grad[..., a, :]
        ups[up] -= pair.target.second_fundamental_form(u[up], g[up], g[up])
    if lower.any():
        ul = u[lower]
        P_u, _, _ = p_and_eigen(pair, ul)
        z = pair.involute(ul)
        for a in range(2):
            pg = np.einsum("nij,nj->ni", P_u, grad[..., a, :][lower])
            ups[lower] -= pair.sigma_pi_hessian(z, pg, pg)
    F_hat = np.array(F)
    if lower.any():
        P_s, _, _ = p_and_eigen(pair, pair.involute(u[lower]))
        F_hat[lower] = np.einsum("nij,nj->ni", P_s, F[lower])
    r = lap + ups - F_hat
    sel = interior_nodes(rf)
    res = float(np.sqrt(np.sum(r[sel] ** 2) * grid.h**2))
    w = grid.weights
    fh = np.sqrt(np.sum(w * np.sum(F_hat**2, -1)))
    f_up = np.sqrt(np.sum((w * up) * np.sum(F**2, -1)))
    g2 = np.sum(grad**2, axis=(-2, -1))
    ok = sel & (g2 > 1e-12)
    ups_c = float(np.max(np.linalg.norm(ups[ok], axis=-1) / g2[ok])) if ok.any() else 0.0
    return GlobalFormReport(res, float(fh / f_up) if f_up > 0 else 0.0, ups_c)


@dataclass(frozen=True)
class ReflectionReport:
    antisymmetry_max: float
    trace_gap: float
    eigen_boundary_gap: float
    residual_h: float
    residual_h2: float
    order_estimate: float
    upper_equivalence_gap: float

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def eigen_boundary_gap(rf: ReflectedField, pa: PotentialAssembly) -> float:
    """``max |lambda_i - 1|`` over the nodes on ``x2 = 0``."""
    row = rf.grid.mask & (np.abs(rf.grid.Y) < 1e-12)
    if not row.any():
        return 0.0
    return float(np.max(np.abs(pa.eigenvalues[row] - 1.0)))


def upper_equivalence_gap(rf: ReflectedField, pa: PotentialAssembly, tau) -> float:
    """Largest nodewise difference, on the upper half, between the divergence-form
    residual and the residual of ``Lap u - A(u)(grad u, grad u) = F``."""
    _, r_div = divergence_form_residual(rf, pa, tau, return_field=True)
    grid, u = rf.grid, rf.values
    eye = np.eye(u.shape[-1])
    lap = _div_flux(np.broadcast_to(eye, u.shape[:2] + eye.shape), u, grid)
    F = transported_tension(rf, tau)
    sel = interior_nodes(rf) & rf.upper
    A = np.zeros(u[sel].shape)
    for a in range(2):
        g = pa.grad[..., a, :][sel]
        A += rf.pair.target.second_fundamental_form(u[sel], g, g)
    r_eq = lap[sel] - A - F[sel]
    return float(np.max(np.abs(r_eq - r_div[sel]))) if sel.any() else 0.0
