"""Command-line experiment runner.

    fbflow flow run        run a flow from a preset, a synthetic map or a snapshot
    fbflow synth make      write a synthetic field as a snapshot
    fbflow analyze bubbles blow-up analysis of snapshot files
    fbflow verify reflection
    fbflow verify all      every identity check over the preset suite
    fbflow report plot-data

Configuration is one JSON document (``--emit-default-config`` prints it);
flags override its fields.  Reports are deterministic JSON: no timestamps,
sorted keys, fixed float formatting.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import __version__, analyze, flow, persist, reflect, synth
from .errors import ConfigError, FbflowError, IoError, LeftTube, MissingSnapshot, NoScale, OutsideTube, ScaleOverlap
from .geometry import PAIRS, get_pair
from .grid import Field, HalfDiskGrid

PRESETS = ("gap-test", "pohozaev-refine", "energy-identity", "flat")

DEFAULT_CONFIG = {
    "pair": {"name": "sphere", "params": {}},
    "grid": {"radius": 1.0, "h": 1.0 / 64},
    "initial": {"preset": "gap-test"},
    "flow": {"dt_factor": 0.2, "t_end": 5.0, "check_cfl": True, "snapshot_times": [],
             "energy_every": 0.05, "stop_on_concentration": True, "chunk": 200},
    "analysis": {"eps_bar": 1.0, "delta": 0.25, "R": 8.0, "R_profile": 16.0, "a_max": 100.0,
                 "pohozaev_center": [0.0, 0.0], "pohozaev_t": 0.25, "r_det": None},
    "output": {"dir": "fbflow-out"},
    "seed": 0,
}


# ---- configuration ---------------------------------------------------------------


def merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[k], dict) and k not in ("params", "initial"):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected an object")
            out[k] = merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _positive(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if not isinstance(node, (int, float)) or isinstance(node, bool) or not node > 0 or not math.isfinite(node):
        raise ConfigError(f"{path}: must be a positive number, got {node!r}")


def validate(cfg: dict) -> dict:
    for p in ("grid.radius", "grid.h", "flow.dt_factor", "flow.t_end", "flow.energy_every", "flow.chunk",
              "analysis.eps_bar", "analysis.delta", "analysis.R", "analysis.R_profile", "analysis.a_max",
              "analysis.pohozaev_t"):
        _positive(cfg, p)
    if cfg["pair"]["name"] not in PAIRS:
        raise ConfigError(f"pair.name: unknown pair {cfg['pair']['name']!r} (known: {', '.join(sorted(PAIRS))})")
    if cfg["grid"]["h"] > cfg["grid"]["radius"] / 4:
        raise ConfigError("grid.h: needs at least four spacings per radius")
    init = cfg["initial"]
    keys = set(init) & {"preset", "snapshot", "synth"}
    if len(keys) != 1:
        raise ConfigError("initial: give exactly one of preset, snapshot, synth")
    if "preset" in init and init["preset"] not in PRESETS:
        raise ConfigError(f"initial.preset: unknown preset {init['preset']!r} (known: {', '.join(PRESETS)})")
    if "snapshot" in init and not Path(init["snapshot"]).exists():
        raise ConfigError(f"initial.snapshot: {init['snapshot']} does not exist")
    if "synth" in init:
        s = init["synth"]
        if s.get("kind") not in (synth.BOUNDARY_DISK, synth.INTERIOR_SPHERE, "exact", "tilted"):
            raise ConfigError(f"initial.synth.kind: unknown kind {s.get('kind')!r}")
    if cfg["analysis"]["r_det"] is not None:
        _positive(cfg, "analysis.r_det")
    ts = cfg["flow"]["snapshot_times"]
    if not isinstance(ts, list) or any(not isinstance(t, (int, float)) or t < 0 for t in ts):
        raise ConfigError("flow.snapshot_times: expected a list of non-negative times")
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be an object")
        cfg = merge(cfg, doc)
    if overrides:
        cfg = merge(cfg, overrides)
    return validate(cfg)


# ---- checks ---------------------------------------------------------------------


def check(name: str, passed: bool, value, limit, detail: str = "") -> dict:
    out = {"name": name, "passed": bool(passed), "value": value, "limit": limit}
    if detail:
        out["detail"] = detail
    return out


def _pair(cfg):
    return get_pair(cfg["pair"]["name"], **cfg["pair"]["params"])


def _grid(cfg, h=None):
    return HalfDiskGrid(cfg["grid"]["radius"], h or cfg["grid"]["h"])


def tangency_defect(f: Field) -> float:
    """Largest normal component of the discrete tension relative to the largest Laplacian."""
    lap = flow.laplacian_with_ghost(f)
    tau = flow.tension_field(f)
    m = f.grid.mask
    t = f.pair.target
    if t.ambient_dim == t.intrinsic_dim:
        return 0.0
    nu = t.normal_frame(f.values[m])
    normal = np.einsum("nmk,nm->nk", nu, tau[m])
    scale = float(np.max(np.linalg.norm(lap[m], axis=-1)))
    return float(np.max(np.abs(normal)) / scale) if scale > 0 else 0.0


def _energy_table(states) -> dict:
    rows = []
    for s in states:
        rows.append([s.time, s.energy, flow.tension_l2(s.field), s.kinetic_accum])
    return {"columns": ["t", "E", "tension_l2", "kinetic_accum"], "rows": rows}


def run_flow(f: Field, cfg: dict, t_end: float, snapshot_times=(), every: float | None = None):
    """Flow ``f`` to ``t_end``; returns (final state, RunLog, recorded states, snapshot states)."""
    fc = cfg["flow"]
    s = flow.initial_state(f, fc["dt_factor"], check_cfl=fc["check_cfl"])
    log = flow.RunLog()
    every = fc["energy_every"] if every is None else every
    marks = sorted(set([round(k * every, 12) for k in range(1, int(math.floor(t_end / every + 1e-9)) + 1)]
                       + [float(t) for t in snapshot_times if 0 < t <= t_end] + [t_end]))
    recorded, snaps = [s], [s] if 0.0 in snapshot_times else []
    want = set(float(t) for t in snapshot_times)
    eps = cfg["analysis"]["eps_bar"] if fc["stop_on_concentration"] else None
    for t in marks:
        if t <= s.time + 1e-12:
            continue
        s = flow.run(s, t, eps_bar=eps, log=log, chunk=int(fc["chunk"]), record_every=int(fc["chunk"]))
        recorded.append(s)
        if any(abs(t - w) < 1e-12 for w in want):
            snaps.append(s)
        if s.event is not None:
            break
    return s, log, recorded, snaps


def flow_checks(name: str, s0, s, log, states, cfg) -> list[dict]:
    e0, e1 = s0.energy, s.energy
    out = [
        check(f"{name}.energy_monotone", log.max_energy_rise <= 1e-8, log.max_energy_rise, 1e-8,
              f"largest single-step rise at step {log.worst_step}" if log.max_energy_rise > 1e-8 else ""),
        check(f"{name}.kinetic_bound", s.kinetic_accum <= 1.05 * (e0 - e1) + 1e-6, s.kinetic_accum,
              1.05 * (e0 - e1) + 1e-6),
    ]
    if s.field.pair.target.ambient_dim > s.field.pair.target.intrinsic_dim:
        worst = max(tangency_defect(st.field) for st in states)
        out.append(check(f"{name}.tension_tangent", worst <= 1e-10, worst, 1e-10))
    x0 = tuple(cfg["analysis"]["pohozaev_center"])
    t = cfg["analysis"]["pohozaev_t"]
    worst, held = -np.inf, True
    for st in states:
        ab = analyze.pohozaev_annulus(st.field, flow.tension_field(st.field), x0, t)
        held &= ab.holds
        worst = max(worst, ab.value - ab.bound * (1 + ab.slack))
    out.append(check(f"{name}.pohozaev_annulus", held, worst, 0.0, "value - 1.1 bound, worst snapshot"))
    return out


# ---- presets ------------------------------------------------------------------------


def tilted_with_energy(grid: HalfDiskGrid, energy: float, pair) -> tuple[float, Field]:
    """Tilted base map whose lumped energy on ``grid`` equals ``energy``."""
    def sample(c):
        return synth.PlantedMap(synth.tilted_base(c), pair=pair).sample(grid)

    c = brentq(lambda c: flow.lumped_energy(sample(c)) - energy, 1e-3, 3.0, xtol=1e-14, rtol=1e-14)
    return float(c), sample(c)


def preset_gap(cfg) -> dict:
    pair, grid = _pair(cfg), _grid(cfg)
    c, f = tilted_with_energy(grid, 0.1, pair)
    times = [0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0]
    s, log, rec, snaps = run_flow(f, cfg, 5.0, times, every=0.25)
    s0 = rec[0]
    checks = flow_checks("gap-test", s0, s, log, snaps, cfg)
    checks.append(check("gap-test.reaches_constant", s.energy <= 1e-6 * s0.energy, s.energy, 1e-6 * s0.energy))
    m = analyze.concentration_mass([st.field for st in snaps[1:]], (0.0, 0.0), s.field)
    checks.append(check("gap-test.no_concentration_mass", abs(m) <= 0.01 * s0.energy, m, 0.01 * s0.energy))
    try:
        tb = flow.two_ball_check(snaps, (0.0, 0.0), 0.25, 0.0, 0.5).as_dict()
    except MissingSnapshot as exc:
        tb = {"error": str(exc)}
    return {"checks": checks, "tilt": c, "E0": s0.energy, "E_final": s.energy, "steps": log.steps,
            "dt": s.dt, "kinetic_accum": s.kinetic_accum, "two_ball": tb, "event": _event(s),
            "energy": _energy_table(rec)}


def _event(s) -> dict | None:
    return None if s.event is None else dict(s.event.__dict__)


def _smooth_bump(x):
    return np.stack([np.sin(np.pi * x[..., 0]) * np.cos(0.5 * np.pi * x[..., 1]),
                     np.cos(np.pi * x[..., 0]) * x[..., 1],
                     np.sin(0.5 * np.pi * (x[..., 0] + x[..., 1]))], axis=-1)


def perturbed(f: Field, amplitude: float) -> Field:
    g = f.grid
    pts = np.stack([g.X, g.Y], axis=-1)
    bump = _smooth_bump(pts)[..., :f.m]
    vals = np.array(f.values)
    m = g.mask
    vals[m] = f.pair.target.project(vals[m] + amplitude * bump[m])
    return flow.enforce_free_boundary(Field(g, vals, f.pair, check=False))


def preset_pohozaev(cfg) -> dict:
    pair = get_pair("sphere")
    x0 = (0.0, 0.0)
    rows, defects = [], []
    for h in (1 / 32, 1 / 64):
        f = synth.exact_solution(HalfDiskGrid(1.0, h), pair=pair)
        tau = flow.tension_field(f)
        pb = analyze.pohozaev_boundary(f, tau, x0, 0.5)
        ab = analyze.pohozaev_annulus(f, tau, x0, 0.25)
        defects.append(pb.defect)
        rows.append([h, pb.lhs, pb.rhs, pb.defect, ab.value, ab.bound])
    ratio = defects[0] / defects[1] if defects[1] > 0 else math.inf
    fl = synth.identity_field(HalfDiskGrid(1.0, 1 / 32))
    flat_def = analyze.pohozaev_boundary(fl, flow.tension_field(fl), x0, 0.5).defect
    checks = [
        check("pohozaev-refine.defect_ratio", ratio >= 1.8, ratio, 1.8),
        check("pohozaev-refine.flat_defect", flat_def <= 1e-12, flat_def, 1e-12),
        check("pohozaev-refine.annulus_exact", all(r[4] <= 1.1 * r[5] + 1e-14 for r in rows),
              max(r[4] - 1.1 * r[5] for r in rows), 0.0),
    ]
    f0 = perturbed(synth.exact_solution(HalfDiskGrid(1.0, 1 / 32), pair=pair), 0.05)
    s, log, rec, snaps = run_flow(f0, cfg, 0.1, [0.0, 0.01, 0.05, 0.1], every=0.01)
    checks += flow_checks("pohozaev-refine.flow", rec[0], s, log, snaps, cfg)
    return {"checks": checks, "defect_ratio": ratio, "order_estimate": math.log2(ratio),
            "table": {"columns": ["h", "lhs", "rhs", "defect", "annulus_value", "annulus_bound"], "rows": rows},
            "energy": _energy_table(rec)}


LADDER = (4, 6, 8)
MASS_LADDER = (6, 7, 8, 9)
LADDER_CENTERS = {synth.BOUNDARY_DISK: (0.1, 0.0), synth.INTERIOR_SPHERE: (0.1, 0.5)}


def ladder(kind: str, cfg, exponents=LADDER, tilt: float = 0.5) -> dict:
    """Energy identity and no-neck diagnostics on a planted family ``lam = 2^-n``."""
    pair = get_pair("sphere")
    an = cfg["analysis"]
    delta, eps_bar = an["delta"], an["eps_bar"]
    dom = HalfDiskGrid(1.0, 1 / 64)
    base = synth.tilted_base(tilt)
    center = LADDER_CENTERS[kind]
    oracle = 2 * np.pi if kind == synth.BOUNDARY_DISK else 4 * np.pi
    levels = []
    for n in exponents:
        lam = 2.0**-n
        pm = synth.attach(base, kind, center, lam, pair=pair)
        stacks = analyze.locate_bubbles(pm, pair, dom, eps_bar)
        entry = {"n": n, "lambda": lam, "detected": len(stacks)}
        if not stacks:
            levels.append(entry)
            continue
        st = stacks[0]
        cp = analyze.select_scale(st, st.finest.center, eps_bar, a_max=an["a_max"])
        led = analyze.energy_ledger(st, base, [cp], delta)
        nd = analyze.neck_decompose(st, cp, delta, analyze.core_R(cp, delta))
        entry.update(point=cp.as_dict(), ledger=led.as_dict(), neck=nd.as_dict(), levels=len(st.levels))
        try:
            dp = analyze.dyadic_profile(st, cp, delta, an["R_profile"])
            entry["dyadic"] = dp.as_dict()
            entry["middle_fraction"] = dp.middle_max() / led.bubble_energies[0]
        except ScaleOverlap as exc:
            entry["dyadic"] = {"error": str(exc)}
        tau0 = flow.tension_field(st.levels[0].field)
        ab = analyze.pohozaev_annulus(st.levels[0].field, tau0, tuple(an["pohozaev_center"]), an["pohozaev_t"])
        entry["pohozaev_annulus"] = ab.as_dict()
        levels.append(entry)
    fin = levels[-1]
    checks = []
    tag = f"energy-identity.{kind}"
    if "ledger" in fin:
        rr = fin["ledger"]["relative_residual"]
        eb = fin["ledger"]["bubble_energies"][0]
        checks.append(check(f"{tag}.ledger_residual", rr <= 0.02, rr, 0.02))
        checks.append(check(f"{tag}.bubble_energy", abs(eb - oracle) <= 0.02 * oracle, eb / oracle, [0.98, 1.02]))
        osc = [lv["neck"]["oscillation"] for lv in levels if "neck" in lv]
        dec = len(osc) == len(levels) and all(b < a for a, b in zip(osc, osc[1:]))
        checks.append(check(f"{tag}.neck_oscillation_decreasing", dec, osc, "strictly decreasing"))
        mid = fin.get("middle_fraction", math.inf)
        checks.append(check(f"{tag}.middle_dyadic", mid <= 0.05, mid, 0.05))
    else:
        checks.append(check(f"{tag}.detected", False, 0, 1, "no concentration found at the finest scale"))
    held = all(lv["pohozaev_annulus"]["holds"] for lv in levels if "pohozaev_annulus" in lv)
    checks.append(check(f"{tag}.pohozaev_annulus", held, None, None))
    return {"checks": checks, "levels": levels, "oracle": oracle}


def planted_mass(kind: str, exponents=MASS_LADDER, tilt: float = 0.5) -> dict:
    """Concentration mass of a planted family approaching its bubble-free limit."""
    pair = get_pair("sphere")
    dom = HalfDiskGrid(1.0, 1 / 64)
    base = synth.tilted_base(tilt)
    center = LADDER_CENTERS[kind]
    lams = [2.0**-n for n in exponents]
    snaps = [analyze.zoom(synth.attach(base, kind, center, lam, pair=pair), pair, dom, center) for lam in lams]
    final = synth.PlantedMap(base, pair=pair).sample(dom)
    m = analyze.concentration_mass(snaps, center, final, approach=lams)
    oracle = 2 * np.pi if kind == synth.BOUNDARY_DISK else 4 * np.pi
    ok = abs(m - oracle) <= 0.05 * oracle
    return {"mass": m, "oracle": oracle,
            "checks": [check(f"concentration-mass.{kind}", ok, m / oracle, [0.95, 1.05])]}


def preset_energy_identity(cfg) -> dict:
    out = {"checks": []}
    for kind in (synth.BOUNDARY_DISK, synth.INTERIOR_SPHERE):
        lad = ladder(kind, cfg)
        mass = planted_mass(kind)
        out["checks"] += lad["checks"] + mass["checks"]
        out[kind] = {"levels": lad["levels"], "oracle": lad["oracle"], "mass": mass["mass"]}
    return out


def preset_flat(cfg) -> dict:
    pair = get_pair("flat")
    g = HalfDiskGrid(1.0, 1 / 32)
    f = synth.identity_field(g, pair)
    tau = flow.tension_field(f)
    rf = reflect.extend(f)
    pa = reflect.assemble_potentials(rf)
    div = reflect.divergence_form_residual(rf, pa, tau)
    glob = reflect.global_form_residual(rf, tau).residual
    om = float(np.max(np.abs(pa.Omega)))
    poh = analyze.pohozaev_boundary(f, tau, (0.0, 0.0), 0.5).defect
    checks = [
        check("flat.divergence_residual", div <= 1e-12, div, 1e-12),
        check("flat.global_residual", glob <= 1e-12, glob, 1e-12),
        check("flat.potentials_vanish", om <= 1e-12, om, 1e-12),
        check("flat.pohozaev_defect", poh <= 1e-12, poh, 1e-12),
    ]
    f0 = perturbed(f, 0.05)
    s, log, rec, snaps = run_flow(f0, cfg, 0.1, [0.0, 0.01, 0.05, 0.1], every=0.01)
    checks += flow_checks("flat.flow", rec[0], s, log, snaps, cfg)
    return {"checks": checks, "energy": _energy_table(rec)}


def verify_reflection(cfg=None) -> dict:
    """Reflection calculus on the exact map (kept inside the reflection tube) and the flat pair."""
    pair = get_pair("sphere")
    res, anti, trace, eig, upper, consts = [], 0.0, 0.0, 0.0, 0.0, []
    for h in (1 / 32, 1 / 64):
        f = synth.exact_solution(HalfDiskGrid(1.0, h), lam=1.5, center=(0.1, 0.0), pair=pair)
        tau = flow.tension_field(f)
        rf = reflect.extend(f)
        pa = reflect.assemble_potentials(rf)
        res.append(reflect.divergence_form_residual(rf, pa, tau))
        anti = max(anti, pa.antisymmetry_max())
        trace = max(trace, reflect.trace_gap(rf))
        eig = max(eig, reflect.eigen_boundary_gap(rf, pa))
        upper = max(upper, reflect.upper_equivalence_gap(rf, pa, tau))
        gf = reflect.global_form_residual(rf, tau)
        consts.append({"h": h, "global_residual": gf.residual, "f_hat_constant": gf.f_hat_constant,
                       "upsilon_constant": gf.upsilon_constant})
    order = math.log2(res[0] / res[1]) if res[1] > 0 else math.inf
    flat = preset_flat_reflection()
    checks = [
        check("reflection.antisymmetry", anti <= 1e-10, anti, 1e-10),
        check("reflection.eigenvalues_on_K", eig <= 1e-8, eig, 1e-8),
        check("reflection.residual_order", order >= 1.0, order, 1.0),
        check("reflection.upper_equivalence", upper <= 1e-10, upper, 1e-10),
        check("reflection.trace_gap", trace == 0.0, trace, 0.0),
        check("reflection.flat_residuals", flat <= 1e-12, flat, 1e-12),
    ]
    return {"checks": checks, "antisymmetry_max": anti, "trace_gap": trace, "residual_h": res[0],
            "residual_h2": res[1], "order_estimate": order, "eigen_boundary_gap": eig,
            "upper_equivalence_gap": upper, "global_form": consts, "flat_residual": flat}


def preset_flat_reflection() -> float:
    g = HalfDiskGrid(1.0, 1 / 32)
    f = synth.identity_field(g)
    tau = flow.tension_field(f)
    rf = reflect.extend(f)
    pa = reflect.assemble_potentials(rf)
    return max(reflect.divergence_form_residual(rf, pa, tau), reflect.global_form_residual(rf, tau).residual)


PRESET_RUNNERS: dict[str, Callable[[dict], dict]] = {
    "gap-test": preset_gap,
    "pohozaev-refine": preset_pohozaev,
    "energy-identity": preset_energy_identity,
    "flat": preset_flat,
}


def verify_all(cfg: dict, presets=PRESETS) -> dict:
    sections, checks = {}, []
    for name in presets:
        try:
            out = PRESET_RUNNERS[name](cfg)
        except OutsideTube as exc:
            out = {"checks": [check(f"{name}.stays_in_tube", False, None, None, str(exc))]}
        sections[name] = out
        checks += out["checks"]
    out = verify_reflection(cfg)
    sections["reflection"] = out
    checks += out["checks"]
    failed = [c["name"] for c in checks if not c["passed"]]
    return {"kind": "verify-all", "version": __version__, "config": cfg, "checks": checks,
            "failed": failed, "passed": not failed, "sections": sections}


# ---- initial data -------------------------------------------------------------------


def initial_field(cfg) -> Field:
    init = cfg["initial"]
    pair, grid = _pair(cfg), _grid(cfg)
    if "snapshot" in init:
        return persist.read_snapshot(init["snapshot"], cfg["pair"]["params"]).field
    if "synth" in init:
        return synth_field(init["synth"], grid, pair)
    name = init["preset"]
    if name == "gap-test":
        return tilted_with_energy(grid, 0.1, pair)[1]
    if name == "pohozaev-refine":
        return perturbed(synth.exact_solution(grid, pair=pair), 0.05)
    if name == "flat":
        return perturbed(synth.identity_field(grid, get_pair("flat")), 0.05)
    raise ConfigError(f"initial.preset: {name!r} is an analysis preset, not a flow")


def synth_field(spec: dict, grid: HalfDiskGrid, pair) -> Field:
    kind = spec["kind"]
    if kind == "exact":
        return synth.exact_solution(grid, spec.get("lambda", 0.5), tuple(spec.get("center", (0.1, 0.0))), pair=pair)
    base = synth.tilted_base(float(spec.get("tilt", 0.0)))
    if kind == "tilted":
        return synth.PlantedMap(base, pair=pair).sample(grid)
    lam = float(spec.get("lambda", 1 / 64))
    center = tuple(spec.get("center", LADDER_CENTERS[kind]))
    if lam < 4 * grid.h:
        raise ConfigError(f"initial.synth.lambda: {lam} is below 4h = {4 * grid.h}")
    return synth.attach(base, kind, center, lam, pair=pair).sample(grid)


# ---- subcommands ----------------------------------------------------------------------


def _overrides(args) -> dict:
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        node = o
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value

    put("grid.h", getattr(args, "h", None))
    put("flow.dt_factor", getattr(args, "dt_factor", None))
    put("flow.t_end", getattr(args, "t_end", None))
    if getattr(args, "no_check_cfl", False):
        put("flow.check_cfl", False)
    if getattr(args, "preset", None):
        o["initial"] = {"preset": args.preset}
    if getattr(args, "snapshot", None):
        o["initial"] = {"snapshot": args.snapshot}
    put("output.dir", getattr(args, "out", None))
    put("pair.name", getattr(args, "pair", None))
    return o


def cmd_flow_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if cfg["initial"].get("preset") == "energy-identity":
        raise ConfigError("initial.preset: energy-identity is a synthetic ladder; use `verify all`")
    f = initial_field(cfg)
    fc = cfg["flow"]
    out = Path(cfg["output"]["dir"])
    status, note = 0, ""
    try:
        s, log, rec, snaps = run_flow(f, cfg, fc["t_end"], fc["snapshot_times"])
    except LeftTube as exc:
        s, log, rec, snaps, status, note = None, None, [], [], LeftTube.exit_code, str(exc)
    for st in snaps:
        persist.write_snapshot(st.field, out / f"snapshot_{st.step_index:08d}.csv", st.time, st.step_index)
    if rec:
        persist.write_csv(out / "energy.csv", ["t", "E", "tension_l2", "kinetic_accum"], _energy_table(rec)["rows"])
    report = {"kind": "flow-run", "config": cfg, "status": status}
    if s is not None:
        report.update(E0=rec[0].energy, E_final=s.energy, time=s.time, steps=log.steps,
                      max_energy_rise=log.max_energy_rise, kinetic_accum=s.kinetic_accum,
                      checks=flow_checks("flow", rec[0], s, log, snaps or [s], cfg),
                      event=_event(s), energy=_energy_table(rec))
    else:
        report["error"] = note
    persist.write_report(report, out / "report.json")
    print(f"flow: status {status}; report in {out / 'report.json'}")
    return status


def cmd_synth_make(args) -> int:
    pair = get_pair(args.pair)
    grid = HalfDiskGrid(args.radius, args.h)
    spec = {"kind": args.kind, "lambda": args.lam, "tilt": args.tilt}
    if args.center is not None:
        spec["center"] = list(args.center)
    f = synth_field(spec, grid, pair)
    persist.write_snapshot(f, args.out)
    print(f"wrote {args.out}")
    return 0


def analyze_snapshots(paths, cfg, base_path=None) -> dict:
    an = cfg["analysis"]
    snaps = [persist.read_snapshot(p, cfg["pair"]["params"]) for p in paths]
    fields = [s.field for s in snaps]
    last = fields[-1]
    g = last.grid
    points = analyze.detect_concentration(last, an["eps_bar"], an["r_det"])
    entries, cps = [], []
    for x in points:
        e = {"hint": list(x)}
        try:
            cp = analyze.select_scale(last, x, an["eps_bar"], a_max=an["a_max"])
            cps.append(cp)
            e["point"] = cp.as_dict()
            try:
                e["neck"] = analyze.neck_decompose(last, cp, an["delta"], an["R"]).as_dict()
                e["dyadic"] = analyze.dyadic_profile(last, cp, an["delta"], an["R"]).as_dict()
            except ScaleOverlap as exc:
                e["neck_error"] = str(exc)
        except NoScale as exc:
            e["scale_error"] = str(exc)
        entries.append(e)
    report = {"kind": "analyze-bubbles", "inputs": [str(p) for p in paths], "concentrations": entries,
              "energies": {"columns": ["t", "E"], "rows": [[s.t, analyze.as_stack(s.field).energy()] for s in snaps]}}
    if base_path:
        base = persist.read_snapshot(base_path, cfg["pair"]["params"]).field
        report["ledger"] = analyze.energy_ledger(last, base, cps, an["delta"]).as_dict()
        if points and len(fields) > 1:
            report["concentration_mass"] = [analyze.concentration_mass(fields, x, base) for x in points]
    rows = []
    if not g.full:
        x0 = (g.center[0], 0.0)
        tau = flow.tension_field(last)
        t = 4 * g.h
        while 2 * t <= g.radius - 2 * g.h - abs(x0[0] - g.center[0]):
            pb = analyze.pohozaev_boundary(last, tau, x0, t)
            ab = analyze.pohozaev_annulus(last, tau, x0, t)
            rows.append([t, pb.lhs, pb.rhs, pb.defect, ab.value, ab.bound])
            t *= 2
    report["pohozaev"] = {"columns": ["t", "lhs", "rhs", "defect", "annulus_value", "annulus_bound"], "rows": rows}
    return report


def cmd_analyze_bubbles(args) -> int:
    over = {"analysis": {"r_det": args.r_det}} if args.r_det is not None else None
    cfg = load_config(args.config, over)
    report = analyze_snapshots(args.input, cfg, args.base)
    persist.write_report(report, args.report)
    if args.csv_dir:
        export_tables(report, args.csv_dir)
    print(f"analysis of {len(args.input)} snapshot(s) written to {args.report}")
    return 0


def cmd_verify_reflection(args) -> int:
    report = {"kind": "verify-reflection", **verify_reflection()}
    text = persist.report_text(report)
    if args.report:
        persist.write_report(report, args.report)
    else:
        sys.stdout.write(text)
    return 0 if all(c["passed"] for c in report["checks"]) else 4


def cmd_verify_all(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    presets = tuple(args.only) if args.only else PRESETS
    report = verify_all(cfg, presets)
    if args.report:
        persist.write_report(report, args.report)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}")
    return 0 if report["passed"] else 4


def export_tables(report: dict, out_dir) -> list[Path]:
    """Write every ``{"columns": [...], "rows": [...]}`` table, and dyadic profiles, as CSV."""
    out = Path(out_dir)
    written = []

    def walk(node, path):
        if isinstance(node, dict):
            if "columns" in node and "rows" in node:
                name = "_".join(path) or "table"
                written.append(persist.write_csv(out / f"{name}.csv", node["columns"], node["rows"]))
                return
            if "energies" in node and "radii" in node and isinstance(node["energies"], list):
                name = "_".join(path)
                rows = [[node["radii"][i], node["radii"][i + 1], e, p]
                        for i, (e, p) in enumerate(zip(node["energies"], node["pohozaev"]))]
                written.append(persist.write_csv(out / f"{name}.csv", ["r_in", "r_out", "energy", "pohozaev"], rows))
                return
            for k in sorted(node):
                walk(node[k], path + [str(k)])
        elif isinstance(node, list):
            for i, v in enumerate(node):
                walk(v, path + [str(i)])

    walk(report, [])
    return written


def cmd_plot_data(args) -> int:
    report = persist.read_report(args.report)
    files = export_tables(report, args.out)
    print(f"wrote {len(files)} table(s) to {args.out}")
    return 0


# ---- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbflow", description="Free-boundary harmonic map heat flow experiments.")
    p.add_argument("--version", action="version", version=f"fbflow {__version__}")
    p.add_argument("--emit-default-config", action="store_true", help="print the default configuration and exit")
    sub = p.add_subparsers(dest="group")

    def common_flow(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--h", type=float, help="lattice spacing")
        sp.add_argument("--dt-factor", type=float, help="time step as a multiple of h^2")
        sp.add_argument("--no-check-cfl", action="store_true", help="accept time steps above the stability limit")

    fl = sub.add_parser("flow").add_subparsers(dest="cmd")
    r = fl.add_parser("run", help="run a heat flow")
    common_flow(r)
    r.add_argument("--preset", choices=[x for x in PRESETS if x != "energy-identity"])
    r.add_argument("--snapshot", help="initial data from a snapshot file")
    r.add_argument("--t-end", type=float)
    r.add_argument("--pair", choices=sorted(PAIRS))
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_flow_run)

    sy = sub.add_parser("synth").add_subparsers(dest="cmd")
    m = sy.add_parser("make", help="write a synthetic field")
    m.add_argument("--kind", required=True, choices=[synth.BOUNDARY_DISK, synth.INTERIOR_SPHERE, "exact", "tilted"])
    m.add_argument("--lambda", dest="lam", type=float, default=1 / 64)
    m.add_argument("--center", type=float, nargs=2)
    m.add_argument("--tilt", type=float, default=0.0)
    m.add_argument("--h", type=float, default=1 / 256)
    m.add_argument("--radius", type=float, default=1.0)
    m.add_argument("--pair", default="sphere", choices=sorted(PAIRS))
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_synth_make)

    an = sub.add_parser("analyze").add_subparsers(dest="cmd")
    b = an.add_parser("bubbles", help="blow-up analysis of snapshots")
    b.add_argument("--input", nargs="+", required=True)
    b.add_argument("--base", help="snapshot of the limit map, enables the energy ledger")
    b.add_argument("--report", required=True)
    b.add_argument("--csv-dir")
    b.add_argument("--config")
    b.add_argument("--r-det", type=float, help="detection radius (default 8h)")
    b.set_defaults(func=cmd_analyze_bubbles)

    ve = sub.add_parser("verify").add_subparsers(dest="cmd")
    vr = ve.add_parser("reflection", help="reflection calculus checks")
    vr.add_argument("--report")
    vr.set_defaults(func=cmd_verify_reflection)
    va = ve.add_parser("all", help="every identity check over the preset suite")
    common_flow(va)
    va.add_argument("--report")
    va.add_argument("--only", nargs="+", choices=PRESETS)
    va.set_defaults(func=cmd_verify_all)

    rp = sub.add_parser("report").add_subparsers(dest="cmd")
    pd = rp.add_parser("plot-data", help="extract CSV tables from a report")
    pd.add_argument("--report", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.emit_default_config:
        sys.stdout.write(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True) + "\n")
        return 0
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return int(args.func(args))
    except FbflowError as exc:
        print(f"fbflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
