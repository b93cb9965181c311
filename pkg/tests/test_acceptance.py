"""Acceptance suite: the eleven headline criteria, evaluated on two `verify all` runs.

Run with ``pytest tests/test_acceptance.py`` for a PASS/FAIL line per criterion in
the terminal summary, or ``python tests/test_acceptance.py`` to print the lines directly.
"""

from __future__ import annotations

import json
import math
import time

import pytest

from fbflow import cli

RESULTS: list[str] = []


def run_suite(tmp_dir) -> dict:
    reports, seconds = [], []
    for name in ("first.json", "second.json"):
        path = tmp_dir / name
        t0 = time.perf_counter()
        code = cli.main(["verify", "all", "--report", str(path)])
        seconds.append(time.perf_counter() - t0)
        reports.append(path.read_bytes())
    return {"code": code, "report": json.loads(reports[0]), "bytes": reports, "seconds": seconds}


def checks(rep: dict, suffix: str) -> list[dict]:
    found = [c for c in rep["checks"] if c["name"].endswith(suffix)]
    assert found, f"no check ending in {suffix!r}"
    return found


def named(rep: dict, name: str) -> dict:
    (c,) = [c for c in rep["checks"] if c["name"] == name]
    return c


def worst(items, key=lambda c: c["value"]):
    return max(key(c) for c in items)


def energy_monotone(s):
    rises = checks(s["report"], ".energy_monotone")
    rise = worst(rises)
    # the first run includes compilation of the kernels
    t = min(s["seconds"])
    return rise <= 1e-8 and t < 60, f"largest step rise {rise:.3e} over {len(rises)} flows; suite {t:.1f} s"


def kinetic_bound(s):
    cs = checks(s["report"], ".kinetic_bound")
    slack = min(c["limit"] - c["value"] for c in cs)
    return all(c["value"] <= c["limit"] for c in cs), f"smallest slack {slack:.3e} over {len(cs)} flows"


def tangency(s):
    v = worst(checks(s["report"], ".tension_tangent"))
    return v <= 1e-10, f"relative normal component {v:.3e}"


def pohozaev(s):
    rows = s["report"]["sections"]["pohozaev-refine"]["table"]["rows"]
    ratio = rows[0][3] / rows[1][3]
    flat = named(s["report"], "pohozaev-refine.flat_defect")["value"]
    return ratio >= 1.8 and flat <= 1e-12, f"defect ratio {ratio:.3f}; flat defect {flat:.3e}"


def annulus(s):
    cs = checks(s["report"], "pohozaev_annulus") + checks(s["report"], "annulus_exact")
    return all(c["passed"] for c in cs), f"{len(cs)} annulus checks, value <= 1.1 bound"


def reflection(s):
    r = s["report"]["sections"]["reflection"]
    flat = max(r["flat_residual"], named(s["report"], "flat.divergence_residual")["value"],
               named(s["report"], "flat.global_residual")["value"])
    ok = (r["antisymmetry_max"] <= 1e-10 and r["eigen_boundary_gap"] <= 1e-8 and r["order_estimate"] >= 1.0
          and flat <= 1e-12)
    return ok, (f"antisymmetry {r['antisymmetry_max']:.2e}; eigen gap {r['eigen_boundary_gap']:.2e}; "
                f"order {r['order_estimate']:.2f}; flat {flat:.1e}")


def energy_identity(s):
    sec = s["report"]["sections"]["energy-identity"]
    parts, ok = [], min(s["seconds"]) < 120
    for kind, oracle in (("boundary_disk", 2 * math.pi), ("interior_sphere", 4 * math.pi)):
        fin = sec[kind]["levels"][-1]
        rr = fin["ledger"]["relative_residual"]
        eb = fin["ledger"]["bubble_energies"][0] / oracle
        ok &= fin["lambda"] == 2.0**-8 and rr <= 0.02 and abs(eb - 1) <= 0.02
        parts.append(f"{kind} residual {rr:.2%} bubble/oracle {eb:.4f}")
    return ok, "; ".join(parts)


def no_neck(s):
    sec = s["report"]["sections"]["energy-identity"]
    parts, ok = [], True
    for kind in ("boundary_disk", "interior_sphere"):
        lv = sec[kind]["levels"]
        osc = [x["neck"]["oscillation"] for x in lv]
        mid = lv[-1]["middle_fraction"]
        ok &= all(b < a for a, b in zip(osc, osc[1:])) and mid <= 0.05
        parts.append(f"{kind} osc {[round(o, 3) for o in osc]} middle {mid:.2%}")
    return ok, "; ".join(parts)


def gap(s):
    g = s["report"]["sections"]["gap-test"]
    e = g["energy"]["rows"][-1]
    ok = abs(g["E0"] - 0.1) <= 1e-9 and e[0] <= 5.0 + g["dt"] and g["E_final"] <= 1e-6 * g["E0"]
    return ok, f"E0 {g['E0']:.6g}, E({e[0]:.3g}) = {g['E_final']:.3e}"


def concentration_mass(s):
    sec = s["report"]["sections"]["energy-identity"]
    ratios = {k: sec[k]["mass"] / o for k, o in (("boundary_disk", 2 * math.pi), ("interior_sphere", 4 * math.pi))}
    return all(abs(r - 1) <= 0.05 for r in ratios.values()), "; ".join(f"{k} m/oracle {r:.4f}"
                                                                      for k, r in ratios.items())


def determinism(s):
    a, b = s["bytes"]
    return a == b and s["code"] == 0, f"{len(a)} bytes, identical: {a == b}"


CRITERIA = [
    ("energy monotonicity", energy_monotone),
    ("kinetic bound", kinetic_bound),
    ("tangency of tension", tangency),
    ("Pohozaev consistency", pohozaev),
    ("annulus Pohozaev", annulus),
    ("reflection calculus", reflection),
    ("energy identity", energy_identity),
    ("no-neck diagnostic", no_neck),
    ("gap behaviour", gap),
    ("concentration mass", concentration_mass),
    ("determinism", determinism),
]


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    return run_suite(tmp_path_factory.mktemp("acceptance"))


def evaluate(k: int, s: dict) -> tuple[bool, str]:
    title, fn = CRITERIA[k]
    ok, detail = fn(s)
    line = f"{'PASS' if ok else 'FAIL'}  {k + 1:2d}. {title}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok, line


@pytest.mark.slow
@pytest.mark.parametrize("k", range(len(CRITERIA)), ids=[t.replace(" ", "_") for t, _ in CRITERIA])
def test_criterion(suite, k):
    ok, line = evaluate(k, suite)
    assert ok, line


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        s = run_suite(Path(d))
    sys.exit(0 if all([evaluate(k, s)[0] for k in range(len(CRITERIA))]) else 1)
