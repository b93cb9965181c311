"""Snapshot files and JSON reports.

A snapshot starts with one text line

    fbflow-field v1, radius=<r>, h=<h>, m=<m>, pair=<name>, t=<t>, step=<k>, cx=<cx>, full=<0|1>

followed by one record per domain node in row-major order: ``x1,x2,class,u1..um``
as CSV (17 significant digits, class one of I/F/A), or as little-endian
float64 with the class stored as its integer code.  Loading re-checks every
record against the lattice and the target and never repairs data.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptRow, IoError, OffManifold, VersionMismatch
from .geometry import get_pair
from .grid import KIND_LETTERS, LETTER_KINDS, Field, HalfDiskGrid

MAGIC = "fbflow-field"
VERSION = "v1"
REPORT_SCHEMA = "fbflow-report-v1"


@dataclass(frozen=True)
class SnapshotHeader:
    version: str
    radius: float
    h: float
    m: int
    pair: str
    t: float = 0.0
    step: int = 0
    cx: float = 0.0
    full: bool = False

    def line(self) -> str:
        return (f"{MAGIC} {self.version}, radius={self.radius!r}, h={self.h!r}, m={self.m}, pair={self.pair}, "
                f"t={self.t!r}, step={self.step}, cx={self.cx!r}, full={int(self.full)}")

    @classmethod
    def parse(cls, line: str) -> "SnapshotHeader":
        line = line.strip()
        head, _, rest = line.partition(",")
        parts = head.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise IoError(f"not a snapshot file (header {head!r})")
        if parts[1] != VERSION:
            raise VersionMismatch(f"snapshot version {parts[1]!r}, expected {VERSION!r}")
        kv = {}
        for item in rest.split(","):
            if not item.strip():
                continue
            k, sep, v = item.partition("=")
            if not sep:
                raise IoError(f"malformed header entry {item.strip()!r}")
            kv[k.strip()] = v.strip()
        try:
            return cls(VERSION, float(kv["radius"]), float(kv["h"]), int(kv["m"]), kv["pair"],
                       float(kv.get("t", 0.0)), int(kv.get("step", 0)), float(kv.get("cx", 0.0)),
                       bool(int(kv.get("full", 0))))
        except (KeyError, ValueError) as exc:
            raise IoError(f"malformed header: {exc}") from exc

    def grid(self) -> HalfDiskGrid:
        return HalfDiskGrid(self.radius, self.h, (self.cx, 0.0), full=self.full)


@dataclass(frozen=True)
class Snapshot:
    field: Field
    t: float = 0.0
    step: int = 0


def _records(f: Field) -> np.ndarray:
    g = f.grid
    j, i = np.nonzero(g.mask)
    cls = g.kind[j, i].astype(float)
    return np.column_stack([g.xs[i], g.ys[j], cls, f.values[j, i]])


def _is_binary(path: Path, binary: bool | None) -> bool:
    if binary is not None:
        return binary
    return path.suffix in (".bin", ".f64")


def write_snapshot(f: Field, path, t: float = 0.0, step: int = 0, binary: bool | None = None) -> Path:
    """Write ``f``; the binary variant is chosen by ``binary`` or a ``.bin`` suffix."""
    path = Path(path)
    g = f.grid
    if g.center[1] != 0.0:
        raise IoError("snapshots store lattices centred on the flat boundary line")
    hdr = SnapshotHeader(VERSION, g.radius, g.h, f.m, f.pair.name, float(t), int(step), g.center[0], g.full)
    rec = _records(f)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if _is_binary(path, binary):
            with open(path, "wb") as fh:
                fh.write((hdr.line() + "\n").encode("ascii"))
                fh.write(rec.astype("<f8").tobytes())
        else:
            with open(path, "w", newline="\n") as fh:
                fh.write(hdr.line() + "\n")
                for row in rec:
                    nums = [f"{v:.17g}" for v in row]
                    nums[2] = KIND_LETTERS[int(row[2])]
                    fh.write(",".join(nums) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _parse_csv(lines, ncol: int, nrow: int) -> np.ndarray:
    out = np.empty((nrow, ncol))
    k = -1
    for k, line in enumerate(lines):
        if k >= nrow:
            if line.strip():
                raise CorruptRow(k, "more records than domain nodes")
            continue
        parts = line.rstrip("\n").split(",")
        if len(parts) != ncol:
            raise CorruptRow(k, f"expected {ncol} fields, found {len(parts)}")
        if parts[2] not in LETTER_KINDS:
            raise CorruptRow(k, f"unknown node class {parts[2]!r}")
        try:
            out[k] = [float(p) if c != 2 else LETTER_KINDS[p] for c, p in enumerate(parts)]
        except ValueError as exc:
            raise CorruptRow(k, str(exc)) from exc
    if k + 1 < nrow:
        raise CorruptRow(k + 1, "file ends before every domain node is listed")
    return out


def read_snapshot(path, pair_params: dict | None = None, tol: float = 1e-9) -> Snapshot:
    """Load and validate a snapshot; raises instead of repairing anything."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise IoError(f"{path}: missing header line")
    try:
        hdr = SnapshotHeader.parse(raw[:nl].decode("ascii"))
    except UnicodeDecodeError as exc:
        raise IoError(f"{path}: unreadable header") from exc
    grid = hdr.grid()
    j, i = np.nonzero(grid.mask)
    nrow, ncol = j.size, 3 + hdr.m
    body = raw[nl + 1:]
    if _looks_binary(body):
        if len(body) % (8 * ncol):
            raise CorruptRow(len(body) // (8 * ncol), "truncated binary record")
        rec = np.frombuffer(body, dtype="<f8").reshape(-1, ncol)
        if rec.shape[0] != nrow:
            raise CorruptRow(min(rec.shape[0], nrow), f"{rec.shape[0]} records for {nrow} domain nodes")
    else:
        rec = _parse_csv(body.decode("ascii").splitlines(), ncol, nrow)
    for k in range(nrow):
        x, y, c = rec[k, 0], rec[k, 1], rec[k, 2]
        if (abs(x - grid.xs[i[k]]) > 1e-9 * max(1.0, abs(x)) or abs(y - grid.ys[j[k]]) > 1e-9 * max(1.0, abs(y))
                or c != grid.kind[j[k], i[k]]):
            raise CorruptRow(k, "record does not match the lattice node")
    if not np.all(np.isfinite(rec[:, 3:])):
        raise CorruptRow(int(np.argmin(np.all(np.isfinite(rec[:, 3:]), axis=1))), "non-finite value")
    vals = np.zeros(grid.shape + (hdr.m,))
    vals[j, i] = rec[:, 3:]
    pair = get_pair(hdr.pair, **(pair_params or {}))
    if pair.target.ambient_dim != hdr.m:
        raise IoError(f"pair {hdr.pair!r} lives in R^{pair.target.ambient_dim}, file has m={hdr.m}")
    f = Field(grid, vals, pair, check=False)
    d, k = f.manifold_defect()
    if not d <= tol:
        raise OffManifold(k, d, "N")
    d, k = f.boundary_defect()
    if not d <= tol:
        raise OffManifold(k, d, "K")
    return Snapshot(f, hdr.t, hdr.step)


def _looks_binary(body: bytes) -> bool:
    head = body[:256]
    try:
        text = head.decode("ascii")
    except UnicodeDecodeError:
        return True
    return not all(ch.isprintable() or ch in "\n\r\t" for ch in text)


# ---- reports ------------------------------------------------------------------


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def report_text(payload: dict) -> str:
    doc = {"schema": REPORT_SCHEMA, **_clean(payload)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_report(payload: dict, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(report_text(payload))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    if doc.get("schema") != REPORT_SCHEMA:
        raise VersionMismatch(f"report schema {doc.get('schema')!r}, expected {REPORT_SCHEMA!r}")
    return doc


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path
