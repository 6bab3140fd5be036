"""MATPOWER case parsing/emission and the per-sample record format.

Sample records are JSON documents whose groups and keys follow the
component-level graph layout (``bus``, ``gen``, ``load`` and the
``(src, relation, dst)`` edge groups).  Everything stored is per unit,
angles in radians except the branch phase shift column, which is degrees.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .grid_model import (
    Branch,
    Bus,
    BusKind,
    Generator,
    Load,
    Network,
    NetworkError,
)

BUILTIN_CASES = ("case14", "case30", "case57", "case118")


class CaseFormatError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno else message)


class RecordError(ValueError):
    """Schema violation in a sample record; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


# --------------------------------------------------------------------------
# MATPOWER

_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 4}
_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # MATPOWER comments start with '%'; quoted strings never contain it in case data
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _scan_tables(text: str) -> tuple[dict, dict]:
    """Return ``{name: [(lineno, row), ...]}`` for matrices and scalar assignments."""
    tables: dict[str, list] = {}
    scalars: dict[str, tuple[int, str]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = _strip_comment(lines[i])
        m = _ASSIGN.match(line)
        if not m:
            i += 1
            continue
        name, rhs = m.group(1), m.group(2).strip()
        start = i + 1
        if not rhs.startswith("["):
            scalars[name] = (start, rhs.rstrip(";").strip())
            i += 1
            continue
        rows: list[tuple[int, list[float]]] = []
        body = rhs[1:]
        lineno = start
        while True:
            closed = "]" in body
            chunk = body.split("]")[0] if closed else body
            for piece in chunk.split(";"):
                toks = piece.replace(",", " ").split()
                if toks:
                    try:
                        rows.append((lineno, [float(t) for t in toks]))
                    except ValueError:
                        raise CaseFormatError(f"non-numeric entry in mpc.{name}", lineno) from None
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise CaseFormatError(f"unterminated matrix mpc.{name}", start)
            body = _strip_comment(lines[i])
            lineno = i + 1
        tables[name] = rows
        i += 1
    return tables, scalars


def parse_matpower(text: str, name: str = "") -> Network:
    """Parse a MATPOWER version-2 case into a per-unit :class:`Network`."""
    tables, scalars = _scan_tables(text)
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing mpc.baseMVA")
    base_line, base_txt = scalars["baseMVA"]
    try:
        base = float(base_txt)
    except ValueError:
        raise CaseFormatError("mpc.baseMVA is not numeric", base_line) from None
    for tab in ("bus", "gen", "branch"):
        if tab not in tables:
            raise CaseFormatError(f"missing table mpc.{tab}")
    for tab, rows in tables.items():
        need = _MIN_COLS.get(tab)
        if need is None:
            continue
        for lineno, row in rows:
            if len(row) < need:
                raise CaseFormatError(
                    f"mpc.{tab} row has {len(row)} columns, expected at least {need}", lineno)

    bus_rows = tables["bus"]
    bus_ids = [int(r[0]) for _, r in bus_rows]
    index = {}
    for (lineno, _), bid in zip(bus_rows, bus_ids):
        if bid in index:
            raise CaseFormatError(f"duplicate bus id {bid}", lineno)
        index[bid] = len(index)

    def lookup(bid: float, lineno: int, what: str) -> int:
        try:
            return index[int(bid)]
        except KeyError:
            raise CaseFormatError(f"{what} references unknown bus {int(bid)}", lineno) from None

    kinds = []
    for lineno, r in bus_rows:
        code = int(r[1])
        if code not in (1, 2, 3):
            raise CaseFormatError(f"unsupported bus type {code} for bus {int(r[0])}", lineno)
        kinds.append(BusKind(code))
    slack_ids = [bid for bid, k in zip(bus_ids, kinds) if k == BusKind.SLACK]
    if len(slack_ids) != 1:
        what = "no slack bus" if not slack_ids else f"multiple slack buses: {slack_ids}"
        raise CaseFormatError(what, bus_rows[0][0])

    loads = []
    for lineno, r in bus_rows:
        if r[2] != 0 or r[3] != 0:
            loads.append(Load(bus=index[int(r[0])], pd=r[2] / base, qd=r[3] / base))

    costs = {}
    for k, (lineno, r) in enumerate(tables.get("gencost", [])):
        model, ncost = int(r[0]), int(r[3])
        coeffs = r[4:4 + ncost]
        if model != 2 or len(coeffs) != ncost:
            costs[k] = (0.0, 0.0)
            continue
        padded = [0.0] * max(0, 3 - ncost) + list(coeffs[-3:])
        # per-unit power: cost = a*(P*base)^2 + b*(P*base)
        costs[k] = (padded[0] * base ** 2, padded[1] * base)

    gens = []
    for k, (lineno, r) in enumerate(tables["gen"]):
        a, b = costs.get(k, (0.0, 0.0))
        gens.append(Generator(
            bus=lookup(r[0], lineno, "generator"),
            pg=r[1] / base, qg=r[2] / base,
            qmax=r[3] / base, qmin=r[4] / base, vset=r[5],
            in_service=r[7] > 0,
            pmax=r[8] / base, pmin=r[9] / base,
            cost_a=a, cost_b=b,
        ))

    branches = []
    for lineno, r in tables["branch"]:
        f = lookup(r[0], lineno, "branch")
        t = lookup(r[1], lineno, "branch")
        if r[2] == 0 and r[3] == 0:
            raise CaseFormatError("branch with zero series impedance", lineno)
        angmin, angmax = -2 * math.pi, 2 * math.pi
        if len(r) > 12 and (r[11] != 0 or r[12] != 0):  # 0/0 means unconstrained
            angmin, angmax = math.radians(r[11]), math.radians(r[12])
        branches.append(Branch(
            from_bus=f, to_bus=t, r=r[2], x=r[3], b_charging=r[4],
            rate=r[5] / base, tap=r[8] if r[8] != 0 else 1.0,
            shift=math.radians(r[9]), in_service=r[10] > 0,
            angmin=angmin, angmax=angmax,
        ))

    # a PV bus without a live generator cannot hold its voltage
    live_gen_bus = {g.bus for g in gens if g.in_service}
    buses = []
    for i, (lineno, r) in enumerate(bus_rows):
        kind = kinds[i]
        if kind == BusKind.PV and i not in live_gen_bus:
            kind = BusKind.PQ
        buses.append(Bus(id=i, kind=kind, gs=r[4] / base, bs=r[5] / base, vmax=r[11], vmin=r[12]))
    try:
        return Network(base_mva=base, buses=buses, generators=gens, loads=loads,
                       branches=branches, bus_ids=bus_ids, name=name)
    except NetworkError as exc:
        raise CaseFormatError(str(exc)) from exc


def _g(v: float) -> str:
    return format(v, ".15g")


def emit_matpower(net: Network) -> str:
    """Render a network back to MATPOWER text (loads are folded into bus rows)."""
    base = net.base_mva
    pd, qd = net.bus_demand()
    vset = net.voltage_setpoints()
    out = [f"function mpc = {net.name or 'case'}", "mpc.version = '2';",
           f"mpc.baseMVA = {_g(base)};", "", "mpc.bus = ["]
    for i, b in enumerate(net.buses):
        vm = vset[i] if not np.isnan(vset[i]) else 1.0
        row = [net.bus_ids[i], int(b.kind), pd[i] * base, qd[i] * base, b.gs * base, b.bs * base,
               1, vm, 0, 0, 1, b.vmax, b.vmin]
        out.append("\t" + "\t".join(_g(v) for v in row) + ";")
    out += ["];", "", "mpc.gen = ["]
    for g in net.generators:
        row = [net.bus_ids[g.bus], g.pg * base, g.qg * base, g.qmax * base, g.qmin * base,
               g.vset, base, int(g.in_service), g.pmax * base, g.pmin * base]
        out.append("\t" + "\t".join(_g(v) for v in row) + ";")
    out += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        row = [net.bus_ids[br.from_bus], net.bus_ids[br.to_bus], br.r, br.x, br.b_charging,
               br.rate * base, 0, 0, br.tap, math.degrees(br.shift), int(br.in_service),
               math.degrees(br.angmin), math.degrees(br.angmax)]
        out.append("\t" + "\t".join(_g(v) for v in row) + ";")
    out += ["];", "", "mpc.gencost = ["]
    for g in net.generators:
        row = [2, 0, 0, 3, g.cost_a / base ** 2, g.cost_b / base, 0]
        out.append("\t" + "\t".join(_g(v) for v in row) + ";")
    out += ["];", ""]
    return "\n".join(out)


def load_case(spec: str | Path) -> Network:
    """Load a case from a file path or a bundled name such as ``case14``."""
    path = Path(spec)
    if path.exists():
        return parse_matpower(path.read_text(), name=path.stem)
    name = str(spec)
    if name in BUILTIN_CASES:
        text = resources.files("gridscen.cases").joinpath(f"{name}.m").read_text()
        return parse_matpower(text, name=name)
    raise FileNotFoundError(f"no case file or bundled case named {spec!r}")


# --------------------------------------------------------------------------
# sample records

BRANCH = "(bus, branch, bus)"
GEN_TO_BUS = "(gen, gen_link, bus)"
BUS_TO_GEN = "(bus, gen_link, gen)"
LOAD_TO_BUS = "(load, load_link, bus)"
BUS_TO_LOAD = "(bus, load_link, load)"

# group -> key -> (shape template, dtype); symbols: B buses, G gens, L loads, E branches
SCHEMA: dict[str, dict[str, tuple[tuple, str]]] = {
    "bus": {
        "x": (("B", 2), "f"),
        "y": (("B", 2), "f"),
        "bus_gen": (("B", 2), "f"),
        "bus_demand": (("B", 2), "f"),
        "bus_voltages": (("B", 2), "f"),
        "bus_type": (("B",), "i"),
        "shunt": (("B", 2), "f"),
        "limits": (("B", 2), "f"),
    },
    "gen": {
        "limits": (("G", 4), "f"),
        "generation": (("G", 2), "f"),
        "slack_gen": (("G",), "b"),
    },
    "load": {"demand": (("L", 2), "f")},
    BRANCH: {
        "edge_index": ((2, "E"), "i"),
        "edge_attr": (("E", 8), "f"),
        "edge_label": (("E", 4), "f"),
        "edge_limits": (("E", 1), "f"),
    },
    GEN_TO_BUS: {"edge_index": ((2, "G"), "i")},
    BUS_TO_GEN: {"edge_index": ((2, "G"), "i")},
    LOAD_TO_BUS: {"edge_index": ((2, "L"), "i")},
    BUS_TO_LOAD: {"edge_index": ((2, "L"), "i")},
}
META_KEYS = ("case", "base_mva", "bus_ids", "gen_ids", "branch_ids")
TOP_LEVEL = ("provenance", "meta", *SCHEMA)


@dataclass
class SampleRecord:
    provenance: dict
    meta: dict
    data: dict[str, dict[str, np.ndarray]] = field(repr=False)

    def __getitem__(self, dotted: str) -> np.ndarray:
        """``record["bus.x"]`` or ``record["(bus, branch, bus).edge_attr"]``."""
        group, key = dotted.rsplit(".", 1)
        return self.data[group][key]

    @property
    def n_bus(self) -> int:
        return len(self.data["bus"]["bus_type"])

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{g}.{k}": tuple(v.shape) for g, keys in self.data.items() for k, v in keys.items()}

    def to_json(self) -> str:
        doc = {"provenance": self.provenance, "meta": self.meta}
        for group, keys in SCHEMA.items():
            doc[group] = {k: self.data[group][k].tolist() for k in keys}
        return json.dumps(doc, separators=(",", ":"), allow_nan=False)

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        if self.provenance != other.provenance or self.meta != other.meta:
            return False
        return all(
            np.array_equal(self.data[g][k], other.data[g][k]) and
            self.data[g][k].dtype == other.data[g][k].dtype
            for g, keys in SCHEMA.items() for k in keys)


def write_sample(net: Network, solution, provenance: dict) -> SampleRecord:
    """Build a record from a solved operating point.

    ``solution`` is a :class:`gridscen.balance.Solution` (voltages, completed
    injections, generator outputs and branch flows).
    """
    required = ("vm", "va", "p_net", "q_net", "pg", "qg", "flows")
    for name in required:
        val = getattr(solution, name, None)
        if val is None:
            raise RecordError("solution is missing a derived quantity", name)
        if not np.all(np.isfinite(val)):
            raise RecordError("solution holds non-finite values", name)

    n = net.n_bus
    kinds = net.kinds
    vm, va = np.asarray(solution.vm), np.asarray(solution.va)
    p_net, q_net = np.asarray(solution.p_net), np.asarray(solution.q_net)
    pd, qd = net.bus_demand()
    gens = net.live_generators
    pg_g = np.asarray(solution.pg)
    qg_g = np.asarray(solution.qg)
    if pg_g.shape != (len(gens),) or np.asarray(solution.flows).shape != (len(net.live_branches), 4):
        raise RecordError("solution does not match the live components of the network", "solution")
    gen_bus = np.array([net.generators[k].bus for k in gens], dtype=np.int64)
    pg_bus = np.bincount(gen_bus, weights=pg_g, minlength=n) if len(gens) else np.zeros(n)
    qg_bus = np.bincount(gen_bus, weights=qg_g, minlength=n) if len(gens) else np.zeros(n)

    x = np.zeros((n, 2))
    y = np.zeros((n, 2))
    pq = kinds == BusKind.PQ
    pv = kinds == BusKind.PV
    sl = kinds == BusKind.SLACK
    x[pq] = np.column_stack([pd - pg_bus, qd - qg_bus])[pq]
    y[pq] = np.column_stack([va, vm])[pq]
    x[pv] = np.column_stack([p_net, vm])[pv]
    y[pv] = np.column_stack([q_net, va])[pv]
    x[sl] = np.column_stack([va, vm])[sl]
    y[sl] = np.column_stack([p_net, q_net])[sl]

    gs, bs = net.shunts()
    br = net.branch_arrays()
    gobjs = [net.generators[k] for k in gens]
    data = {
        "bus": {
            "x": x, "y": y,
            "bus_gen": np.column_stack([pg_bus, qg_bus]),
            "bus_demand": np.column_stack([pd, qd]),
            "bus_voltages": np.column_stack([va, vm]),
            "bus_type": kinds.astype(np.int64),
            "shunt": np.column_stack([gs, bs]),
            "limits": np.array([[b.vmin, b.vmax] for b in net.buses], dtype=float).reshape(n, 2),
        },
        "gen": {
            "limits": np.array([[g.pmin, g.pmax, g.qmin, g.qmax] for g in gobjs], dtype=float).reshape(-1, 4),
            "generation": np.column_stack([pg_g, qg_g]).reshape(-1, 2),
            "slack_gen": np.array([g.bus == net.slack for g in gobjs], dtype=bool),
        },
        "load": {"demand": np.array([[ld.pd, ld.qd] for ld in net.loads], dtype=float).reshape(-1, 2)},
        BRANCH: {
            "edge_index": np.vstack([br.f, br.t]).astype(np.int64).reshape(2, -1),
            "edge_attr": np.column_stack([br.r, br.x, br.g_fr, br.b_fr, br.g_to, br.b_to,
                                          br.tap, np.degrees(br.shift)]).reshape(-1, 8),
            "edge_label": np.asarray(solution.flows, dtype=float).reshape(-1, 4),
            "edge_limits": np.array([net.branches[k].rate for k in br.index], dtype=float).reshape(-1, 1),
        },
    }
    gidx = np.arange(len(gens), dtype=np.int64)
    lidx = np.arange(len(net.loads), dtype=np.int64)
    lbus = np.array([ld.bus for ld in net.loads], dtype=np.int64)
    data[GEN_TO_BUS] = {"edge_index": np.vstack([gidx, gen_bus]).reshape(2, -1)}
    data[BUS_TO_GEN] = {"edge_index": np.vstack([gen_bus, gidx]).reshape(2, -1)}
    data[LOAD_TO_BUS] = {"edge_index": np.vstack([lidx, lbus]).reshape(2, -1)}
    data[BUS_TO_LOAD] = {"edge_index": np.vstack([lbus, lidx]).reshape(2, -1)}
    meta = {
        "case": net.name,
        "base_mva": float(net.base_mva),
        "bus_ids": [int(b) for b in net.bus_ids],
        "gen_ids": [int(k) for k in gens],
        "branch_ids": [int(k) for k in br.index],
    }
    record = SampleRecord(provenance=dict(provenance), meta=meta, data=data)
    validate_record(record)
    return record


_DTYPES = {"f": np.float64, "i": np.int64, "b": np.bool_}


def _coerce(group: str, key: str, value, dtype: str) -> np.ndarray:
    name = f"{group}.{key}"
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise RecordError("not a rectangular numeric array", name) from None
    if not np.all(np.isfinite(arr)):
        raise RecordError("non-finite value", name)
    if dtype in "ib":
        if not np.all(arr == np.round(arr)):
            raise RecordError("expected integer entries", name)
    return arr.astype(_DTYPES[dtype])


def validate_record(record: SampleRecord) -> None:
    data = record.data
    for group, keys in SCHEMA.items():
        if group not in data:
            raise RecordError("missing group", group)
        for key in keys:
            if key not in data[group]:
                raise RecordError("missing key", f"{group}.{key}")
        for key in data[group]:
            if key not in keys:
                raise RecordError("unknown key", f"{group}.{key}")
    dims = {
        "B": len(data["bus"]["bus_type"]),
        "G": len(data["gen"]["slack_gen"]),
        "L": len(data["load"]["demand"]),
        "E": data[BRANCH]["edge_index"].shape[-1] if data[BRANCH]["edge_index"].ndim == 2 else -1,
    }
    for group, keys in SCHEMA.items():
        for key, (template, _) in keys.items():
            want = tuple(dims[s] if isinstance(s, str) else s for s in template)
            got = data[group][key].shape
            if got != want:
                raise RecordError(f"shape {list(got)} does not match expected {list(want)}", f"{group}.{key}")
    bt = data["bus"]["bus_type"]
    if not np.all(np.isin(bt, (1, 2, 3))):
        raise RecordError("bus_type outside {1, 2, 3}", "bus.bus_type")
    if int(np.sum(bt == 3)) != 1:
        raise RecordError("exactly one slack bus (type 3) required", "bus.bus_type")
    nb = dims["B"]
    for group, other in ((BRANCH, None), (GEN_TO_BUS, "G"), (BUS_TO_GEN, "G"),
                         (LOAD_TO_BUS, "L"), (BUS_TO_LOAD, "L")):
        ei = data[group]["edge_index"]
        if ei.size == 0:
            continue
        bus_row = {BRANCH: (0, 1), GEN_TO_BUS: (1,), BUS_TO_GEN: (0,),
                   LOAD_TO_BUS: (1,), BUS_TO_LOAD: (0,)}[group]
        for r in (0, 1):
            limit = nb if r in bus_row else dims[other]
            if ei[r].min() < 0 or ei[r].max() >= limit:
                raise RecordError("index out of range", f"{group}.edge_index")
    for key in META_KEYS:
        if key not in record.meta:
            raise RecordError("missing key", f"meta.{key}")


def read_sample(raw: bytes | str) -> SampleRecord:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise RecordError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise RecordError("record must be a JSON object")
    for key in doc:
        if key not in TOP_LEVEL:
            raise RecordError("unknown key", key)
    data = {}
    for group, keys in SCHEMA.items():
        block = doc.get(group)
        if not isinstance(block, dict):
            raise RecordError("missing group", group)
        for key in block:
            if key not in keys:
                raise RecordError("unknown key", f"{group}.{key}")
        data[group] = {}
        for key, (_, dtype) in keys.items():
            if key not in block:
                raise RecordError("missing key", f"{group}.{key}")
            data[group][key] = _coerce(group, key, block[key], dtype)
    record = SampleRecord(provenance=doc.get("provenance", {}), meta=doc.get("meta", {}), data=data)
    validate_record(record)
    return record


def save_sample(record: SampleRecord, path: str | Path) -> None:
    Path(path).write_text(record.to_json())


def load_sample(path: str | Path) -> SampleRecord:
    return read_sample(Path(path).read_bytes())


# --------------------------------------------------------------------------
# manifests

REGIMES = ("feasible", "approaching-infeasible", "close-to-infeasible")
TOPOLOGIES = ("N", "N-1", "N-2")
SPLITS = ("train", "test")


@dataclass
class ManifestCell:
    bus_size: int
    regime: str
    topology: str
    split: str
    count: int
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.regime not in REGIMES or self.topology not in TOPOLOGIES or self.split not in SPLITS:
            raise ValueError(f"unlabeled manifest cell {self.regime}/{self.topology}/{self.split}")
        if self.count < 0:
            raise ValueError("manifest counts must be nonnegative")


@dataclass
class DatasetManifest:
    task: str
    scale: float
    cells: list[ManifestCell]
    shortfall: list[dict] = field(default_factory=list)

    def counts(self) -> dict[tuple, int]:
        return {(c.bus_size, c.regime, c.topology, c.split): c.count for c in self.cells}

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "scale": self.scale,
            "cells": [c.__dict__ for c in self.cells],
            "shortfall": self.shortfall,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(task=doc["task"], scale=doc["scale"],
                   cells=[ManifestCell(**c) for c in doc["cells"]],
                   shortfall=doc.get("shortfall", []))
