"""Scenario perturbation, solve-and-accept labeling and the feasibility checker."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .balance import PFState
from .case_io import BRANCH, SampleRecord, write_sample
from .grid_model import BusKind, Load, Network, is_connected
from .pf_newton import SolveOptions, solve

LOSS_MARGIN = 0.03
VSET_BAND = (0.95, 1.1)
BOX_RANGE = (0.8, 1.2)
POLYTOPE_LOAD_CAP = 2.0
POLYTOPE_TOTAL_CAP = 1.3
POWER_FACTOR_RANGE = (0.85, 1.0)
MAX_REDRAWS = 200


class ScenarioRejected(Exception):
    """A perturbed scenario that cannot be labeled; carries a short reason."""


# --------------------------------------------------------------------------
# load sampling

def hit_and_run(lower, upper, total_cap, x0, rng, n_steps) -> np.ndarray:
    """Random walk inside ``{lower <= x <= upper, sum(x) <= total_cap}``.

    Coordinates with ``lower == upper`` stay fixed.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.array(x0, dtype=float)
    if np.any(lower > upper) or lower.sum() > total_cap:
        raise ValueError("empty load polytope")
    free = np.flatnonzero(upper > lower)
    if free.size == 0:
        return x
    lo, hi = lower[free], upper[free]
    cap = total_cap - x.sum() + x[free].sum()  # budget for the free coordinates
    xf = x[free]
    for _ in range(n_steps):
        u = rng.standard_normal(free.size)
        u /= np.linalg.norm(u)
        with np.errstate(divide="ignore"):
            a = (lo - xf) / u
            b = (hi - xf) / u
        t_lo = np.max(np.where(u > 0, a, np.where(u < 0, b, -np.inf)))
        t_hi = np.min(np.where(u > 0, b, np.where(u < 0, a, np.inf)))
        s = u.sum()
        slack = cap - xf.sum()
        if s > 0:
            t_hi = min(t_hi, slack / s)
        elif s < 0:
            t_lo = max(t_lo, slack / s)
        if t_hi <= t_lo:
            continue
        xf = xf + rng.uniform(t_lo, t_hi) * u
    x[free] = np.clip(xf, lo, hi)
    return x


def sample_loads(net: Network, rng: np.random.Generator, method: str = "polytope",
                 n_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-load (pd, qd).

    ``box``: every pd uniform in 0.8-1.2 times base with the base power factor.
    ``polytope``: hit-and-run inside ``0 <= pd <= 2*base, sum(pd) <= 1.3*sum(base)``
    with a per-load power factor uniform in [0.85, 1].
    """
    pd0 = np.array([ld.pd for ld in net.loads], dtype=float)
    qd0 = np.array([ld.qd for ld in net.loads], dtype=float)
    if method == "box":
        f = rng.uniform(*BOX_RANGE, size=pd0.size)
        return pd0 * f, qd0 * f
    if method != "polytope":
        raise ValueError(f"unknown load sampling method {method!r}")
    positive = pd0 > 0
    lower = np.where(positive, 0.0, pd0)
    upper = np.where(positive, POLYTOPE_LOAD_CAP * pd0, pd0)
    cap = POLYTOPE_TOTAL_CAP * pd0[positive].sum() + pd0[~positive].sum()
    steps = n_steps if n_steps is not None else 10 * max(1, int(positive.sum()))
    pd = hit_and_run(lower, upper, cap, pd0, rng, steps)
    pf = rng.uniform(*POWER_FACTOR_RANGE, size=pd0.size)
    sign = np.where(qd0 < 0, -1.0, 1.0)
    qd = np.where(positive, sign * pd * np.tan(np.arccos(pf)), qd0)
    return pd, qd


def with_loads(net: Network, pd, qd) -> Network:
    loads = tuple(Load(bus=ld.bus, pd=float(p), qd=float(q)) for ld, p, q in zip(net.loads, pd, qd))
    return replace(net, loads=loads)


# --------------------------------------------------------------------------
# topology perturbation

class EventKind(str, enum.Enum):
    REMOVE_GENS = "RemoveGens"
    REMOVE_LINES = "RemoveLines"
    REMOVE_GEN_AND_LINE = "RemoveGenAndLine"
    NO_REMOVAL = "NoRemoval"


EVENT_KINDS = tuple(EventKind)


@dataclass(frozen=True)
class PerturbationEvent:
    kind: EventKind
    removed_generators: tuple[int, ...] = ()
    removed_branches: tuple[int, ...] = ()
    fallback: bool = False

    @property
    def topology(self) -> str:
        k = len(self.removed_generators) + len(self.removed_branches)
        return "N" if k == 0 else f"N-{k}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "removed_generators": list(self.removed_generators),
            "removed_branches": list(self.removed_branches),
            "fallback": self.fallback,
        }


def remove_components(net: Network, generators=(), branches=()) -> Network:
    """Take components out of service; PV buses left without a live generator become PQ."""
    gens = list(net.generators)
    for k in generators:
        if gens[k].bus == net.slack:
            raise ValueError("the slack generator is not removable")
        gens[k] = replace(gens[k], in_service=False)
    brs = list(net.branches)
    for k in branches:
        brs[k] = replace(brs[k], in_service=False)
    live_bus = {g.bus for g in gens if g.in_service}
    buses = tuple(
        replace(b, kind=BusKind.PQ) if b.kind == BusKind.PV and b.id not in live_bus else b
        for b in net.buses)
    return replace(net, buses=buses, generators=tuple(gens), branches=tuple(brs))


def perturb_topology(net: Network, rng: np.random.Generator) -> tuple[Network, PerturbationEvent]:
    """Apply one of four equally likely outage events.

    Draws that island a bus are redrawn within the same event kind, so the
    kind frequencies are unaffected by rejections.
    """
    kind = EVENT_KINDS[int(rng.integers(len(EVENT_KINDS)))]
    if kind == EventKind.NO_REMOVAL:
        return net, PerturbationEvent(kind)
    gen_pool = [int(k) for k in net.live_generators if net.generators[k].bus != net.slack]
    line_pool = [int(k) for k in net.live_branches]
    for _ in range(MAX_REDRAWS):
        if kind == EventKind.REMOVE_GENS:
            n_gen, n_line = int(rng.integers(1, 3)), 0
        elif kind == EventKind.REMOVE_LINES:
            n_gen, n_line = 0, int(rng.integers(1, 3))
        else:
            n_gen, n_line = 1, 1
        if n_gen > len(gen_pool) or n_line > len(line_pool):
            if n_gen > 1 and len(gen_pool) == 1 or n_line > 1 and len(line_pool) == 1:
                continue  # a count of 2 is impossible here; redraw the count
            break
        gens = tuple(sorted(int(k) for k in rng.choice(gen_pool, size=n_gen, replace=False))) if n_gen else ()
        lines = tuple(sorted(int(k) for k in rng.choice(line_pool, size=n_line, replace=False))) if n_line else ()
        out = remove_components(net, gens, lines)
        if is_connected(out):
            return out, PerturbationEvent(kind, gens, lines)
    return net, PerturbationEvent(kind, fallback=True)


# --------------------------------------------------------------------------
# setpoints

def diversify_setpoints(net: Network, rng: np.random.Generator) -> Network:
    """Random merit-order dispatch and random voltage setpoints.

    Cost coefficients are shuffled across the live generators and units are
    loaded in ascending (shuffled) cost order, from pmin up to pmax, until
    total demand plus a 3% loss margin is covered.
    """
    live = [int(k) for k in net.live_generators]
    if not live:
        raise ScenarioRejected("no live generators")
    gens = [net.generators[k] for k in live]
    pd, _ = net.bus_demand()
    target = float(pd.sum()) * (1 + LOSS_MARGIN)
    costs = np.array([g.cost_b for g in gens], dtype=float)[rng.permutation(len(gens))]
    order = np.lexsort((rng.random(len(gens)), costs))
    pmin = np.array([g.pmin for g in gens])
    pmax = np.array([g.pmax for g in gens])
    if pmax.sum() < target:
        raise ScenarioRejected("generation capacity below demand")
    pg = pmin.copy()
    remaining = target - pmin.sum()
    for k in order:
        if remaining <= 0:
            break
        add = min(pmax[k] - pmin[k], remaining)
        pg[k] += add
        remaining -= add

    vset_bus = {}
    for g in gens:
        if g.bus in vset_bus:
            continue
        b = net.buses[g.bus]
        lo, hi = max(b.vmin, VSET_BAND[0]), min(b.vmax, VSET_BAND[1])
        if lo > hi:
            lo = hi = float(np.clip((b.vmin + b.vmax) / 2, *VSET_BAND))
        vset_bus[g.bus] = float(rng.uniform(lo, hi))
    new = list(net.generators)
    for pos, k in enumerate(live):
        new[k] = replace(new[k], pg=float(pg[pos]), vset=vset_bus[new[k].bus])
    return replace(net, generators=tuple(new))


# --------------------------------------------------------------------------
# single-sample pipeline

@dataclass
class SampleResult:
    sample_id: str
    event: PerturbationEvent
    record: SampleRecord | None = None
    network: Network | None = None
    state: PFState | None = None
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.record is not None

    def rejection(self, seed: int, index: int) -> dict:
        return {"sample_id": self.sample_id, "seed": seed, "index": index,
                "event": self.event.to_dict(), "reason": self.reason}


def sample_id(case: str, seed: int, index: int) -> str:
    return f"{case}-s{seed}-{index:06d}"


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_sample(base_net: Network, seed: int, index: int = 0, load_method: str = "polytope",
                    tol: float = 1e-8, check_tol: float = 1e-6) -> SampleResult:
    """Perturb topology, loads and setpoints, then label with Newton power flow.

    Only converged scenarios that pass the feasibility checker produce a record.
    """
    rng = scenario_rng(seed, index)
    sid = sample_id(base_net.name or "case", seed, index)
    net, event = perturb_topology(base_net, rng)
    pd, qd = sample_loads(net, rng, load_method)
    net = with_loads(net, pd, qd)
    result = SampleResult(sample_id=sid, event=event)
    try:
        net = diversify_setpoints(net, rng)
    except ScenarioRejected as exc:
        result.reason = str(exc)
        return result
    outcome = solve(net, SolveOptions(tol=tol))
    if not outcome.converged:
        result.reason = f"power flow did not converge: {outcome.reason}"
        return result
    provenance = {
        "sample_id": sid,
        "case": base_net.name,
        "seed": int(seed),
        "index": int(index),
        "event": event.to_dict(),
        "regime": "feasible",
        "topology": event.topology,
        "load_method": load_method,
    }
    record = write_sample(net, outcome.solution, provenance)
    report = check_constraints(net, record, check_tol)
    if not report.passed:
        result.reason = "constraint violation: " + ",".join(report.failed)
        return result
    result.record, result.network, result.state = record, net, outcome.state
    return result


# --------------------------------------------------------------------------
# feasibility checker

CONSTRAINTS = {
    "a": "active generation within [pmin, pmax] at non-slack generators (informational)",
    "b": "slack active generation nonnegative",
    "c": "voltage magnitude nonnegative at every bus",
    "d": "voltage magnitude within limits at PV and slack buses",
    "e": "voltage magnitude within limits at PQ buses (informational)",
    "f": "slack voltage angle equal to zero",
    "g": "branch angle difference within limits",
    "h": "active and reactive power balance at every bus",
    "i": "from-side branch flow consistent with bus voltages",
    "j": "to-side branch flow consistent with bus voltages",
}
ENFORCED = ("b", "c", "d", "f", "g", "h", "i", "j")


@dataclass
class ViolationReport:
    residuals: dict[str, np.ndarray]
    worst: dict[str, float]
    tol: float
    informational: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [t for t in ENFORCED if self.worst[t] > self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst_violation(self) -> float:
        return max(self.worst[t] for t in ENFORCED)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "worst": {t: self.worst[t] for t in CONSTRAINTS},
            "failed": self.failed,
            "informational": self.informational,
        }


def _pos(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def _worst(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.max()) if x.size else 0.0


def check_constraints(net: Network, record: SampleRecord, tol: float = 1e-6) -> ViolationReport:
    """Evaluate the limit-relaxed OPF constraint set on a stored record.

    Flows are recomputed from the stored voltages with the complex two-port
    formula and compared with the stored branch labels; nodal balance uses the
    stored generation, demand, shunts and branch labels.
    """
    bus = record.data["bus"]
    kinds = bus["bus_type"]
    va, vm = bus["bus_voltages"][:, 0], bus["bus_voltages"][:, 1]
    vmin, vmax = bus["limits"][:, 0], bus["limits"][:, 1]
    gen = record.data["gen"]
    pg, qg = gen["generation"][:, 0], gen["generation"][:, 1]
    pmin, pmax, qmin, qmax = gen["limits"].T
    slack_gen = gen["slack_gen"]
    edge = record.data[BRANCH]
    f, t = edge["edge_index"]
    r, x, g_fr, b_fr, g_to, b_to, tap, shift_deg = edge["edge_attr"].T
    label = edge["edge_label"]
    n = len(kinds)

    res: dict[str, np.ndarray] = {}
    res["a"] = _pos(np.maximum(pmin - pg, pg - pmax))[~slack_gen]
    res["b"] = _pos(-pg[slack_gen])
    res["c"] = _pos(-vm)
    gen_bus = kinds != BusKind.PQ
    res["d"] = _pos(np.maximum(vmin - vm, vm - vmax))[gen_bus]
    res["e"] = _pos(np.maximum(vmin - vm, vm - vmax))[~gen_bus]
    res["f"] = np.abs(va[kinds == BusKind.SLACK])

    ids = record.meta.get("branch_ids", list(range(len(f))))
    angmin = np.array([net.branches[k].angmin for k in ids], dtype=float).reshape(-1)
    angmax = np.array([net.branches[k].angmax for k in ids], dtype=float).reshape(-1)
    dth = va[f] - va[t]
    res["g"] = _pos(np.maximum(angmin - dth, dth - angmax))

    V = vm * np.exp(1j * va)
    Ys = 1.0 / (r + 1j * x)
    T = tap * np.exp(1j * np.radians(shift_deg))
    Sf = (np.conj(Ys) + g_fr - 1j * b_fr) * np.abs(V[f]) ** 2 / np.abs(T) ** 2 \
        - np.conj(Ys) * V[f] * np.conj(V[t]) / T
    St = (np.conj(Ys) + g_to - 1j * b_to) * np.abs(V[t]) ** 2 \
        - np.conj(Ys) * V[t] * np.conj(V[f]) / np.conj(T)
    res["i"] = np.hypot(Sf.real - label[:, 0], Sf.imag - label[:, 1])
    res["j"] = np.hypot(St.real - label[:, 2], St.imag - label[:, 3])

    gs, bs = bus["shunt"][:, 0], bus["shunt"][:, 1]
    pgb, qgb = bus["bus_gen"][:, 0], bus["bus_gen"][:, 1]
    pdb, qdb = bus["bus_demand"][:, 0], bus["bus_demand"][:, 1]
    p_flow = np.bincount(f, label[:, 0], n) + np.bincount(t, label[:, 2], n)
    q_flow = np.bincount(f, label[:, 1], n) + np.bincount(t, label[:, 3], n)
    dp = pgb - pdb - gs * vm ** 2 - p_flow
    dq = qgb - qdb + bs * vm ** 2 - q_flow
    res["h"] = np.hypot(dp, dq)

    gen_ids = record.meta.get("gen_ids", list(range(len(pg))))
    a = np.array([net.generators[k].cost_a for k in gen_ids], dtype=float).reshape(-1)
    b = np.array([net.generators[k].cost_b for k in gen_ids], dtype=float).reshape(-1)
    rate = edge["edge_limits"][:, 0]
    s_max = np.maximum(np.abs(Sf), np.abs(St))
    informational = {
        "objective": float(np.sum(a * pg ** 2 + b * pg)),
        "pg_limit_violation": _worst(res["a"]),
        "qg_limit_violation": _worst(_pos(np.maximum(qmin - qg, qg - qmax))),
        "pq_voltage_violation": _worst(res["e"]),
        "branch_rating_violation": _worst(_pos(np.where(rate > 0, s_max - rate, 0.0))),
    }
    worst = {tag: _worst(v) for tag, v in res.items()}
    return ViolationReport(residuals=res, worst=worst, tol=tol, informational=informational)
