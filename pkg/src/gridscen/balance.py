"""Power-balance residuals and the slack-redispatch evaluation chain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import Admittance, BranchArrays, BusKind, Network, build_admittance, complex_voltage, \
    flows_from_admittance


@dataclass(frozen=True)
class PFState:
    vm: np.ndarray
    va: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vm", np.asarray(self.vm, dtype=float))
        object.__setattr__(self, "va", np.asarray(self.va, dtype=float))
        if self.vm.shape != self.va.shape:
            raise ValueError("vm and va must have the same shape")

    @classmethod
    def flat(cls, net: Network) -> "PFState":
        """All angles 0; |v| = 1 except at buses with a voltage setpoint."""
        vm = np.ones(net.n_bus)
        vset = net.voltage_setpoints()
        reg = net.kinds != BusKind.PQ
        vm[reg] = np.where(np.isnan(vset[reg]), 1.0, vset[reg])
        return cls(vm=vm, va=np.zeros(net.n_bus))

    @property
    def V(self) -> np.ndarray:
        return complex_voltage(self.vm, self.va)


@dataclass(frozen=True)
class MismatchReport:
    dp: np.ndarray
    dq: np.ndarray
    ds: np.ndarray
    mean_ds: float
    max_ds: float

    @classmethod
    def from_components(cls, dp, dq) -> "MismatchReport":
        dp = np.asarray(dp, dtype=float)
        dq = np.asarray(dq, dtype=float)
        ds = np.hypot(dp, dq)
        if ds.size == 0:
            return cls(dp, dq, ds, 0.0, 0.0)
        return cls(dp, dq, ds, float(ds.mean()), float(ds.max()))


@dataclass(frozen=True)
class Solution:
    """A fully completed operating point (bus quantities, generators, flows)."""

    vm: np.ndarray
    va: np.ndarray
    p_net: np.ndarray
    q_net: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    flows: np.ndarray


def calculated_injection(Y, V) -> np.ndarray:
    """Complex power leaving each bus into the network, ``V * conj(Y V)``."""
    return V * np.conj(Y @ V)


def specified_injections(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Net injections known before solving, NaN where the quantity is a solver output.

    p_net is free at the slack bus; q_net is free at PV and slack buses.
    """
    pg, qg = net.bus_generation()
    pd, qd = net.bus_demand()
    p = pg - pd
    q = qg - qd
    kinds = net.kinds
    p[kinds == BusKind.SLACK] = np.nan
    q[kinds != BusKind.PQ] = np.nan
    return p, q


def mismatch(net: Network, adm: Admittance | None, state: PFState, p_net, q_net) -> MismatchReport:
    """Nodal active/reactive mismatches in admittance form.

    ``p_net``/``q_net`` may hold NaN where a quantity is a free output; the
    value implied by the voltages is used there, so the residual is zero.
    """
    n = net.n_bus
    p_net = np.asarray(p_net, dtype=float)
    q_net = np.asarray(q_net, dtype=float)
    if p_net.shape != (n,) or q_net.shape != (n,) or state.vm.shape != (n,):
        raise ValueError(f"expected vectors of length {n}")
    adm = adm or build_admittance(net)
    S = calculated_injection(adm.Y, state.V)
    dp = np.where(np.isnan(p_net), 0.0, p_net - S.real)
    dq = np.where(np.isnan(q_net), 0.0, q_net - S.imag)
    return MismatchReport.from_components(dp, dq)


# --------------------------------------------------------------------------
# branch-expanded form
#
# Each branch is described by y = |1/(r + jx)| and delta = arg(-1/(r + jx)),
# the magnitude and angle of the off-diagonal admittance entry.

def _polar_branch(br: BranchArrays) -> tuple[np.ndarray, np.ndarray]:
    ys = br.series_admittance()
    return np.abs(ys), np.angle(-ys)


def _branch_terms(br: BranchArrays, vm, va):
    """Per-branch active/reactive terms leaving the from and to buses."""
    y, delta = _polar_branch(br)
    tau, shift = br.tap, br.shift
    vi, vj = vm[br.f], vm[br.t]
    dth = va[br.f] - va[br.t]
    k = vi * vj * y / tau
    p_from = -k * np.cos(dth - delta - shift) + (vi / tau) ** 2 * (y * np.cos(delta) - br.g_fr)
    p_to = -k * np.cos(-dth - delta + shift) + vj ** 2 * (y * np.cos(delta) - br.g_to)
    q_from = -k * np.sin(dth - delta - shift) - (vi / tau) ** 2 * (y * np.sin(delta) - br.b_fr)
    q_to = -k * np.sin(-dth - delta + shift) - vj ** 2 * (y * np.sin(delta) - br.b_to)
    # the bracketed sums are minus the flows leaving each end
    return -p_from, -q_from, -p_to, -q_to


def mismatch_branch_form(net: Network, state: PFState, p_net, q_net) -> MismatchReport:
    """Same residual as :func:`mismatch`, expanded branch by branch in polar form."""
    br = net.branch_arrays()
    return mismatch_branch_arrays(net.n_bus, br, *net.shunts(), state, p_net, q_net)


def mismatch_branch_arrays(n, br: BranchArrays, gs, bs, state: PFState, p_net, q_net) -> MismatchReport:
    vm, va = state.vm, state.va
    pf, qf, pt, qt = _branch_terms(br, vm, va)
    p_out = gs * vm ** 2 + np.bincount(br.f, pf, n) + np.bincount(br.t, pt, n)
    q_out = -bs * vm ** 2 + np.bincount(br.f, qf, n) + np.bincount(br.t, qt, n)
    p_net = np.asarray(p_net, dtype=float)
    q_net = np.asarray(q_net, dtype=float)
    dp = np.where(np.isnan(p_net), 0.0, p_net - p_out)
    dq = np.where(np.isnan(q_net), 0.0, q_net - q_out)
    return MismatchReport.from_components(dp, dq)


def joule_losses(net: Network, state: PFState) -> float:
    """Total series active loss, summed as absolute per-branch losses."""
    br = net.branch_arrays()
    if len(br) == 0:
        return 0.0
    pf, _, pt, _ = _branch_terms(br, state.vm, state.va)
    # charging conductance is not a series loss
    pf = pf - (state.vm[br.f] / br.tap) ** 2 * br.g_fr
    pt = pt - state.vm[br.t] ** 2 * br.g_to
    return float(np.sum(np.abs(pf + pt)))


def global_demand(net: Network, state: PFState) -> float:
    pd, _ = net.bus_demand()
    gs, _ = net.shunts()
    return float(np.sum(pd) + np.sum(gs * state.vm ** 2) + joule_losses(net, state))


@dataclass(frozen=True)
class SlackDispatch:
    p_slack: float
    lam: float
    above_setpoints: bool


def slack_redispatch(net: Network, p_global: float) -> SlackDispatch:
    """Assign the whole balance to the slack generator.

    The slack output is the exact balance ``p_global - sum(non-slack setpoints)``.
    ``lam`` is the piecewise loading coefficient of the slack generator, kept as a
    diagnostic; its branch flips where ``p_global`` reaches the sum of all setpoints.
    """
    live = [net.generators[k] for k in net.live_generators]
    slack = [g for g in live if g.bus == net.slack]
    if len(slack) != 1:
        raise ValueError(f"expected exactly one slack generator, found {len(slack)}")
    s = slack[0]
    others = float(sum(g.pg for g in live if g.bus != net.slack))
    p_slack = p_global - others
    above = not (p_global < others + s.pg)
    with np.errstate(divide="ignore", invalid="ignore"):
        if not above:
            lam = np.float64(p_global - others - s.pmax) / np.float64(2 * (s.pg - s.pmin))
        else:
            lam = np.float64(p_global - others - 2 * s.pg - s.pmax) / np.float64(2 * (s.pmax - s.pg))
    return SlackDispatch(p_slack=float(p_slack), lam=float(lam), above_setpoints=above)


def implied_reactive(net: Network, state: PFState) -> np.ndarray:
    """Reactive generation implied by the voltages, per bus.

    Filled at PV and slack buses, NaN at PQ buses.
    """
    br = net.branch_arrays()
    n = net.n_bus
    _, bs = net.shunts()
    _, qd = net.bus_demand()
    _, qf, _, qt = _branch_terms(br, state.vm, state.va)
    q_out = np.bincount(br.f, qf, n) + np.bincount(br.t, qt, n)
    qg = qd - bs * state.vm ** 2 + q_out
    qg[net.kinds == BusKind.PQ] = np.nan
    return qg


def complete_solution(net: Network, state: PFState, adm: Admittance | None = None) -> Solution:
    """Fill in every output from a voltage solution.

    Slack p/q and PV q come from the calculated injections; generator outputs
    at a bus share the bus total (active remainder on the first slack unit,
    reactive split in proportion to each unit's reactive range).
    """
    adm = adm or build_admittance(net)
    V = state.V
    S = calculated_injection(adm.Y, V)
    p_spec, q_spec = specified_injections(net)
    p_net = np.where(np.isnan(p_spec), S.real, p_spec)
    q_net = np.where(np.isnan(q_spec), S.imag, q_spec)
    pd, qd = net.bus_demand()

    live = net.live_generators
    pg = np.array([net.generators[k].pg for k in live], dtype=float)
    qg = np.array([net.generators[k].qg for k in live], dtype=float)
    by_bus: dict[int, list[int]] = {}
    for pos, k in enumerate(live):
        by_bus.setdefault(net.generators[k].bus, []).append(pos)
    for bus, members in by_bus.items():
        if net.kinds[bus] == BusKind.PQ:
            continue
        q_total = q_net[bus] + qd[bus]
        span = np.array([net.generators[live[m]].qmax - net.generators[live[m]].qmin for m in members])
        w = span / span.sum() if span.sum() > 0 else np.full(len(members), 1 / len(members))
        qg[members] = q_total * w
        if bus == net.slack:
            p_total = p_net[bus] + pd[bus]
            rest = members[1:]
            pg[members[0]] = p_total - pg[rest].sum()
    flows = flows_from_admittance(adm, V)
    return Solution(vm=state.vm.copy(), va=state.va.copy(), p_net=p_net, q_net=q_net,
                    pg=pg, qg=qg, flows=flows)
