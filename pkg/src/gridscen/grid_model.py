"""Per-unit network model, admittance assembly and branch flows.

All quantities are per unit on ``Network.base_mva``; angles are radians.
Buses are densely indexed ``0..n-1``; the external bus numbers from the
case file are retained in ``Network.bus_ids``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


class NetworkError(ValueError):
    """Raised when a network violates a structural invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    gs: float = 0.0
    bs: float = 0.0
    vmin: float = 0.9
    vmax: float = 1.1


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float = 0.0
    qg: float = 0.0
    pmin: float = 0.0
    pmax: float = 0.0
    qmin: float = 0.0
    qmax: float = 0.0
    vset: float = 1.0
    cost_a: float = 0.0
    cost_b: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    bus: int
    pd: float = 0.0
    qd: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    in_service: bool = True
    rate: float = 0.0
    angmin: float = -2 * np.pi
    angmax: float = 2 * np.pi


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    branches: tuple[Branch, ...] = ()
    bus_ids: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        for attr in ("buses", "generators", "loads", "branches", "bus_ids"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(1, len(self.buses) + 1)))
        self._validate()

    def _validate(self):
        n = len(self.buses)
        for i, bus in enumerate(self.buses):
            if bus.id != i:
                raise NetworkError(f"bus at position {i} carries id {bus.id}")
            if bus.vmin > bus.vmax:
                raise NetworkError(f"bus {self.bus_ids[i]}: vmin > vmax")
        for k, g in enumerate(self.generators):
            if not 0 <= g.bus < n:
                raise NetworkError(f"generator {k} references unknown bus {g.bus}")
            if g.pmin > g.pmax or g.qmin > g.qmax:
                raise NetworkError(f"generator {k}: min limit above max limit")
        for k, ld in enumerate(self.loads):
            if not 0 <= ld.bus < n:
                raise NetworkError(f"load {k} references unknown bus {ld.bus}")
        for k, br in enumerate(self.branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise NetworkError(f"branch {k} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise NetworkError(f"branch {k} connects bus {self.bus_ids[br.from_bus]} to itself")
            if br.tap <= 0:
                raise NetworkError(f"branch {k}: tap ratio must be positive")
        slack = [i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK]
        if len(slack) != 1:
            ids = [self.bus_ids[i] for i in slack]
            raise NetworkError(f"expected exactly one slack bus, found {len(slack)}: {ids}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK)

    @cached_property
    def kinds(self) -> np.ndarray:
        return np.array([int(b.kind) for b in self.buses], dtype=np.int64)

    @cached_property
    def pv(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == BusKind.PV)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == BusKind.PQ)

    @cached_property
    def live_branches(self) -> np.ndarray:
        return np.array([k for k, br in enumerate(self.branches) if br.in_service], dtype=np.int64)

    @cached_property
    def live_generators(self) -> np.ndarray:
        return np.array([k for k, g in enumerate(self.generators) if g.in_service], dtype=np.int64)

    def bus_demand(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus (pd, qd) summed over loads."""
        pd = np.zeros(self.n_bus)
        qd = np.zeros(self.n_bus)
        for ld in self.loads:
            pd[ld.bus] += ld.pd
            qd[ld.bus] += ld.qd
        return pd, qd

    def bus_generation(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus (pg, qg) summed over in-service generators."""
        pg = np.zeros(self.n_bus)
        qg = np.zeros(self.n_bus)
        for g in self.generators:
            if g.in_service:
                pg[g.bus] += g.pg
                qg[g.bus] += g.qg
        return pg, qg

    def voltage_setpoints(self) -> np.ndarray:
        """Voltage magnitude setpoint per bus; NaN where no live generator regulates."""
        vset = np.full(self.n_bus, np.nan)
        for g in self.generators:
            if g.in_service and np.isnan(vset[g.bus]):
                vset[g.bus] = g.vset
        return vset

    def shunts(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.gs for b in self.buses], dtype=float),
                np.array([b.bs for b in self.buses], dtype=float))

    def branch_arrays(self, live_only: bool = True) -> "BranchArrays":
        idx = self.live_branches if live_only else np.arange(len(self.branches))
        brs = [self.branches[k] for k in idx]
        b = np.array([br.b_charging for br in brs], dtype=float)
        return BranchArrays(
            index=np.asarray(idx, dtype=np.int64),
            f=np.array([br.from_bus for br in brs], dtype=np.int64),
            t=np.array([br.to_bus for br in brs], dtype=np.int64),
            r=np.array([br.r for br in brs], dtype=float),
            x=np.array([br.x for br in brs], dtype=float),
            g_fr=np.zeros(len(brs)),
            b_fr=b / 2,
            g_to=np.zeros(len(brs)),
            b_to=b / 2,
            tap=np.array([br.tap for br in brs], dtype=float),
            shift=np.array([br.shift for br in brs], dtype=float),
        )

    def with_changes(self, **kwargs) -> "Network":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class BranchArrays:
    """Column view of branches; shunt terms are split per end."""

    index: np.ndarray
    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    g_fr: np.ndarray
    b_fr: np.ndarray
    g_to: np.ndarray
    b_to: np.ndarray
    tap: np.ndarray
    shift: np.ndarray

    def __len__(self):
        return len(self.f)

    def series_admittance(self) -> np.ndarray:
        z = self.r + 1j * self.x
        bad = np.flatnonzero(z == 0)
        if bad.size:
            raise NetworkError(f"zero-impedance branch(es): {self.index[bad].tolist()}")
        return 1.0 / z


@dataclass(frozen=True)
class Admittance:
    """Bus admittance matrix plus the per-branch two-port entries."""

    Y: sp.csr_matrix
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    branches: BranchArrays = field(repr=False)

    @property
    def G(self) -> sp.csr_matrix:
        return self.Y.real

    @property
    def B(self) -> sp.csr_matrix:
        return self.Y.imag


def admittance_from_arrays(n_bus: int, br: BranchArrays, gs, bs) -> Admittance:
    ys = br.series_admittance()
    T = br.tap * np.exp(1j * br.shift)
    yff = (ys + br.g_fr + 1j * br.b_fr) / (br.tap ** 2)
    yft = -ys / np.conj(T)
    ytf = -ys / T
    ytt = ys + br.g_to + 1j * br.b_to
    rows = np.concatenate([br.f, br.f, br.t, br.t, np.arange(n_bus)])
    cols = np.concatenate([br.f, br.t, br.f, br.t, np.arange(n_bus)])
    vals = np.concatenate([yff, yft, ytf, ytt, np.asarray(gs) + 1j * np.asarray(bs)])
    Y = sp.csr_matrix((vals, (rows, cols)), shape=(n_bus, n_bus), dtype=complex)
    Y.sum_duplicates()
    return Admittance(Y=Y, yff=yff, yft=yft, ytf=ytf, ytt=ytt, branches=br)


def build_admittance(net: Network) -> Admittance:
    """Assemble Y = G + jB from live branches and bus shunts.

    Each branch is a pi-model behind an ideal transformer of complex ratio
    ``tap * exp(j*shift)`` on the from side.
    """
    gs, bs = net.shunts()
    return admittance_from_arrays(net.n_bus, net.branch_arrays(), gs, bs)


def complex_voltage(vm, va) -> np.ndarray:
    return np.asarray(vm) * np.exp(1j * np.asarray(va))


def branch_flows(net: Network, vm, va, adm: Admittance | None = None) -> np.ndarray:
    """Return an ``(n_live, 4)`` array of (p_from, q_from, p_to, q_to).

    Rows follow ``net.live_branches``.
    """
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (net.n_bus,) or va.shape != (net.n_bus,):
        raise ValueError(f"state must have {net.n_bus} entries per vector")
    adm = adm or build_admittance(net)
    return flows_from_admittance(adm, complex_voltage(vm, va))


def flows_from_admittance(adm: Admittance, V: np.ndarray) -> np.ndarray:
    br = adm.branches
    Vf, Vt = V[br.f], V[br.t]
    If = adm.yff * Vf + adm.yft * Vt
    It = adm.ytf * Vf + adm.ytt * Vt
    Sf = Vf * np.conj(If)
    St = Vt * np.conj(It)
    return np.column_stack([Sf.real, Sf.imag, St.real, St.imag])


def connected_components(net: Network) -> np.ndarray:
    """Component label per bus using live branches only."""
    br = net.branch_arrays()
    n = net.n_bus
    adj = sp.coo_matrix((np.ones(len(br)), (br.f, br.t)), shape=(n, n))
    _, labels = _cc(adj, directed=False)
    return labels


def is_connected(net: Network) -> bool:
    return net.n_bus > 0 and int(connected_components(net).max()) == 0
