"""Continuation power flow towards the steady-state voltage stability limit.

The loading path is ``S_spec(lam) = S_base + lam * (S_target - S_base)``,
traced with a tangent predictor and a Newton corrector at fixed ``lam``.
The nose is declared when the corrector fails even at the minimum step.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .balance import PFState, specified_injections
from .grid_model import BusKind, Generator, Load, Network, build_admittance
from .pf_newton import SolveOptions, _Pattern, condition_estimate, newton, residual, solve, unknown_index


class CPFStatus(str, enum.Enum):
    NOSE_FOUND = "NoseFound"
    TARGET_REACHED = "TargetReached"
    FAILED = "Failed"


class DegenerateSpecError(ValueError):
    pass


class BaseCaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContinuationSpec:
    base_p: np.ndarray
    base_q: np.ndarray
    target_p: np.ndarray
    target_q: np.ndarray
    initial_step: float = 0.05
    min_step: float = 1e-4
    max_step: float = 0.1
    corrector_tol: float = 1e-8
    corrector_max_iter: int = 10
    stop_at: str = "nose"  # or "target": stop once lam reaches 1
    max_points: int = 2000

    def __post_init__(self):
        for name in ("base_p", "base_q", "target_p", "target_q"):
            object.__setattr__(self, name, np.nan_to_num(np.asarray(getattr(self, name), dtype=float)))
        if not (0 < self.min_step <= self.initial_step <= self.max_step):
            raise ValueError("steps must satisfy 0 < min_step <= initial_step <= max_step")
        if self.stop_at not in ("nose", "target"):
            raise ValueError("stop_at must be 'nose' or 'target'")

    @property
    def direction(self) -> tuple[np.ndarray, np.ndarray]:
        return self.target_p - self.base_p, self.target_q - self.base_q


def scaled_spec(net: Network, factor: float = 2.5, **options) -> ContinuationSpec:
    """Target every specified injection at ``factor`` times its base value."""
    p, q = specified_injections(net)
    p = np.nan_to_num(p)
    q = np.nan_to_num(q)
    return ContinuationSpec(base_p=p, base_q=q, target_p=factor * p, target_q=factor * q, **options)


@dataclass
class CPFPoint:
    lam: float
    state: PFState
    condition: float
    iterations: int


@dataclass
class CPFPath:
    points: list[CPFPoint] = field(default_factory=list)
    status: CPFStatus = CPFStatus.FAILED
    nose_index: int | None = None
    message: str = ""

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    @property
    def condition_trace(self) -> np.ndarray:
        return np.array([p.condition for p in self.points])

    def table(self, bus: int) -> list[tuple[float, float, float]]:
        """(lam, |v| at ``bus``, condition estimate) per point, for nose-curve plots."""
        return [(p.lam, float(p.state.vm[bus]), p.condition) for p in self.points]


class _System:
    """Index bookkeeping for f(x, lam) = 0 on one network."""

    def __init__(self, net: Network, spec: ContinuationSpec):
        self.net = net
        self.Y = build_admittance(net).Y
        self.pvpq, self.pq = unknown_index(net)
        self.pattern = _Pattern(self.Y, self.pvpq, self.pq)
        self.spec = spec
        dp, dq = spec.direction
        self.d = np.concatenate([dp[self.pvpq], dq[self.pq]])

    def injections(self, lam: float):
        dp, dq = self.spec.direction
        return self.spec.base_p + lam * dp, self.spec.base_q + lam * dq

    def pack(self, state: PFState) -> np.ndarray:
        return np.concatenate([state.va[self.pvpq], state.vm[self.pq]])

    def unpack(self, x: np.ndarray, like: PFState) -> PFState:
        va = like.va.copy()
        vm = like.vm.copy()
        va[self.pvpq] = x[:len(self.pvpq)]
        vm[self.pq] = x[len(self.pvpq):]
        return PFState(vm=vm, va=va)

    def jac(self, state: PFState) -> sp.csr_matrix:
        return self.pattern.build(self.Y, state.V)

    def residual(self, state: PFState, lam: float) -> np.ndarray:
        p, q = self.injections(lam)
        return residual(self.Y, state.V, p, q, self.pvpq, self.pq)


def predictor(system: _System, point: CPFPoint, step: float) -> tuple[PFState, float] | None:
    """Step of length ``step`` along the unit tangent in (x, lam) space.

    Returns ``None`` when the tangent system is singular, which only happens
    at (or numerically at) the nose.
    """
    J = system.jac(point.state)
    with warnings.catch_warnings():
        warnings.simplefilter("error", MatrixRankWarning)
        try:
            dx_dlam = spsolve(sp.csc_matrix(J), system.d)
        except (MatrixRankWarning, RuntimeError):
            return None
    if not np.all(np.isfinite(dx_dlam)):
        return None
    z = np.append(dx_dlam, 1.0)
    z /= np.linalg.norm(z)
    x = system.pack(point.state) + step * z[:-1]
    return system.unpack(x, point.state), point.lam + step * z[-1]


def corrector(system: _System, predicted: PFState, lam: float) -> CPFPoint | None:
    """Newton at fixed ``lam`` from the predicted state; ``None`` on failure."""
    p, q = system.injections(lam)
    vm, va, ok, iters, _, _ = newton(system.Y, predicted.vm, predicted.va, p, q,
                                     system.pvpq, system.pq, system.spec.corrector_tol,
                                     system.spec.corrector_max_iter)
    if not ok or np.any(vm <= 0):
        return None
    state = PFState(vm=vm, va=va)
    return CPFPoint(lam=lam, state=state, condition=condition_estimate(system.jac(state)),
                    iterations=iters)


def trace(net: Network, spec: ContinuationSpec) -> CPFPath:
    """Trace the loading path from the base point until the nose (or lam = 1)."""
    dp, dq = spec.direction
    if not (np.any(dp != 0) or np.any(dq != 0)):
        raise DegenerateSpecError("target injections equal the base injections")
    system = _System(net, spec)
    if not np.any(system.d != 0):
        raise DegenerateSpecError("direction has no component on the solved equations")

    base_net = with_injections(net, spec.base_p, spec.base_q)
    base = solve(base_net, SolveOptions(tol=spec.corrector_tol))
    if not base.converged:
        raise BaseCaseError(f"base case does not solve from flat start ({base.reason})")
    first = CPFPoint(lam=0.0, state=base.state,
                     condition=condition_estimate(system.jac(base.state)), iterations=base.iterations)
    path = CPFPath(points=[first])

    step = spec.initial_step
    easy = 0
    while len(path.points) < spec.max_points:
        current = path.points[-1]
        pred = predictor(system, current, step)
        point = None
        if pred is not None:
            state_hat, lam_hat = pred
            if spec.stop_at == "target" and lam_hat > 1.0:
                lam_hat = 1.0
            if lam_hat > current.lam:
                point = corrector(system, state_hat, lam_hat)
        if point is None:
            if step <= spec.min_step:
                path.status = CPFStatus.NOSE_FOUND
                path.nose_index = len(path.points) - 1
                path.message = "corrector failed at the minimum step"
                return path
            step = max(step / 2, spec.min_step)
            easy = 0
            continue
        path.points.append(point)
        if spec.stop_at == "target" and point.lam >= 1.0:
            path.status = CPFStatus.TARGET_REACHED
            return path
        easy = easy + 1 if point.iterations <= 1 else 0
        if easy >= 3:
            step = min(step * 2, spec.max_step)
            easy = 0
    path.status = CPFStatus.FAILED
    path.message = "point budget exhausted"
    return path


def with_injections(net: Network, p_net, q_net) -> Network:
    """Rescale loads and non-slack generation so the network carries the given injections.

    Each bus's change is applied to its loads (and, for active power at
    generator buses, proportionally to generators and loads alike) so that
    ``pg - pd`` and ``qg - qd`` match at every bus where they are inputs.
    """
    p_net = np.nan_to_num(np.asarray(p_net, dtype=float))
    q_net = np.nan_to_num(np.asarray(q_net, dtype=float))
    pg_bus, qg_bus = net.bus_generation()
    pd_bus, qd_bus = net.bus_demand()
    base_p = pg_bus - pd_bus
    base_q = qg_bus - qd_bus
    kinds = net.kinds

    def ratio(new, old):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(old != 0, new / old, np.nan)

    rp = ratio(p_net, base_p)
    rq = ratio(q_net, base_q)
    loads = []
    extra_p = p_net - base_p
    extra_q = q_net - base_q
    for ld in net.loads:
        b = ld.bus
        pd, qd = ld.pd, ld.qd
        if kinds[b] != BusKind.SLACK:
            if np.isfinite(rp[b]):
                pd = ld.pd * rp[b]
            elif pd_bus[b] != 0:
                pd = ld.pd - extra_p[b] * ld.pd / pd_bus[b]
        if kinds[b] == BusKind.PQ:
            if np.isfinite(rq[b]):
                qd = ld.qd * rq[b]
            elif qd_bus[b] != 0:
                qd = ld.qd - extra_q[b] * ld.qd / qd_bus[b]
        loads.append(Load(bus=b, pd=pd, qd=qd))
    gens = []
    for g in net.generators:
        pg = g.pg
        if g.in_service and kinds[g.bus] != BusKind.SLACK and np.isfinite(rp[g.bus]):
            pg = g.pg * rp[g.bus]
        gens.append(replace(g, pg=pg))
    scaled = replace(net, loads=tuple(loads), generators=tuple(gens))
    # buses with zero base injection but a nonzero request take it as load
    p_s, q_s = specified_injections(scaled)
    fix_p = np.where(np.isnan(p_s), 0.0, p_net - p_s)
    fix_q = np.where(np.isnan(q_s), 0.0, q_net - q_s)
    fix_q[kinds != BusKind.PQ] = 0.0
    if np.any(np.abs(fix_p) > 0) or np.any(np.abs(fix_q) > 0):
        extra = [Load(bus=int(i), pd=-fix_p[i], qd=-fix_q[i])
                 for i in np.flatnonzero((np.abs(fix_p) > 0) | (np.abs(fix_q) > 0))]
        scaled = replace(scaled, loads=tuple(loads) + tuple(extra))
    return scaled


@dataclass
class ExtractedCases:
    close_to_infeasible: tuple[Network, PFState, float] | None
    approaching: list[tuple[Network, PFState, float]]
    truncated: bool


def extract_cases(net: Network, spec: ContinuationSpec, path: CPFPath, n_approaching: int = 4) -> ExtractedCases:
    """Nose point plus up to ``n_approaching`` solved points immediately before it.

    Each case is a standalone network carrying the injections at that point's
    ``lam``, paired with the solved state.
    """
    if path.status != CPFStatus.NOSE_FOUND or path.nose_index is None:
        raise ValueError("case extraction needs a path that ended at the nose")
    system = _System(net, spec)

    def standalone(point: CPFPoint):
        p, q = system.injections(point.lam)
        return with_injections(net, p, q), point.state, point.lam

    nose = path.points[path.nose_index]
    lo = max(0, path.nose_index - n_approaching)
    before = path.points[lo:path.nose_index]
    return ExtractedCases(
        close_to_infeasible=standalone(nose),
        approaching=[standalone(p) for p in before],
        truncated=len(before) < n_approaching,
    )
