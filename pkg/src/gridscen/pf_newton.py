"""Newton-Raphson AC power flow in polar coordinates."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .balance import MismatchReport, PFState, Solution, complete_solution, mismatch, specified_injections
from .grid_model import Admittance, BusKind, Network, build_admittance

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


@dataclass(frozen=True)
class SolveOptions:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    start: PFState | None = None  # None means flat start

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class SolveOutcome:
    converged: bool
    state: PFState
    iterations: int
    final_mismatch: MismatchReport
    wall_time: float
    reason: str = ""
    step_norms: list[float] = field(default_factory=list)
    solution: Solution | None = None


def dS_dV(Y: sp.csr_matrix, V: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Partial derivatives of ``V * conj(Y V)`` w.r.t. angle and magnitude."""
    Ibus = Y @ V
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVn = sp.diags(V / np.abs(V))
    dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
    dS_dVm = diagV @ np.conj(Y @ diagVn) + np.conj(diagI) @ diagVn
    return sp.csr_matrix(dS_dVa), sp.csr_matrix(dS_dVm)


def unknown_index(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Buses whose angle (PV and PQ) and magnitude (PQ) are unknowns."""
    pvpq = np.sort(np.concatenate([net.pv, net.pq]))
    return pvpq, net.pq


def jacobian(net: Network, adm: Admittance | None, state: PFState) -> sp.csr_matrix:
    """Jacobian of the residual ``[P(x) - P_spec at PV+PQ; Q(x) - Q_spec at PQ]``.

    Columns are angles at PV+PQ buses followed by magnitudes at PQ buses.
    """
    adm = adm or build_admittance(net)
    pvpq, pq = unknown_index(net)
    return _jacobian(adm.Y, state.V, pvpq, pq)


class _Pattern:
    """Maps admittance nonzeros to Jacobian coordinates for fixed bus typing."""

    def __init__(self, Y, pvpq, pq):
        n = Y.shape[0]
        coo = sp.coo_matrix(Y)
        diag = np.arange(n)
        self.i = np.concatenate([coo.row, diag])
        self.k = np.concatenate([coo.col, diag])
        self.y = np.concatenate([coo.data, np.zeros(n, dtype=complex)])
        self.is_diag = np.zeros(len(self.i), dtype=bool)
        self.is_diag[len(coo.row):] = True
        npvpq = len(pvpq)
        rp = np.full(n, -1)
        rp[pvpq] = np.arange(npvpq)
        rq = np.full(n, -1)
        rq[pq] = npvpq + np.arange(len(pq))
        self.size = npvpq + len(pq)
        ri_p, ri_q = rp[self.i], rq[self.i]
        ck_a, ck_m = rp[self.k], rq[self.k]
        blocks = [(ri_p, ck_a), (ri_p, ck_m), (ri_q, ck_a), (ri_q, ck_m)]
        self.masks = [(r >= 0) & (c >= 0) for r, c in blocks]
        self.rows = np.concatenate([r[m] for (r, _), m in zip(blocks, self.masks)])
        self.cols = np.concatenate([c[m] for (_, c), m in zip(blocks, self.masks)])

    def build(self, Y, V) -> sp.csr_matrix:
        Ibus = Y @ V
        Vi, Vk = V[self.i], V[self.k]
        Vn = V / np.abs(V)
        dva = 1j * Vi * np.conj(-self.y * Vk)
        dvm = Vi * np.conj(self.y * Vn[self.k])
        d = self.is_diag
        dva[d] += 1j * V * np.conj(Ibus)
        dvm[d] += np.conj(Ibus) * Vn
        vals = np.concatenate([dva.real[self.masks[0]], dvm.real[self.masks[1]],
                               dva.imag[self.masks[2]], dvm.imag[self.masks[3]]])
        return sp.csr_matrix((vals, (self.rows, self.cols)), shape=(self.size, self.size))


def _jacobian(Y, V, pvpq, pq, pattern: _Pattern | None = None) -> sp.csr_matrix:
    return (pattern or _Pattern(Y, pvpq, pq)).build(Y, V)


def residual(Y, V, p_spec, q_spec, pvpq, pq) -> np.ndarray:
    S = V * np.conj(Y @ V)
    return np.concatenate([S.real[pvpq] - p_spec[pvpq], S.imag[pq] - q_spec[pq]])


def _max_ds(F, pvpq, pq, n) -> float:
    dp = np.zeros(n)
    dq = np.zeros(n)
    dp[pvpq] = F[:len(pvpq)]
    dq[pq] = F[len(pvpq):]
    return float(np.max(np.hypot(dp, dq))) if n else 0.0


def condition_estimate(J) -> float:
    """1-norm condition number of a square Jacobian; ``inf`` when singular."""
    A = J.toarray() if sp.issparse(J) else np.asarray(J, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("condition_estimate needs a square matrix")
    if A.size == 0:
        return 1.0
    try:
        inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        return float("inf")
    c = np.linalg.norm(A, 1) * np.linalg.norm(inv, 1)
    return float(c) if np.isfinite(c) else float("inf")


def newton(Y, vm0, va0, p_spec, q_spec, pvpq, pq, tol, max_iter):
    """Plain Newton iterations on the mismatch system.

    Returns ``(vm, va, converged, iterations, step_norms, reason)``; never
    raises on numerical failure.
    """
    vm = np.array(vm0, dtype=float)
    va = np.array(va0, dtype=float)
    V = vm * np.exp(1j * va)
    n = len(vm)
    npvpq = len(pvpq)
    step_norms: list[float] = []
    F = residual(Y, V, p_spec, q_spec, pvpq, pq)
    if F.size == 0 or _max_ds(F, pvpq, pq, n) <= tol:
        return vm, va, True, 0, step_norms, ""
    pattern = _Pattern(Y, pvpq, pq)
    for it in range(1, max_iter + 1):
        J = pattern.build(Y, V)
        try:
            dx = -splu(sp.csc_matrix(J)).solve(F)
        except RuntimeError:
            return vm, va, False, it - 1, step_norms, "singular Jacobian"
        if not np.all(np.isfinite(dx)):
            return vm, va, False, it - 1, step_norms, "non-finite Newton step"
        step_norms.append(float(np.linalg.norm(dx)))
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        V = vm * np.exp(1j * va)
        F = residual(Y, V, p_spec, q_spec, pvpq, pq)
        if not np.all(np.isfinite(F)):
            return vm, va, False, it, step_norms, "diverged"
        if _max_ds(F, pvpq, pq, n) <= tol:
            return vm, va, True, it, step_norms, ""
    return vm, va, False, max_iter, step_norms, "iteration limit reached"


def solve(net: Network, options: SolveOptions | None = None, adm: Admittance | None = None) -> SolveOutcome:
    """Solve the power flow; failures are reported in the outcome, not raised.

    Convergence means max |dS| over the equations being solved (P at PV and PQ
    buses, Q at PQ buses) is at most ``options.tol``.
    """
    options = options or SolveOptions()
    t0 = time.perf_counter()
    adm = adm or build_admittance(net)
    p_spec, q_spec = specified_injections(net)
    p_spec = np.nan_to_num(p_spec)
    q_spec = np.nan_to_num(q_spec)
    pvpq, pq = unknown_index(net)

    start = options.start or PFState.flat(net)
    vm0 = start.vm.copy()
    va0 = start.va.copy()
    flat = PFState.flat(net)
    reg = net.kinds != BusKind.PQ
    vm0[reg] = flat.vm[reg]
    va0[net.slack] = 0.0
    vm, va, ok, iters, steps, reason = newton(adm.Y, vm0, va0, p_spec, q_spec,
                                              pvpq, pq, options.tol, options.max_iter)
    state = PFState(vm=vm, va=va)
    p_in, q_in = specified_injections(net)
    report = mismatch(net, adm, state, p_in, q_in)
    outcome = SolveOutcome(converged=ok, state=state, iterations=iters, final_mismatch=report,
                           wall_time=time.perf_counter() - t0, reason=reason, step_norms=steps)
    if ok:
        outcome.solution = complete_solution(net, state, adm)
    return outcome
