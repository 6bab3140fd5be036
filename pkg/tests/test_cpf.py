import numpy as np
import pytest

from gridscen.balance import specified_injections
from gridscen.cpf import (ContinuationSpec, CPFStatus, DegenerateSpecError, extract_cases, scaled_spec,
                          trace, with_injections)
from gridscen.pf_newton import SolveOptions, solve
from netgen import two_bus


def sweep_nose(net, spec, step=5e-4):
    """Largest lam reached by warm-started Newton on a fixed lam grid."""
    state, lam = solve(net).state, 0.0
    dp, dq = spec.direction
    while True:
        nxt = lam + step
        p, q = spec.base_p + nxt * dp, spec.base_q + nxt * dq
        out = solve(with_injections(net, p, q), SolveOptions(start=state, max_iter=20))
        if not out.converged or np.any(out.state.vm <= 0.05):
            return lam
        state, lam = out.state, nxt


def nose_load(spec, lam):
    return -(spec.base_p[1] + lam * spec.direction[0][1])


def test_two_bus_nose_matches_analytic_and_sweep():
    X = 0.1
    net = two_bus(x=X, pd=0.5)
    spec = scaled_spec(net, 20.0)
    path = trace(net, spec)
    assert path.status == CPFStatus.NOSE_FOUND
    found = nose_load(spec, path.lambdas[path.nose_index])
    analytic = 1.0 / (2 * X)
    swept = nose_load(spec, sweep_nose(net, spec))
    assert abs(found - analytic) <= 0.01 * analytic
    assert abs(found - swept) <= 0.01 * swept


def test_lambda_strictly_increasing(case14):
    path = trace(case14, scaled_spec(case14))
    assert np.all(np.diff(path.lambdas) > 0)


def test_stop_at_target():
    net = two_bus(pd=0.5)
    path = trace(net, scaled_spec(net, 2.0, stop_at="target"))
    assert path.status == CPFStatus.TARGET_REACHED
    assert path.lambdas[-1] == pytest.approx(1.0)


def test_degenerate_direction(case14):
    p, q = specified_injections(case14)
    with pytest.raises(DegenerateSpecError):
        trace(case14, ContinuationSpec(p, q, p, q))


def test_bad_steps_rejected():
    z = np.zeros(2)
    with pytest.raises(ValueError):
        ContinuationSpec(z, z, z, z, initial_step=1.0, max_step=0.1)


def test_extraction_counts(case14):
    spec = scaled_spec(case14)
    path = trace(case14, spec)
    cases = extract_cases(case14, spec, path)
    assert cases.close_to_infeasible is not None
    assert len(cases.approaching) == 4 and not cases.truncated
    lams = [c[2] for c in cases.approaching] + [cases.close_to_infeasible[2]]
    assert len(set(lams)) == 5 and lams == sorted(lams)


def test_extraction_truncated_on_short_path(case14):
    spec = scaled_spec(case14)
    path = trace(case14, spec)
    path.points = path.points[-3:]
    path.nose_index = 2
    cases = extract_cases(case14, spec, path)
    assert len(cases.approaching) == 2 and cases.truncated


def test_extracted_cases_are_solutions(case14):
    spec = scaled_spec(case14)
    cases = extract_cases(case14, spec, trace(case14, spec))
    from gridscen.balance import mismatch
    for net, state, _ in [cases.close_to_infeasible] + cases.approaching:
        p, q = specified_injections(net)
        assert mismatch(net, None, state, p, q).max_ds <= 1e-8


def test_table_rows(case14):
    path = trace(case14, scaled_spec(case14))
    rows = path.table(int(case14.pq[0]))
    assert len(rows) == len(path.points) and all(len(r) == 3 for r in rows)
