import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridscen.balance import (PFState, complete_solution, global_demand, implied_reactive, joule_losses,
                              mismatch, mismatch_branch_form, slack_redispatch, specified_injections)
from gridscen.case_io import load_case
from gridscen.grid_model import build_admittance
from gridscen.pf_newton import solve
from netgen import random_network, random_state


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30))
def test_two_mismatch_forms_agree(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    state = random_state(rng, n)
    p, q = rng.normal(size=n), rng.normal(size=n)
    a = mismatch(net, None, state, p, q)
    b = mismatch_branch_form(net, state, p, q)
    assert np.max(np.abs(a.dp - b.dp)) < 1e-10
    assert np.max(np.abs(a.dq - b.dq)) < 1e-10


def test_nan_injection_means_free(case14):
    state = PFState.flat(case14)
    p, q = specified_injections(case14)
    rep = mismatch(case14, None, state, p, q)
    assert rep.dp[case14.slack] == 0 and np.all(rep.dq[case14.pv] == 0)


def test_length_checked(case14):
    with pytest.raises(ValueError):
        mismatch(case14, None, PFState.flat(case14), np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("name", ["case14", "case57", "case118"])
def test_generation_covers_global_demand_at_solution(name):
    net = load_case(name)
    out = solve(net)
    total_pg = out.solution.pg.sum()
    assert total_pg == pytest.approx(global_demand(net, out.state), abs=1e-7)
    assert joule_losses(net, out.state) > 0


def test_slack_redispatch_closes_balance(case14):
    out = solve(case14)
    disp = slack_redispatch(case14, global_demand(case14, out.state))
    slack_pos = [k for k, g in enumerate(case14.live_generators)
                 if case14.generators[g].bus == case14.slack][0]
    assert disp.p_slack == pytest.approx(out.solution.pg[slack_pos], abs=1e-8)


def test_slack_lambda_branches(case14):
    live = [case14.generators[k] for k in case14.live_generators]
    setpoints = sum(g.pg for g in live)
    assert not slack_redispatch(case14, setpoints - 0.1).above_setpoints
    assert slack_redispatch(case14, setpoints + 0.1).above_setpoints


def test_slack_lambda_degenerate_division():
    from dataclasses import replace
    net = load_case("case14")
    gens = list(net.generators)
    k = [i for i, g in enumerate(gens) if g.bus == net.slack][0]
    gens[k] = replace(gens[k], pg=gens[k].pmin)
    disp = slack_redispatch(replace(net, generators=tuple(gens)), 0.0)
    assert not np.isfinite(disp.lam)


def test_implied_reactive_matches_injection(case14):
    out = solve(case14)
    qg = implied_reactive(case14, out.state)
    S = out.state.V * np.conj(build_admittance(case14).Y @ out.state.V)
    _, qd = case14.bus_demand()
    gen = ~np.isnan(qg)
    assert np.allclose(qg[gen], S.imag[gen] + qd[gen], atol=1e-10)
    assert np.all(np.isnan(qg[case14.pq]))


def test_complete_solution_flows_consistent(case14):
    out = solve(case14)
    sol = complete_solution(case14, out.state)
    pg_bus = np.bincount([case14.generators[k].bus for k in case14.live_generators], sol.pg, 14)
    pd, _ = case14.bus_demand()
    assert np.allclose(pg_bus - pd, sol.p_net, atol=1e-8)
