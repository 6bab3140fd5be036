from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridscen.case_io import load_case
from gridscen.grid_model import Branch, Bus, BusKind, Generator, Load, Network, is_connected
from gridscen.scenario import (EventKind, ScenarioRejected, check_constraints, diversify_setpoints,
                               generate_sample, hit_and_run, perturb_topology, remove_components,
                               sample_loads)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 12))
def test_hit_and_run_stays_inside(seed, d):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.1, 1.0, d)
    x = hit_and_run(np.zeros(d), 2 * base, 1.3 * base.sum(), base, rng, 50)
    assert np.all(x >= 0) and np.all(x <= 2 * base + 1e-12) and x.sum() <= 1.3 * base.sum() + 1e-12


def test_hit_and_run_matches_rejection_sampling():
    base = np.array([0.3, 0.5, 0.2])
    cap = 1.3 * base.sum()
    rng = np.random.default_rng(0)
    box = rng.uniform(0, 2 * base, size=(200_000, 3))
    oracle = box[box.sum(axis=1) <= cap].sum(axis=1)
    walk = np.array([hit_and_run(np.zeros(3), 2 * base, cap, base, np.random.default_rng(i), 60).sum()
                     for i in range(3000)])
    assert walk.mean() == pytest.approx(oracle.mean(), rel=0.03)
    assert walk.std() == pytest.approx(oracle.std(), rel=0.08)


def test_polytope_spread_exceeds_box(case14):
    tot = {m: [sample_loads(case14, np.random.default_rng(i), m)[0].sum() for i in range(400)]
           for m in ("box", "polytope")}
    assert np.std(tot["polytope"]) > 1.5 * np.std(tot["box"])


def test_box_keeps_power_factor(case14):
    pd, qd = sample_loads(case14, np.random.default_rng(1), "box")
    pd0 = np.array([ld.pd for ld in case14.loads])
    qd0 = np.array([ld.qd for ld in case14.loads])
    assert np.allclose(qd * pd0, qd0 * pd)
    assert np.all((pd >= 0.8 * pd0 - 1e-12) & (pd <= 1.2 * pd0 + 1e-12))


def test_polytope_power_factor_band(case14):
    pd, qd = sample_loads(case14, np.random.default_rng(2), "polytope")
    pf = pd / np.hypot(pd, qd)
    assert np.all(pf >= 0.85 - 1e-12)


def test_unknown_method(case14):
    with pytest.raises(ValueError):
        sample_loads(case14, np.random.default_rng(0), "grid")


def test_event_kinds_uniform(case14):
    kinds = Counter(perturb_topology(case14, np.random.default_rng([1, i]))[1].kind for i in range(4000))
    for k in EventKind:
        assert abs(kinds[k] / 4000 - 0.25) < 0.03


def test_removal_count_uniform(case14):
    counts = Counter()
    for i in range(4000):
        _, ev = perturb_topology(case14, np.random.default_rng([2, i]))
        if ev.kind == EventKind.REMOVE_LINES:
            counts[len(ev.removed_branches)] += 1
    assert abs(counts[1] / sum(counts.values()) - 0.5) < 0.05


def test_no_removal_is_identity(case14):
    for i in range(50):
        net, ev = perturb_topology(case14, np.random.default_rng([3, i]))
        if ev.kind == EventKind.NO_REMOVAL:
            assert net is case14 and ev.topology == "N"
            return
    pytest.fail("no NoRemoval draw in 50 tries")


def _radial():
    return Network(100.0, [Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ), Bus(2, BusKind.PQ)],
                   generators=[Generator(0, pmax=5)], loads=[Load(1, 0.1), Load(2, 0.1)],
                   branches=[Branch(0, 1, 0.01, 0.1), Branch(1, 2, 0.01, 0.1)])


def test_radial_network_falls_back():
    net = _radial()
    for i in range(40):
        out, ev = perturb_topology(net, np.random.default_rng([4, i]))
        assert is_connected(out)
        if ev.kind in (EventKind.REMOVE_LINES, EventKind.REMOVE_GENS, EventKind.REMOVE_GEN_AND_LINE):
            assert ev.fallback and out is net


def test_perturbed_networks_connected_with_slack(case14):
    for i in range(300):
        net, ev = perturb_topology(case14, np.random.default_rng([5, i]))
        assert is_connected(net)
        assert any(net.generators[k].bus == net.slack for k in net.live_generators)
        assert ev.topology in ("N", "N-1", "N-2")


def test_pv_bus_retyped_after_generator_loss(case14):
    k = next(i for i, g in enumerate(case14.generators) if g.bus != case14.slack)
    net = remove_components(case14, generators=[k])
    assert net.kinds[case14.generators[k].bus] == BusKind.PQ


def test_slack_generator_not_removable(case14):
    k = next(i for i, g in enumerate(case14.generators) if g.bus == case14.slack)
    with pytest.raises(ValueError):
        remove_components(case14, generators=[k])


def test_single_generator_dispatch():
    net = _radial()
    out = diversify_setpoints(net, np.random.default_rng(0))
    assert out.generators[0].pg == pytest.approx(0.2 * 1.03)
    small = replace(net, generators=(replace(net.generators[0], pmax=0.1),))
    with pytest.raises(ScenarioRejected):
        diversify_setpoints(small, np.random.default_rng(0))


def test_identical_generators_share_first_place():
    net = Network(100.0, [Bus(0, BusKind.SLACK), Bus(1, BusKind.PV), Bus(2, BusKind.PQ)],
                  generators=[Generator(0, pmax=1.0, cost_b=10), Generator(1, pmax=1.0, cost_b=10)],
                  loads=[Load(2, 0.5)], branches=[Branch(0, 2, 0.01, 0.1), Branch(1, 2, 0.01, 0.1)])
    first = sum(diversify_setpoints(net, np.random.default_rng(i)).generators[0].pg > 0.4 for i in range(2000))
    assert abs(first / 2000 - 0.5) < 0.04


def test_dispatch_spans_generator_ranges():
    net = load_case("case57")
    draws = np.array([[g.pg for g in diversify_setpoints(net, np.random.default_rng(i)).generators]
                      for i in range(1000)])
    for k, g in enumerate(net.generators):
        if g.pmax > g.pmin:
            assert np.ptp(draws[:, k]) >= 0.5 * (g.pmax - g.pmin)


def test_vset_within_band(case14):
    net = diversify_setpoints(case14, np.random.default_rng(9))
    for g in net.generators:
        b = case14.buses[g.bus]
        assert max(b.vmin, 0.95) <= g.vset <= min(b.vmax, 1.1)


def test_generate_sample_deterministic(case14):
    a = generate_sample(case14, 11, 4)
    b = generate_sample(case14, 11, 4)
    assert a.accepted == b.accepted
    if a.accepted:
        assert a.record.to_json() == b.record.to_json()


def test_rejections_carry_event(case14):
    for i in range(60):
        r = generate_sample(case14, 11, i)
        if not r.accepted:
            rej = r.rejection(11, i)
            assert rej["event"]["kind"] in {k.value for k in EventKind} and rej["reason"]
            return
    pytest.skip("no rejection in 60 draws")


def _accepted(net, seed=21):
    for i in range(50):
        r = generate_sample(net, seed, i)
        if r.accepted:
            return r
    pytest.fail("no accepted sample")


def test_checker_passes_solver_records(case14):
    r = _accepted(case14)
    rep = check_constraints(r.network, r.record, 1e-6)
    assert rep.passed and rep.worst["h"] <= 1e-6 and rep.worst["i"] <= 1e-6 and rep.worst["j"] <= 1e-6


def test_checker_flags_pv_voltage(case14):
    r = _accepted(case14)
    rec = r.record
    pv = int(np.flatnonzero(rec["bus.bus_type"] == BusKind.PV)[0])
    rec.data["bus"]["bus_voltages"][pv, 1] = rec["bus.limits"][pv, 1] + 0.05
    rep = check_constraints(r.network, rec)
    assert "d" in rep.failed


def test_checker_flags_slack_angle(case14):
    r = _accepted(case14)
    rec = r.record
    sl = int(np.flatnonzero(rec["bus.bus_type"] == BusKind.SLACK)[0])
    rec.data["bus"]["bus_voltages"][sl, 0] = 0.01
    assert "f" in check_constraints(r.network, rec).failed


def test_checker_flags_tampered_flow(case14):
    r = _accepted(case14)
    r.record.data["(bus, branch, bus)"]["edge_label"][3, 0] += 0.01
    failed = check_constraints(r.network, r.record).failed
    assert "i" in failed and "h" in failed
