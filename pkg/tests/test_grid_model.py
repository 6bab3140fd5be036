import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridscen.case_io import load_case
from gridscen.grid_model import (Branch, Bus, BusKind, Network, NetworkError, branch_flows,
                                 build_admittance, connected_components, is_connected)
from netgen import random_network

pypower = pytest.importorskip("pypower.api")


@pytest.mark.parametrize("name", ["case14", "case30", "case57", "case118"])
def test_admittance_matches_reference(name):
    ppc = pypower.ext2int(getattr(pypower, name)())
    Yref, _, _ = pypower.makeYbus(ppc["baseMVA"], ppc["bus"], ppc["branch"])
    Y = build_admittance(load_case(name)).Y
    assert abs(Y - Yref).max() < 1e-12


def test_case14_component_counts(case14):
    assert (case14.n_bus, len(case14.generators), len(case14.loads), len(case14.branches)) == (14, 5, 11, 20)
    assert case14.kinds[case14.slack] == BusKind.SLACK


def test_two_slack_buses_rejected():
    with pytest.raises(NetworkError, match=r"\[1, 2\]"):
        Network(100.0, [Bus(0, BusKind.SLACK), Bus(1, BusKind.SLACK)], branches=[Branch(0, 1, 0.01, 0.1)])


def test_zero_impedance_branch_named():
    net = Network(100.0, [Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)],
                  branches=[Branch(0, 1, 0.01, 0.1), Branch(0, 1, 0.0, 0.0)])
    with pytest.raises(NetworkError, match="1"):
        build_admittance(net)


def test_out_of_service_branch_excluded(case14):
    from dataclasses import replace
    brs = list(case14.branches)
    brs[0] = replace(brs[0], in_service=False)
    net = replace(case14, branches=tuple(brs))
    assert len(net.live_branches) == 19
    assert abs(build_admittance(net).Y - build_admittance(case14).Y).max() > 0


def test_islanding_detected():
    net = Network(100.0, [Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ), Bus(2, BusKind.PQ)],
                  branches=[Branch(0, 1, 0.01, 0.1)])
    assert not is_connected(net)
    assert len(set(connected_components(net))) == 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20))
def test_admittance_symmetric_without_phase_shift(seed, n):
    net = random_network(np.random.default_rng(seed), n, shifts=False)
    Y = build_admittance(net).Y
    assert abs(Y - Y.T).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20))
def test_injections_equal_sum_of_branch_flows(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    vm, va = rng.uniform(0.9, 1.1, n), rng.uniform(-0.4, 0.4, n)
    adm = build_admittance(net)
    V = vm * np.exp(1j * va)
    S = V * np.conj(adm.Y @ V)
    fl = branch_flows(net, vm, va, adm)
    br = net.branch_arrays()
    gs, bs = net.shunts()
    p = np.bincount(br.f, fl[:, 0], n) + np.bincount(br.t, fl[:, 2], n) + gs * vm ** 2
    q = np.bincount(br.f, fl[:, 1], n) + np.bincount(br.t, fl[:, 3], n) - bs * vm ** 2
    assert np.allclose(S.real, p, atol=1e-12) and np.allclose(S.imag, q, atol=1e-12)
