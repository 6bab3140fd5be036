from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from gridscen.case_io import DatasetManifest
from gridscen.manifest import TASKS, ManifestError, ShortfallError, build_manifest, scaled_counts


def _train_totals(m, key):
    out = {}
    for c in m.cells:
        if c.split == "train":
            out[getattr(c, key)] = out.get(getattr(c, key), 0) + c.count
    return out


def test_task_11_recipe():
    m = build_manifest([], "1.1", bus_size=14)
    train = {c.topology for c in m.cells if c.split == "train"}
    test = {(c.regime, c.topology) for c in m.cells if c.split == "test"}
    assert train == {"N"}
    assert {t for _, t in test} == {"N", "N-1", "N-2"}
    assert ("close-to-infeasible", "N") in test


def test_task_42_mix():
    m = build_manifest([], "4.2", bus_size=30)
    assert _train_totals(m, "regime") == {"feasible": 27000, "close-to-infeasible": 5400,
                                          "approaching-infeasible": 21600}


def test_task_12_even_topologies():
    assert _train_totals(build_manifest([], "1.2", bus_size=14), "topology") == {"N": 27000, "N-1": 27000}


def test_test_split_counts():
    m = build_manifest([], "2.2", bus_size=57)
    test = {(c.regime, c.topology): c.count for c in m.cells if c.split == "test"}
    assert test[("feasible", "N-1")] == 2000 and test[("close-to-infeasible", "N-2")] == 200


def test_task_31_tests_other_sizes():
    m = build_manifest([], "3.1", bus_size=30)
    assert {c.bus_size for c in m.cells if c.split == "train"} == {30}
    assert {c.bus_size for c in m.cells if c.split == "test"} == {14, 57, 118, 500}


def test_task_32_fixed_sizes():
    m = build_manifest([], "3.2")
    assert {c.bus_size for c in m.cells if c.split == "test"} == {118, 500}


def test_unknown_task_lists_ids():
    with pytest.raises(ManifestError, match="4.3"):
        build_manifest([], "5.1", bus_size=14)


def test_bus_size_required():
    with pytest.raises(ManifestError):
        build_manifest([], "1.1")
    with pytest.raises(ManifestError):
        build_manifest([], "1.1", bus_size=2000)


@settings(max_examples=80, deadline=None)
@given(task=st.sampled_from(sorted(TASKS)), scale=st.floats(1e-4, 2.0))
def test_ratios_exact_under_scaling(task, scale):
    size = None if task in ("3.2", "3.3") else 14
    full = build_manifest([], task, 1.0, bus_size=size).counts()
    scaled = build_manifest([], task, scale, bus_size=size).counts()
    assert full.keys() == scaled.keys()
    ratios = {Fraction(scaled[k], full[k]) for k in full}
    assert len(ratios) == 1 and all(v > 0 for v in scaled.values())


def test_scale_hundredth_is_exact():
    assert scaled_counts([54000, 5400, 2000, 200], 0.01) == [540, 54, 20, 2]


def _synthetic(n_per_cell):
    entries = []
    for regime in ("feasible", "close-to-infeasible", "approaching-infeasible"):
        for topo in ("N", "N-1", "N-2"):
            for i in range(n_per_cell):
                sid = f"{regime}-{topo}-{i:04d}"
                entries.append({"id": sid, "path": f"s/{sid}.json", "bus_size": 14,
                                "regime": regime, "topology": topo})
    return entries


def test_paths_fill_cells_without_overlap():
    m = build_manifest(_synthetic(400), "4.2", 0.005, bus_size=14)
    assert not m.shortfall
    assert all(len(c.paths) == c.count for c in m.cells)
    train = {p for c in m.cells if c.split == "train" for p in c.paths}
    test = {p for c in m.cells if c.split == "test" for p in c.paths}
    assert not train & test


def test_shortfall_reported_and_strict():
    m = build_manifest(_synthetic(3), "1.1", 0.01, bus_size=14)
    assert m.shortfall and all(s["available"] < s["requested"] for s in m.shortfall)
    with pytest.raises(ShortfallError):
        build_manifest(_synthetic(3), "1.1", 0.01, bus_size=14, strict=True)


def test_manifest_json_roundtrip():
    m = build_manifest(_synthetic(50), "4.1", 0.005, bus_size=14)
    back = DatasetManifest.from_json(m.to_json())
    assert back.counts() == m.counts() and back.cells[0].paths == m.cells[0].paths
