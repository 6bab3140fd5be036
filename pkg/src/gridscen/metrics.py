"""Unsupervised scoring: power-balance loss, runtime and interpretability statistics.

Scoring consumes :class:`RecordInputs` (the input half of a record) plus a
prediction; stored labels are only ever read by :func:`labels_as_prediction`.
"""
from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .case_io import BRANCH, DatasetManifest, SampleRecord, load_sample
from .grid_model import BranchArrays, BusKind, admittance_from_arrays


class PredictionError(ValueError):
    pass


class MissingPredictionsError(PredictionError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        super().__init__(f"no prediction for {len(missing)} sample(s): {shown}")


@dataclass(frozen=True)
class RecordInputs:
    bus_type: np.ndarray
    x: np.ndarray
    shunt: np.ndarray
    edge_index: np.ndarray
    edge_attr: np.ndarray

    @classmethod
    def from_record(cls, record: SampleRecord) -> "RecordInputs":
        bus, edges = record.data["bus"], record.data[BRANCH]
        return cls(bus["bus_type"], bus["x"], bus["shunt"], edges["edge_index"], edges["edge_attr"])

    @property
    def n_bus(self) -> int:
        return len(self.bus_type)

    def admittance(self):
        f, t = self.edge_index
        r, x, g_fr, b_fr, g_to, b_to, tap, shift = self.edge_attr.T
        br = BranchArrays(index=np.arange(len(f)), f=f, t=t, r=r, x=x, g_fr=g_fr, b_fr=b_fr,
                          g_to=g_to, b_to=b_to, tap=tap, shift=np.radians(shift))
        return admittance_from_arrays(self.n_bus, br, self.shunt[:, 0], self.shunt[:, 1])


@dataclass(frozen=True)
class CompletedState:
    """Voltages plus net injections at every bus."""

    vm: np.ndarray
    va: np.ndarray
    p_net: np.ndarray
    q_net: np.ndarray
    ds: np.ndarray

    @property
    def mean_ds(self) -> float:
        return float(self.ds.mean()) if self.ds.size else 0.0

    @property
    def max_ds(self) -> float:
        return float(self.ds.max()) if self.ds.size else 0.0


def labels_as_prediction(record: SampleRecord) -> dict:
    bus = record.data["bus"]
    return {"bus_voltages": bus["bus_voltages"], "y": bus["y"]}


def _array(pred: dict, key: str, n: int) -> np.ndarray | None:
    if pred.get(key) is None:
        return None
    try:
        a = np.asarray(pred[key], dtype=float)
    except (TypeError, ValueError):
        raise PredictionError(f"{key}: not a numeric array") from None
    if a.shape != (n, 2):
        raise PredictionError(f"{key}: expected shape ({n}, 2), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise PredictionError(f"{key}: non-finite values")
    return a


def complete(inputs: RecordInputs, prediction: dict) -> CompletedState:
    """Score one prediction against the power-flow equations.

    Known inputs (|v| at PV and slack buses, the slack angle) override the
    prediction.  Free outputs (q at PV buses, p and q at the slack) come from
    the prediction's ``y`` when given, otherwise from the voltages.
    """
    n = inputs.n_bus
    v = _array(prediction, "bus_voltages", n)
    if v is None:
        raise PredictionError("bus_voltages: required")
    y = _array(prediction, "y", n)
    kinds, x = inputs.bus_type, inputs.x
    pq, pv, sl = kinds == BusKind.PQ, kinds == BusKind.PV, kinds == BusKind.SLACK
    va, vm = v[:, 0].copy(), v[:, 1].copy()
    vm[pv] = x[pv, 1]
    va[sl], vm[sl] = x[sl, 0], x[sl, 1]

    V = vm * np.exp(1j * va)
    S = V * np.conj(inputs.admittance().Y @ V)
    p = S.real.copy()
    q = S.imag.copy()
    p[pq], q[pq] = -x[pq, 0], -x[pq, 1]
    p[pv] = x[pv, 0]
    if y is not None:
        q[pv] = y[pv, 0]
        p[sl], q[sl] = y[sl, 0], y[sl, 1]
    ds = np.hypot(p - S.real, q - S.imag)
    return CompletedState(vm=vm, va=va, p_net=p, q_net=q, ds=ds)


def pbl(record: SampleRecord, prediction: dict | None = None) -> tuple[float, float]:
    """(mean, max) of |dS| over buses; defaults to the record's own labels."""
    state = complete(RecordInputs.from_record(record),
                     prediction if prediction is not None else labels_as_prediction(record))
    return state.mean_ds, state.max_ds


def runtime_stat(runtimes, sizes) -> float:
    """Size-weighted mean seconds per sample over batches."""
    runtimes = np.asarray(runtimes, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    if runtimes.shape != sizes.shape or runtimes.size == 0:
        raise ValueError("need matching, nonempty batch runtimes and sizes")
    total = sizes.sum()
    if total <= 0:
        raise ValueError("total batch size is zero")
    return float(np.sum(runtimes * sizes) / total)


# --------------------------------------------------------------------------
# interpretability

BLOCKS = ("pq_vm", "pq_va", "pv_q", "pv_va", "branch_dtheta", "slack_p", "slack_q")


def sample_quantities(inputs: RecordInputs, state: CompletedState) -> dict[str, np.ndarray]:
    kinds = inputs.bus_type
    pq, pv, sl = kinds == BusKind.PQ, kinds == BusKind.PV, kinds == BusKind.SLACK
    f, t = inputs.edge_index
    return {
        "pq_vm": state.vm[pq],
        "pq_va": state.va[pq],
        "pv_q": state.q_net[pv],
        "pv_va": state.va[pv],
        "branch_dtheta": np.abs(state.va[f] - state.va[t]),
        "slack_p": state.p_net[sl],
        "slack_q": state.q_net[sl],
    }


@dataclass
class BlockStats:
    mean: float
    std: float
    min: float
    max: float
    n_samples: int


@dataclass
class InterpretabilityStats:
    blocks: dict[str, BlockStats]
    absent: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"blocks": {k: vars(v) for k, v in self.blocks.items()}, "absent": self.absent}


def interpretability(samples) -> InterpretabilityStats:
    """Aggregate per-sample statistics over a corpus.

    ``samples`` yields quantity dicts (see :func:`sample_quantities`).  Each
    block reports the mean and standard deviation of per-sample means, the
    minimum of per-sample minima and the maximum of per-sample maxima.
    """
    means: dict[str, list[float]] = {b: [] for b in BLOCKS}
    mins: dict[str, list[float]] = {b: [] for b in BLOCKS}
    maxs: dict[str, list[float]] = {b: [] for b in BLOCKS}
    for q in samples:
        for b in BLOCKS:
            vals = np.asarray(q.get(b, ()), dtype=float)
            if vals.size:
                means[b].append(float(vals.mean()))
                mins[b].append(float(vals.min()))
                maxs[b].append(float(vals.max()))
    blocks, absent = {}, []
    for b in BLOCKS:
        if not means[b]:
            absent.append(b)
            continue
        m = np.array(means[b])
        blocks[b] = BlockStats(mean=float(m.mean()), std=float(m.std()), min=min(mins[b]),
                               max=max(maxs[b]), n_samples=len(m))
    return InterpretabilityStats(blocks=blocks, absent=absent)


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvaluationReport:
    per_sample: list[dict]
    groups: dict[str, dict]
    overall: dict
    interpretability: InterpretabilityStats
    runtime: float | None = None
    hardware: str = ""

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "groups": self.groups,
            "runtime_seconds_per_sample": self.runtime,
            "hardware": self.hardware,
            "interpretability": self.interpretability.to_dict(),
            "per_sample": self.per_sample,
        }

    def summary(self) -> str:
        lines = [f"{'regime':<24}{'topology':<10}{'n':>6}{'PBL mean':>14}{'PBL max':>14}"]
        for key, g in self.groups.items():
            regime, topo = key.split("/")
            lines.append(f"{regime:<24}{topo:<10}{g['n']:>6}{g['pbl_mean']:>14.3e}{g['pbl_max']:>14.3e}")
        o = self.overall
        lines.append(f"{'all':<34}{o['n']:>6}{o['pbl_mean']:>14.3e}{o['pbl_max']:>14.3e}")
        if self.runtime is not None:
            lines.append(f"runtime: {self.runtime:.3e} s/sample ({self.hardware})")
        lines.append("")
        lines.append(f"{'quantity':<16}{'mean':>12}{'std':>12}{'min':>12}{'max':>12}")
        for name, s in self.interpretability.blocks.items():
            lines.append(f"{name:<16}{s.mean:>12.4f}{s.std:>12.4f}{s.min:>12.4f}{s.max:>12.4f}")
        for name in self.interpretability.absent:
            lines.append(f"{name:<16}{'absent':>12}")
        return "\n".join(lines)


def _aggregate(rows: list[dict]) -> dict:
    means = np.array([r["mean_ds"] for r in rows])
    maxs = np.array([r["max_ds"] for r in rows])
    return {"n": len(rows), "pbl_mean": float(means.mean()), "pbl_max": float(maxs.mean()),
            "pbl_worst": float(maxs.max())}


def hardware_tag() -> str:
    return f"cpu:{platform.machine() or 'unknown'}"


def manifest_entries(manifest: DatasetManifest, split: str | None = "test") -> list[dict]:
    return [{"id": Path(p).stem, "path": p, "regime": c.regime, "topology": c.topology}
            for c in manifest.cells if split is None or c.split == split for p in c.paths]


def load_predictions(path: str | Path) -> tuple[dict[str, dict], dict]:
    """Read predictions from a directory of ``<id>.json`` files or one container file.

    A container holds ``{"predictions": {id: {...}}, "runtime": {...}}``.
    Returns the predictions by id and any runtime block.
    """
    p = Path(path)
    if p.is_dir():
        return {f.stem: json.loads(f.read_text()) for f in sorted(p.glob("*.json"))}, {}
    doc = json.loads(p.read_text())
    if "predictions" not in doc:
        raise PredictionError(f"{p}: container lacks a 'predictions' mapping")
    return doc["predictions"], doc.get("runtime", {})


def evaluate_predictions(entries: list[dict], predictions: dict[str, dict],
                         runtime: dict | None = None, hardware: str | None = None) -> EvaluationReport:
    """Score predictions for every entry (``id``, ``path``, ``regime``, ``topology``)."""
    missing = [e["id"] for e in entries if e["id"] not in predictions]
    if missing:
        raise MissingPredictionsError(missing)
    rows, quantities = [], []
    for e in entries:
        inputs = RecordInputs.from_record(load_sample(e["path"]))
        try:
            state = complete(inputs, predictions[e["id"]])
        except PredictionError as exc:
            raise PredictionError(f"{e['id']}: {exc}") from None
        rows.append({"id": e["id"], "regime": e["regime"], "topology": e["topology"],
                     "mean_ds": state.mean_ds, "max_ds": state.max_ds})
        quantities.append(sample_quantities(inputs, state))
    if not rows:
        raise PredictionError("nothing to evaluate")
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(f"{r['regime']}/{r['topology']}", []).append(r)
    rt = None
    if runtime and runtime.get("batches"):
        batches = runtime["batches"]
        rt = runtime_stat([b["seconds"] for b in batches], [b["size"] for b in batches])
    return EvaluationReport(
        per_sample=rows,
        groups={k: _aggregate(v) for k, v in sorted(groups.items())},
        overall=_aggregate(rows),
        interpretability=interpretability(quantities),
        runtime=rt,
        hardware=hardware or (runtime or {}).get("hardware") or hardware_tag(),
    )
