"""Corpus generation on disk.

Scenario ``i`` always draws from the stream seeded by ``(seed, i)``; attempts
are evaluated in index-ordered chunks and the first ``n`` accepted indices are
kept, so the written corpus does not depend on the worker count.
"""
from __future__ import annotations

import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .balance import complete_solution
from .case_io import write_sample
from .cpf import BaseCaseError, CPFStatus, extract_cases, scaled_spec, trace
from .grid_model import Network
from .scenario import check_constraints, generate_sample

INDEX_FILE = "corpus.json"
REJECTIONS_FILE = "rejections.jsonl"
SAMPLES_DIR = "samples"
NOSE_FACTOR = 2.5


@dataclass(frozen=True)
class CorpusOptions:
    load_method: str = "polytope"
    tol: float = 1e-8
    check_tol: float = 1e-6
    nose_traces: int = 0
    nose_factor: float = NOSE_FACTOR
    chunk: int = 64
    max_attempts: int | None = None


_worker: dict = {}


def _init(net: Network, seed: int, options: CorpusOptions):
    _worker.update(net=net, seed=seed, options=options)


def _attempt(index: int) -> dict:
    net, seed, o = _worker["net"], _worker["seed"], _worker["options"]
    res = generate_sample(net, seed, index, o.load_method, o.tol, o.check_tol)
    if res.accepted:
        return {"index": index, "id": res.sample_id, "topology": res.event.topology,
                "json": res.record.to_json()}
    return {"index": index, "id": res.sample_id, "rejection": res.rejection(seed, index)}


def _nose_records(index: int) -> dict:
    """Trace the nose curve of accepted scenario ``index``; return its hard cases."""
    net, seed, o = _worker["net"], _worker["seed"], _worker["options"]
    res = generate_sample(net, seed, index, o.load_method, o.tol, o.check_tol)
    out = {"index": index, "records": [], "rejections": []}
    spec = scaled_spec(res.network, o.nose_factor, corrector_tol=o.tol)
    try:
        path = trace(res.network, spec)
    except BaseCaseError as exc:
        out["rejections"].append({"sample_id": res.sample_id, "reason": f"continuation: {exc}"})
        return out
    if path.status != CPFStatus.NOSE_FOUND:
        out["rejections"].append({"sample_id": res.sample_id,
                                  "reason": f"continuation ended without a nose: {path.message}"})
        return out
    cases = extract_cases(res.network, spec, path)
    labeled = [("close-to-infeasible", f"{res.sample_id}-nose", cases.close_to_infeasible)]
    n = len(cases.approaching)
    labeled += [("approaching-infeasible", f"{res.sample_id}-a{n - k}", c) for k, c in enumerate(cases.approaching)]
    for regime, sid, (cnet, state, lam) in labeled:
        provenance = {"sample_id": sid, "case": net.name, "seed": seed, "index": index,
                      "event": res.event.to_dict(), "regime": regime, "topology": res.event.topology,
                      "load_method": o.load_method, "parent": res.sample_id, "lambda": float(lam)}
        record = write_sample(cnet, complete_solution(cnet, state), provenance)
        report = check_constraints(cnet, record, o.check_tol)
        if not report.passed:
            out["rejections"].append({"sample_id": sid,
                                      "reason": "constraint violation: " + ",".join(report.failed)})
            continue
        out["records"].append({"id": sid, "regime": regime, "topology": res.event.topology,
                               "json": record.to_json()})
    return out


def _map(fn, items, workers: int, net, seed, options):
    if workers <= 1:
        _init(net, seed, options)
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init,
                             initargs=(net, seed, options)) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def generate_corpus(net: Network, out_dir: str | Path, seed: int, n_samples: int,
                    workers: int = 1, options: CorpusOptions | None = None,
                    overwrite: bool = False) -> dict:
    """Write ``n_samples`` feasible records (plus optional nose-curve cases) to ``out_dir``."""
    options = options or CorpusOptions()
    out = Path(out_dir)
    if (out / INDEX_FILE).exists():
        if not overwrite:
            raise FileExistsError(f"{out / INDEX_FILE} exists; refusing to overwrite")
        shutil.rmtree(out / SAMPLES_DIR, ignore_errors=True)
    (out / SAMPLES_DIR).mkdir(parents=True, exist_ok=True)
    budget = options.max_attempts if options.max_attempts is not None else 20 * n_samples + 100

    accepted: list[dict] = []
    rejections: list[dict] = []
    next_index = 0
    while len(accepted) < n_samples and next_index < budget:
        stop = min(next_index + max(options.chunk, workers), budget)
        for r in _map(_attempt, list(range(next_index, stop)), workers, net, seed, options):
            if len(accepted) >= n_samples:
                break
            if "json" in r:
                accepted.append(r)
            else:
                rejections.append(r["rejection"])
        next_index = stop

    entries = []

    def emit(sid: str, regime: str, topology: str, text: str):
        rel = f"{SAMPLES_DIR}/{sid}.json"
        (out / rel).write_text(text)
        entries.append({"id": sid, "path": rel, "bus_size": net.n_bus, "regime": regime,
                        "topology": topology, "case": net.name})

    for r in accepted:
        emit(r["id"], "feasible", r["topology"], r["json"])
    traced = [r["index"] for r in accepted[:options.nose_traces]]
    for r in _map(_nose_records, traced, workers, net, seed, options):
        for rec in r["records"]:
            emit(rec["id"], rec["regime"], rec["topology"], rec["json"])
        rejections.extend(r["rejections"])

    index = {
        "case": net.name,
        "bus_size": net.n_bus,
        "seed": seed,
        "load_method": options.load_method,
        "requested": n_samples,
        "accepted": len(accepted),
        "attempts": accepted[-1]["index"] + 1 if len(accepted) == n_samples and accepted else next_index,
        "nose_traces": len(traced),
        "samples": entries,
    }
    (out / INDEX_FILE).write_text(json.dumps(index, indent=1) + "\n")
    with open(out / REJECTIONS_FILE, "w") as fh:
        for rej in rejections:
            fh.write(json.dumps(rej, sort_keys=True) + "\n")
    return index


def load_corpus(path: str | Path) -> tuple[dict, Path]:
    """Read a corpus index; returns the index and its root directory."""
    p = Path(path)
    root = p if p.is_dir() else p.parent
    index_path = root / INDEX_FILE if p.is_dir() else p
    return json.loads(index_path.read_text()), root


def merge_indexes(indexes: list[tuple[dict, Path]]) -> list[dict]:
    """Entries of several corpora with paths resolved against each root."""
    entries = []
    for index, root in indexes:
        for e in index["samples"]:
            entries.append({**e, "path": str(root / e["path"])})
    return entries
