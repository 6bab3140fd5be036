"""Command-line front end: ``gridscen <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 solver failure, 4 data error.
Errors are written to stderr as a single JSON object.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .balance import complete_solution
from .case_io import CaseFormatError, RecordError, load_case, load_sample, save_sample, write_sample
from .corpus import CorpusOptions, generate_corpus, load_corpus, merge_indexes
from .cpf import BaseCaseError, CPFStatus, DegenerateSpecError, extract_cases, scaled_spec, trace
from .grid_model import NetworkError, is_connected
from .manifest import TASKS, ManifestError, ShortfallError, build_manifest
from .metrics import PredictionError, evaluate_predictions, load_predictions, manifest_entries
from .pf_newton import SolveOptions, solve
from .scenario import check_constraints

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_DATA = 0, 2, 3, 4
OUT_ENV = "GRIDSCEN_OUT"


class UsageError(Exception):
    pass


class SolverFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(args, default_name: str | None) -> Path | None:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if root and default_name:
        return Path(root) / default_name
    return None


def _emit(doc, args, default_name: str | None = None, text: str | None = None) -> None:
    payload = json.dumps(doc, indent=1, default=_jsonable)
    path = _out_path(args, default_name)
    if path is None:
        print(text if text is not None else payload)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(payload + "\n")
    if text is not None:
        print(text)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _case_stem(spec: str) -> str:
    return Path(spec).stem


# --------------------------------------------------------------------------
# commands

def cmd_parse(args) -> int:
    net = load_case(args.case)
    _emit({
        "case": net.name,
        "base_mva": net.base_mva,
        "buses": net.n_bus,
        "generators": len(net.generators),
        "live_generators": len(net.live_generators),
        "loads": len(net.loads),
        "branches": len(net.branches),
        "live_branches": len(net.live_branches),
        "slack_bus": int(net.bus_ids[net.slack]),
        "pv_buses": len(net.pv),
        "pq_buses": len(net.pq),
        "connected": is_connected(net),
    }, args, f"{_case_stem(args.case)}.parse.json")
    return EXIT_OK


def cmd_solve(args) -> int:
    net = load_case(args.case)
    out = solve(net, SolveOptions(tol=args.tol, max_iter=args.max_iter))
    _emit({
        "case": net.name,
        "converged": out.converged,
        "iterations": out.iterations,
        "max_ds": out.final_mismatch.max_ds,
        "mean_ds": out.final_mismatch.mean_ds,
        "wall_time": out.wall_time,
        "reason": out.reason,
        "step_norms": out.step_norms,
        "vm": out.state.vm,
        "va": out.state.va,
    }, args, f"{_case_stem(args.case)}.solve.json")
    if not out.converged:
        raise SolverFailure(f"power flow did not converge: {out.reason}")
    return EXIT_OK


def cmd_cpf(args) -> int:
    net = load_case(args.case)
    spec = scaled_spec(net, args.factor, corrector_tol=args.tol, stop_at=args.stop_at)
    path = trace(net, spec)
    bus = net.bus_ids.index(args.bus) if args.bus is not None else int(net.pq[0] if len(net.pq) else 0)
    doc = {
        "case": net.name,
        "status": path.status.value,
        "message": path.message,
        "nose_index": path.nose_index,
        "bus": int(net.bus_ids[bus]),
        "columns": ["lambda", "vm", "condition"],
        "table": path.table(bus),
    }
    out_dir = _out_path(args, f"{_case_stem(args.case)}-cpf")
    if path.status == CPFStatus.NOSE_FOUND and out_dir is not None:
        cases = extract_cases(net, spec, path)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        labeled = [("close-to-infeasible", "nose", cases.close_to_infeasible)]
        n = len(cases.approaching)
        labeled += [("approaching-infeasible", f"a{n - k}", c) for k, c in enumerate(cases.approaching)]
        for regime, tag, (cnet, state, lam) in labeled:
            rec = write_sample(cnet, complete_solution(cnet, state),
                               {"sample_id": f"{net.name}-{tag}", "case": net.name, "regime": regime,
                                "topology": "N", "lambda": float(lam)})
            save_sample(rec, out_dir / f"{net.name}-{tag}.json")
            written.append(f"{net.name}-{tag}.json")
        doc["cases"] = written
        (out_dir / "path.json").write_text(json.dumps(doc, indent=1, default=_jsonable) + "\n")
    else:
        print(json.dumps(doc, indent=1, default=_jsonable))
    if path.status == CPFStatus.FAILED:
        raise SolverFailure(f"continuation failed: {path.message}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.seed is None:
        raise UsageError("generate requires --seed")
    net = load_case(args.case)
    out = _out_path(args, f"corpus-{net.name}-s{args.seed}")
    if out is None:
        raise UsageError(f"generate requires --out or ${OUT_ENV}")
    opts = CorpusOptions(load_method=args.load_method, tol=args.tol, nose_traces=args.nose_traces,
                         max_attempts=args.max_attempts)
    index = generate_corpus(net, out, args.seed, args.samples, args.workers, opts, overwrite=args.overwrite)
    summary = {k: v for k, v in index.items() if k != "samples"}
    summary["records"] = len(index["samples"])
    summary["out"] = str(out)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_manifest(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; valid ids: {', '.join(TASKS)}")
    if not args.corpus:
        raise UsageError("manifest requires at least one --corpus")
    entries = merge_indexes([load_corpus(c) for c in args.corpus])
    manifest = build_manifest(entries, args.task, args.scale, args.bus_size, strict=args.strict)
    path = _out_path(args, f"manifest-{args.task}.json")
    if path is None:
        print(manifest.to_json())
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.to_json() + "\n")
    if manifest.shortfall:
        print(json.dumps({"warning": "shortfall", "cells": manifest.shortfall}), file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .case_io import DatasetManifest
    if bool(args.manifest) == bool(args.corpus):
        raise UsageError("evaluate needs exactly one of --manifest or --corpus")
    if args.manifest:
        manifest = DatasetManifest.from_json(Path(args.manifest).read_text())
        entries = manifest_entries(manifest, None if args.split == "all" else args.split)
    else:
        entries = merge_indexes([load_corpus(c) for c in args.corpus])
    preds, runtime = load_predictions(args.predictions)
    report = evaluate_predictions(entries, preds, runtime, args.hardware)
    _emit(report.to_dict(), args, "evaluation.json", text=report.summary())
    return EXIT_OK


def cmd_check(args) -> int:
    net = load_case(args.case)
    record = load_sample(args.record)
    report = check_constraints(net, record, args.tol)
    _emit(report.to_dict(), args, f"{Path(args.record).stem}.check.json")
    return EXIT_OK if report.passed else EXIT_DATA


COMMANDS = {
    "parse": cmd_parse, "solve": cmd_solve, "cpf": cmd_cpf, "generate": cmd_generate,
    "manifest": cmd_manifest, "evaluate": cmd_evaluate, "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridscen", description="Power-flow scenario generation and scoring.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, case=True, tol=None):
        s = sub.add_parser(name, help=help_)
        if case:
            s.add_argument("--case", required=True, help="MATPOWER file or builtin name (case14, ...)")
        if tol is not None:
            s.add_argument("--tol", type=float, default=tol)
        s.add_argument("--out", help=f"output path (default: under ${OUT_ENV}, else stdout)")
        return s

    add("parse", "validate a case file")
    s = add("solve", "Newton power flow from flat start", tol=1e-8)
    s.add_argument("--max-iter", type=int, default=30)
    s = add("cpf", "trace the nose curve", tol=1e-8)
    s.add_argument("--factor", type=float, default=2.5, help="target injections as a multiple of base")
    s.add_argument("--stop-at", choices=("nose", "target"), default="nose")
    s.add_argument("--bus", type=int, help="bus id whose |v| is tabulated")
    s = add("generate", "generate a labeled corpus", tol=1e-8)
    s.add_argument("--seed", type=int)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--load-method", choices=("polytope", "box"), default="polytope")
    s.add_argument("--nose-traces", type=int, default=0, help="scenarios to push to the nose")
    s.add_argument("--max-attempts", type=int)
    s.add_argument("--overwrite", action="store_true")
    s = add("manifest", "build a task manifest", case=False)
    s.add_argument("--corpus", action="append", default=[], help="corpus directory (repeatable)")
    s.add_argument("--task", required=True)
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--bus-size", type=int)
    s.add_argument("--strict", action="store_true", help="fail on any shortfall")
    s = add("evaluate", "score prediction files", case=False)
    s.add_argument("--corpus", action="append", default=[])
    s.add_argument("--manifest")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--predictions", required=True, help="directory of <id>.json or a container file")
    s.add_argument("--hardware", help="hardware tag reported with runtimes")
    s = add("check", "check a record against the constraint set", tol=1e-6)
    s.add_argument("--record", required=True)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (SolverFailure, BaseCaseError) as exc:
        return _fail(EXIT_SOLVER, "solver", str(exc))
    except ShortfallError as exc:
        return _fail(EXIT_DATA, "shortfall", str(exc), cells=exc.shortfall)
    except ManifestError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except CaseFormatError as exc:
        return _fail(EXIT_DATA, "case", str(exc), line=exc.lineno)
    except RecordError as exc:
        return _fail(EXIT_DATA, "record", str(exc), key=exc.key)
    except (NetworkError, PredictionError, DegenerateSpecError, FileNotFoundError, FileExistsError,
            json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
