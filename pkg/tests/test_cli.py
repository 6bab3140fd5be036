import json

import numpy as np
import pytest

from gridscen.case_io import load_sample
from gridscen.cli import EXIT_DATA, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_case14(capsys):
    code, out, _ = _run(capsys, "solve", "--case", "case14")
    doc = json.loads(out)
    assert code == EXIT_OK and doc["converged"] and doc["max_ds"] <= 1e-8


def test_solve_failure_exit_code(capsys, tmp_path):
    from gridscen.case_io import emit_matpower, load_case
    from gridscen.scenario import with_loads
    net = load_case("case14")
    heavy = with_loads(net, [ld.pd * 8 for ld in net.loads], [ld.qd * 8 for ld in net.loads])
    path = tmp_path / "heavy.m"
    path.write_text(emit_matpower(heavy))
    code, _, err = _run(capsys, "solve", "--case", str(path), "--out", str(tmp_path / "o.json"))
    assert code == EXIT_SOLVER and json.loads(err)["error"] == "solver"


def test_parse_report(capsys):
    code, out, _ = _run(capsys, "parse", "--case", "case30")
    assert code == EXIT_OK and json.loads(out)["buses"] == 30


def test_missing_case_is_data_error(capsys):
    code, _, err = _run(capsys, "parse", "--case", "no_such_case.m")
    assert code == EXIT_DATA and "error" in json.loads(err)


def test_unknown_task_lists_ids(capsys, tmp_path):
    code, _, err = _run(capsys, "manifest", "--corpus", str(tmp_path), "--task", "7.7")
    msg = json.loads(err)["message"]
    assert code == EXIT_USAGE and "1.1" in msg and "4.3" in msg


def test_generate_requires_seed(capsys, tmp_path):
    code, _, _ = _run(capsys, "generate", "--case", "case14", "--out", str(tmp_path / "c"))
    assert code == EXIT_USAGE


def test_generate_twice_byte_identical(capsys, tmp_path):
    for name in ("a", "b"):
        assert _run(capsys, "generate", "--case", "case14", "--seed", "4", "--samples", "12",
                    "--out", str(tmp_path / name))[0] == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_env_output_root(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("GRIDSCEN_OUT", str(tmp_path))
    code, _, _ = _run(capsys, "generate", "--case", "case14", "--seed", "2", "--samples", "3")
    assert code == EXIT_OK and (tmp_path / "corpus-case14-s2" / "corpus.json").exists()


def test_manifest_check_evaluate(capsys, small_corpus, tmp_path):
    root, index = small_corpus
    mpath = tmp_path / "m.json"
    code, _, _ = _run(capsys, "manifest", "--corpus", str(root), "--task", "4.2", "--scale", "0.0001",
                      "--bus-size", "14", "--out", str(mpath))
    assert code == EXIT_OK and json.loads(mpath.read_text())["task"] == "4.2"

    rec_path = root / index["samples"][0]["path"]
    code, out, _ = _run(capsys, "check", "--case", "case14", "--record", str(rec_path))
    assert code == EXIT_OK and json.loads(out)["passed"]

    preds = {e["id"]: {"bus_voltages": load_sample(root / e["path"])["bus.bus_voltages"].tolist()}
             for e in index["samples"]}
    ppath = tmp_path / "preds.json"
    ppath.write_text(json.dumps({"predictions": preds}))
    code, out, _ = _run(capsys, "evaluate", "--corpus", str(root), "--predictions", str(ppath),
                        "--out", str(tmp_path / "eval.json"))
    report = json.loads((tmp_path / "eval.json").read_text())
    assert code == EXIT_OK and report["overall"]["pbl_worst"] <= 1e-8 and "PBL" in out


def test_cpf_writes_cases(capsys, tmp_path):
    code, _, _ = _run(capsys, "cpf", "--case", "case14", "--out", str(tmp_path / "cpf"))
    names = sorted(p.name for p in (tmp_path / "cpf").iterdir())
    assert code == EXIT_OK and "path.json" in names and len(names) == 6
