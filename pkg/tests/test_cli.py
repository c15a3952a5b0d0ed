import json

import pytest

from fraccontrol.cli import build_parser, run_cli


def _write(path, text):
    path.write_text(text)
    return str(path)


def _run(argv):
    lines, errs = [], []
    code = run_cli(argv, out=lines.append, err=errs.append)
    return code, lines, errs


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_config_errors_exit_one(tmp_path):
    cfg = _write(tmp_path / "bad.cfg", "mode = convergence\nproblem = manufactured-1d\nmu = -1\n")
    code, _, errs = _run(["convergence", "--config", cfg, "--output", str(tmp_path / "o")])
    assert code == 1 and "field 'mu'" in errs[0]
    code, _, errs = _run(["solve-state", "--config", cfg])
    assert code == 1
    good = _write(tmp_path / "g.cfg", "mode = convergence\nproblem = manufactured-1d\n")
    code, _, errs = _run(["solve-state", "--config", good])
    assert code == 1 and "field 'mode'" in errs[0]
    code, _, _ = _run(["convergence", "--config", str(tmp_path / "none.cfg")])
    assert code == 1
    assert _run(["frobnicate"])[0] == 1


def test_solve_state_outputs(tmp_path):
    cfg = _write(tmp_path / "s.cfg", "mode = solve-state\nproblem = manufactured-1d\nlevels = 0.25\n")
    out = tmp_path / "o"
    code, lines, _ = _run(["solve-state", "--config", cfg, "--output", str(out)])
    assert code == 0
    assert {"state.csv", "mesh.txt", "state.png", "manifest.json"} <= {p.name for p in out.iterdir()}
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["seed"] == 42 and "numpy" in man["versions"]
    assert man["err_state_l2q"] < 0.2
    assert "state.csv" in man["files"]


def test_solve_control_outputs(tmp_path):
    cfg = _write(tmp_path / "c.cfg", "mode = solve-control\nproblem = manufactured-1d\nlevels = 0.25\n"
                 "figures = false\n")
    out = tmp_path / "o"
    code, _, _ = _run(["solve-control", "--config", cfg, "--output", str(out)])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"control.csv", "state.csv", "adjoint.csv", "optimize_log.csv"} <= names
    assert not any(n.endswith(".png") for n in names)


def test_non_convergence_exits_two(tmp_path):
    cfg = _write(tmp_path / "c.cfg", "mode = solve-control\nproblem = manufactured-1d\nlevels = 0.25\n"
                 "max_iter = 1\nopt_tol = 1e-14\nfigures = false\n")
    out = tmp_path / "o"
    code, _, errs = _run(["solve-control", "--config", cfg, "--output", str(out)])
    assert code == 2 and "optimize" in errs[0]
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"


def _study(tmp_path, name):
    cfg = _write(tmp_path / "v.cfg", "mode = convergence\nproblem = manufactured-1d\n"
                 "levels = 0.5, 0.25\ns_values = 0.25, 0.75\n")
    out = tmp_path / name
    assert _run(["convergence", "--config", cfg, "--output", str(out)])[0] == 0
    return out


def test_convergence_outputs_deterministic(tmp_path):
    a, b = _study(tmp_path, "a"), _study(tmp_path, "b")
    for name in ("study.csv", "eoc.txt", "convergence.png", "study_details.csv"):
        assert (a / name).exists()
    head, *rows = (a / "study.csv").read_text().splitlines()
    assert head.split(",")[-1] == "walltime_s" and len(rows) == 4

    def strip(p):
        return [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]

    assert strip(a / "study.csv") == strip(b / "study.csv")
    assert (a / "eoc.txt").read_text() == (b / "eoc.txt").read_text()
    assert sorted(p.name for p in (a / "plotdata").iterdir()) == sorted(p.name for p in (b / "plotdata").iterdir())


def test_check_quick(tmp_path):
    out = tmp_path / "chk"
    code, lines, _ = _run(["check", "--quick", "--output", str(out)])
    assert code == 0
    assert all(line.startswith("[PASS]") for line in lines if line.startswith("["))
    assert (out / "checks.csv").read_text().startswith("check,passed,detail")
