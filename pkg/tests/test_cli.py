import hashlib
import json

import pytest

from ldcontrol import cli

LAPLACE = """
[problem]
preset = "laplacian"

[grid]
h = 0.0625
"""

SEMIGROUP = """
[problem]
preset = "two_drift"

[grid]
h = 0.125
lo = [-1.0, -1.0]
hi = [1.0, 1.0]

[semigroup]
t = 0.1
s = 0.0
dt = 0.05
terminal = "x1"
"""


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_solve_elliptic_writes_checked_manifest(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.run(["solve-elliptic", "--config", _write(tmp_path, LAPLACE), "--out", str(out)])
    assert code == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["checks"] == {"converged": True, "closed_form": True}
    assert m["pass"]
    for name, digest in m["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert "closed_form: PASS" in capsys.readouterr().out


def test_zero_split_semigroup_passes(tmp_path):
    out = tmp_path / "out"
    code = cli.run(["check-semigroup", "--config", _write(tmp_path, SEMIGROUP), "--out",
                    str(out)])
    assert code == 0
    assert json.loads((out / "semigroup.json").read_text())["gap"] == 0.0


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, LAPLACE + "\n[mc]\npaths = 3\n")
    assert cli.run(["value-mc", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "line" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert cli.run(["no-such-command", "--out", str(tmp_path)]) == 2
    assert cli.run(["solve-elliptic", "--out", str(tmp_path), "--threads", "0"]) == 2
    assert cli.run(["solve-elliptic", "--config", str(tmp_path / "missing.toml"), "--out",
                    str(tmp_path)]) == 2


def test_internal_error_exits_3(tmp_path, monkeypatch):
    def boom(*args):
        raise RuntimeError("boom")
    monkeypatch.setitem(cli.COMMANDS, "stability", boom)
    assert cli.run(["stability", "--out", str(tmp_path)]) == 3


def test_failed_check_exits_1(tmp_path, monkeypatch):
    def failing(cfg, run, seed, threads):
        run.check("always", False)
    monkeypatch.setitem(cli.COMMANDS, "stability", failing)
    assert cli.run(["stability", "--out", str(tmp_path)]) == 1


def test_same_seed_same_outputs(tmp_path):
    cfg = _write(tmp_path, LAPLACE + "\n[mc]\nn_paths = 300\ndt = 0.01\nx0 = [[0.2, 0.1]]\n")
    for d in ("a", "b"):
        assert cli.run(["value-mc", "--config", cfg, "--out", str(tmp_path / d),
                        "--seed", "5"]) == 0
    a = cli.manifest_without_timing(tmp_path / "a" / "manifest.json")
    b = cli.manifest_without_timing(tmp_path / "b" / "manifest.json")
    assert a == b
    assert a["seed"] == 5


def test_timing_is_kept_out_of_result_files(tmp_path):
    out = tmp_path / "out"
    cli.run(["solve-elliptic", "--config", _write(tmp_path, LAPLACE), "--out", str(out)])
    report = json.loads((out / "report.json").read_text())
    assert "wall_time" not in report
    timing = json.loads((out / "manifest.json").read_text())["timing"]
    assert any("wall_time" in k for k in timing)


@pytest.mark.parametrize("command", ["solve-discounted", "estimate-holder", "boundary-modulus",
                                     "counterexample"])
def test_other_subcommands_run(tmp_path, command):
    text = """
[problem]
preset = "identity"

[grid]
h = 0.125
lo = [-1.0, -1.0]
hi = [1.0, 1.0]

[holder]
times = [0.0, 0.1]
dt = 0.02
scales = [0.5, 0.375, 0.25]

[boundary]
radii = [0.25, 0.5]

[counterexample]
truncations = [10.0, 100.0]
n_paths = 100
dt = 0.001
horizon = 0.1
"""
    if command == "solve-discounted":
        text = text.replace('preset = "identity"', 'preset = "capped_quadratic"')
    code = cli.run([command, "--config", _write(tmp_path, text), "--out", str(tmp_path / "o")])
    assert code in (0, 1)
    assert (tmp_path / "o" / "manifest.json").exists()
