import json
import math
import os
import subprocess
import sys
from pathlib import Path

import pytest

import gaussflow
from gaussflow import cli
from gaussflow.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(argv):
    return cli.main([str(a) for a in argv])


def write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


SIM = """\
experiment = simulate
d = 1
drift = linear:-1
diffusions = constant:1
T = 0.5
N = 50
seed = 4
x = 0.3
"""


# --- fields list


def test_fields_list(capsys):
    assert run(["fields", "list"]) == 0
    out = capsys.readouterr().out
    lines = {ln.split()[0]: ln for ln in out.splitlines()[1:]}
    assert {"constant", "linear", "rotation", "power-alpha", "osgood", "sine"} <= set(lines)
    assert lines["rotation"].split()[2] == "1"
    assert "{0}" in lines["power-alpha"] or "origin" in lines["power-alpha"]
    assert "4.4" in lines["osgood"] or "log" in lines["osgood"]


# --- running experiments


def test_zero_density_ones(tmp_path):
    out = tmp_path / "zero"
    assert run(["density", CONFIGS / "zero_density.cfg", "-o", out]) == 0
    header, rows = cli.read_table(out / "density.csv")
    assert header[:2] == ["y", "K"]
    assert [float(r[1]) for r in rows] == [1.0] * 9
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_code"] == 0 and man["version"] == gaussflow.__version__
    assert set(man["outputs"]) == {"density.csv"}


def test_divergent_condition_exit_2(tmp_path):
    out = tmp_path / "cond"
    assert run(["bounds", CONFIGS / "condition_divergent.cfg", "-o", out]) == 2
    header, rows = cli.read_table(out / "condition.csv")
    assert rows[0][header.index("status")] == "divergent"
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 2


def test_simulate_table(tmp_path):
    cfg = write(tmp_path, SIM)
    assert run(["simulate", cfg, "-o", tmp_path / "a"]) == 0
    header, rows = cli.read_table(tmp_path / "a" / "trajectory.csv")
    assert header == ["t", "x", "ito_sum", "phi_sum"]
    assert len(rows) == 51 and float(rows[0][1]) == 0.3 and float(rows[-1][0]) == 0.5


def test_byte_identical_reruns(tmp_path):
    cfg = write(tmp_path, SIM)
    run(["run", cfg, "-o", tmp_path / "a"])
    run(["run", cfg, "-o", tmp_path / "b"])
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_parallelism_does_not_change_bytes(tmp_path, monkeypatch):
    text = """\
experiment = moments
d = 1
drift = constant:0
diffusions = constant:1
T = 0.1
N = 20
p = 2
paths = 150
initials = 8
seed = 9
"""
    cfg = write(tmp_path, text)
    outs = []
    for width in ("1", "4"):
        monkeypatch.setenv("GAUSSFLOW_PARALLELISM", width)
        run(["density", cfg, "-o", tmp_path / width])
        outs.append((tmp_path / width / "moments.csv").read_bytes())
    assert outs[0] == outs[1]


def test_csv_floats_round_trip(tmp_path):
    cfg = write(tmp_path, SIM)
    run(["simulate", cfg, "-o", tmp_path / "a"])
    _, rows = cli.read_table(tmp_path / "a" / "trajectory.csv")
    for r in rows:
        for cell in r:
            assert repr(float(cell)) == cell


def test_set_override(tmp_path):
    cfg = write(tmp_path, SIM)
    assert run(["simulate", cfg, "-o", tmp_path / "a", "--set", "N=10", "--set", "x=1.5"]) == 0
    _, rows = cli.read_table(tmp_path / "a" / "trajectory.csv")
    assert len(rows) == 11 and float(rows[0][1]) == 1.5
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["overrides"] == {"N": "10", "x": "1.5"}
    assert run(["simulate", cfg, "--set", "N"]) == 1


def test_output_dir_created(tmp_path):
    out = tmp_path / "deep" / "er"
    assert run(["simulate", write(tmp_path, SIM), "-o", out]) == 0
    assert (out / "manifest.json").exists()


def test_alias_rejects_foreign_experiment(tmp_path, capsys):
    assert run(["maximal", write(tmp_path, SIM), "-o", tmp_path / "a"]) == 1
    assert "maximal" in capsys.readouterr().err
    assert not (tmp_path / "a" / "manifest.json").exists()


# --- malformed configs


@pytest.mark.parametrize(
    "text,needle",
    [
        ("experiment = simulate\nd = 1\nbogus = 3\n", "exp.cfg:3:"),
        ("experiment = simulate\nd 1\n", "exp.cfg:2:"),
        ("experiment = simulate\nd = 1\nd = 2\n", "exp.cfg:3:"),
        ("experiment = simulate\nd = one\n", "exp.cfg:2:"),
        ("experiment = simulate\nd = 1\ndrift = nosuch:1\n", "nosuch"),
        ("experiment = simulate\nd = 1\nN = 0\n", "N"),
        ("experiment = teleport\n", "teleport"),
    ],
)
def test_malformed_config(tmp_path, capsys, text, needle):
    assert run(["run", write(tmp_path, text), "-o", tmp_path / "a"]) == 1
    assert needle in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert run(["run", tmp_path / "none.cfg"]) == 1


def test_parse_config_direct():
    cfg = parse_config("experiment = bounds\nd = 2\ndrift = rotation\n# note\n\nT = 0.5\n", "<text>")
    assert cfg["d"] == 2 and cfg["T"] == 0.5 and cfg.ensemble().d == 2
    with pytest.raises(ConfigError):
        parse_config("d = 1\n", "<text>")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.experiment in cli.EXPERIMENT_RUNNERS
    if cfg["drift"] is not None:
        cfg.ensemble()


# --- replay


def test_replay_fresh_and_tampered(tmp_path, capsys):
    out = tmp_path / "a"
    run(["simulate", write(tmp_path, SIM), "-o", out])
    assert run(["replay", out / "manifest.json"]) == 0
    assert run(["replay", out]) == 0
    path = out / "trajectory.csv"
    path.write_bytes(path.read_bytes().replace(b"0.3", b"0.4", 1))
    capsys.readouterr()
    assert run(["replay", out]) == 1
    assert "checksum mismatch" in capsys.readouterr().err


def test_replay_version_refusal(tmp_path, capsys):
    out = tmp_path / "a"
    run(["simulate", write(tmp_path, SIM), "-o", out])
    man = json.loads((out / "manifest.json").read_text())
    man["version"] = "0.0.0-other"
    (out / "manifest.json").write_text(json.dumps(man))
    capsys.readouterr()
    assert run(["replay", out]) == 1
    assert "refusing" in capsys.readouterr().err


def test_replay_rejects_garbage(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    assert run(["replay", tmp_path]) == 1
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    assert run(["replay", tmp_path]) == 1


def test_manifest_removed_before_rerun(tmp_path):
    out = tmp_path / "a"
    cfg = write(tmp_path, SIM)
    run(["simulate", cfg, "-o", out])
    assert run(["simulate", cfg, "-o", out, "--set", "N=abc"]) == 1
    # a failed config never touches the previous run
    assert (out / "manifest.json").exists()
    bad = write(tmp_path, SIM.replace("linear:-1", "linear:1e6"), "bad.cfg")
    assert run(["simulate", bad, "-o", out]) == 1
    assert not (out / "manifest.json").exists()


# --- other experiment kinds through the CLI


def test_bounds_table(tmp_path):
    text = "experiment = bounds\nd = 1\ndrift = constant:0\ndiffusions = constant:0.2\nT = 0.5\np = 2\n"
    assert run(["bounds", write(tmp_path, text), "-o", tmp_path / "a"]) == 0
    header, rows = cli.read_table(tmp_path / "a" / "bounds.csv")
    row = dict(zip(header, rows[0]))
    assert row["status"] == "ok" and int(row["N"]) == 3
    assert math.isfinite(float(row["bound"]))


def test_maximal_and_lusin(tmp_path):
    assert run(["maximal", CONFIGS / "maximal_sine.cfg", "-o", tmp_path / "m"]) == 0
    assert (tmp_path / "m" / "maximal.csv").exists() and (tmp_path / "m" / "maximal_ratio.csv").exists()
    assert run(["maximal", CONFIGS / "lusin_power_alpha.cfg", "-o", tmp_path / "l"]) == 0
    header, rows = cli.read_table(tmp_path / "l" / "lusin.csv")
    mx = [float(r[header.index("max_ratio")]) for r in rows]
    assert len(mx) == 2 and 0.5 <= mx[0] / mx[1] <= 2.0


def test_mollify_check(tmp_path):
    assert run(["mollify-check", CONFIGS / "mollify_polynomial.cfg", "-o", tmp_path / "a"]) == 0
    header, rows = cli.read_table(tmp_path / "a" / "mollify_residuals.csv")
    assert rows and all(float(c) <= 1e-8 for r in rows for h, c in zip(header, r) if "residual" in h)


def test_module_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=str(Path(gaussflow.__file__).parent.parent))
    res = subprocess.run([sys.executable, "-m", "gaussflow", "fields", "list"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "osgood" in res.stdout
    res = subprocess.run([sys.executable, "-m", "gaussflow", "--version"], capture_output=True, text=True, env=env)
    assert gaussflow.__version__ in res.stdout
