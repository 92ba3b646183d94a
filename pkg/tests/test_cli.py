import csv
import json
import math

import pytest

from tabular_imitation.analysis import SweepResult, SweepRow
from tabular_imitation.cli import load_config, main, ConfigError

CONFIG = {
    "env": {"name": "one_step", "params": {"slip": 0.015, "alias": 0.07}},
    "algorithms": [{"name": "bc"}, {"name": "dagger", "iterations": 3},
                   {"name": "alice_fail", "training": "iterative", "iterations": 3}],
    "mode": "exact",
    "horizons": [5, 10, 20],
    "seeds": [0],
}


def write_config(tmp_path, doc=CONFIG, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run(tmp_path, out, cfg=None):
    cfg = cfg or write_config(tmp_path)
    return main(["run", "--config", cfg, "--out", str(tmp_path / out), "--quiet"])


def test_run_writes_outputs(tmp_path):
    assert run(tmp_path, "a") == 0
    out = tmp_path / "a"
    sweep = SweepResult.from_csv((out / "sweep.csv").read_text())
    assert {r.algo for r in sweep.rows} == {"bc", "dagger", "alice_fail_it"}
    assert (out / "reports" / "bc_T5_seed0.csv").exists()
    pol = json.loads((out / "policies" / "dagger_T20_seed0.json").read_text())
    assert pol["algorithm"] == "dagger"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0] and len(manifest["config_sha256"]) == 64
    assert not (out / "errors.csv").exists()


def test_rerun_is_byte_identical(tmp_path):
    assert run(tmp_path, "a") == 0 and run(tmp_path, "b") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        if rel.name == "manifest.json":
            ma, mb = json.loads((a / rel).read_text()), json.loads((b / rel).read_text())
            for m in (ma, mb):
                m.pop("created")
                m["config"].pop("output_dir")
            assert ma == mb
        else:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_seed_override_and_mode(tmp_path):
    cfg = load_config(write_config(tmp_path), seed=7, out="x", mode="sampled")
    assert cfg.seeds == [7] and cfg.output_dir == "x" and cfg.mode == "sampled"
    assert cfg.n_demos == 200 and cfg.n_rollouts == 100


def test_unknown_env_is_config_error(tmp_path, capsys):
    doc = {**CONFIG, "env": {"name": "mountain_car"}}
    assert run(tmp_path, "a", write_config(tmp_path, doc)) == 2
    assert "env.name" in capsys.readouterr().err


def test_bad_params_and_json(tmp_path, capsys):
    doc = {**CONFIG, "env": {"name": "one_step", "params": {"slip": 0.9}}}
    assert run(tmp_path, "a", write_config(tmp_path, doc)) == 2
    assert "env.params" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"env": {"name": "one_step"},\n  "horizons": [5,]}')
    assert run(tmp_path, "a", str(bad)) == 2
    assert "bad.json:2:" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="algorithms.0"):
        load_config(write_config(tmp_path, {**CONFIG, "algorithms": [{"name": "alice_cov", "alpha": 3}]}))


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == 2
    assert main(["run"]) == 2


def test_verify_bounds_and_tamper(tmp_path, capsys):
    assert run(tmp_path, "a") == 0
    cfg = write_config(tmp_path)
    sweep_path = tmp_path / "a" / "sweep.csv"
    assert main(["verify-bounds", "--config", cfg, "--check", str(sweep_path)]) == 0
    assert "0 violations" in capsys.readouterr().out
    with sweep_path.open(newline="") as f:
        rows = list(csv.reader(f))
    rows[1][rows[0].index("regret")] = "0.5"
    with sweep_path.open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    assert main(["verify-bounds", "--config", cfg, "--check", str(sweep_path), "--quiet"]) == 1
    assert "does not match re-run" in capsys.readouterr().err


def test_hard_regime_run_exits_one(tmp_path, capsys):
    doc = {**CONFIG, "env": {"name": "unrecoverable", "params": {"slip": 0.0, "alias": 0.001}},
           "algorithms": [{"name": "alice_cov", "training": "iterative", "iterations": 2}]}
    assert run(tmp_path, "h", write_config(tmp_path, doc)) == 1
    assert (tmp_path / "h" / "errors.csv").exists()
    assert "hard regime" in capsys.readouterr().err


def test_list_envs(capsys):
    assert main(["list-envs"]) == 0
    out = capsys.readouterr().out
    for name in ("one_step", "k_step", "unrecoverable", "latching"):
        assert f"{name}\n" in out


def test_export_plotdata_quadratic(tmp_path, capsys):
    rows = [SweepRow("one_step", "{}", T, "bc", 0, 0.01 * T * T, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, "none",
                     math.nan, "n/a", math.nan) for T in (10, 20, 40, 80, 160)]
    src = tmp_path / "sweep.csv"
    src.write_text(SweepResult(rows).to_csv())
    assert main(["export-plotdata", str(src), "--out", str(tmp_path / "plots")]) == 0
    assert "beta=2.000" in capsys.readouterr().out
    plot = (tmp_path / "plots" / "plotdata.csv").read_text().splitlines()
    assert plot[0] == "env,algo,T,log_T,log_regret" and len(plot) == 6
    fits = (tmp_path / "plots" / "fits.csv").read_text().splitlines()
    assert float(fits[1].split(",")[2]) == pytest.approx(2.0, abs=1e-9)


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "tabular_imitation", "list-envs"], capture_output=True, text=True)
    assert res.returncode == 0 and "latching" in res.stdout
