import json

import pytest

from bbcalc import runner
from bbcalc.runner import ConfigError, emit_plots, main, validate_config

SMALL_RECOVER = {
    "suite": "recover",
    "seed": 3,
    "grid": {"n": 16, "sweep_n": 16},
    "recover": {"max_iter": 50},
    "sweep": {"c": [0.1, 0.05]},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def recover_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("rec")
    cfg = _write(root, SMALL_RECOVER)
    rc = main(["run", str(cfg), "--out", str(root / "out"), "--quiet"])
    return rc, root / "out"


def test_defaults_fill_missing_blocks():
    cfg = validate_config({"suite": "geometry", "geometry": {"points": 10}})
    assert cfg["geometry"]["points"] == 10
    assert cfg["geometry"]["tolerance"] == runner.DEFAULTS["geometry"]["tolerance"]
    assert cfg["recover"]["band"] == runner.DEFAULTS["recover"]["band"]


@pytest.mark.parametrize("raw, field", [
    ({"suite": "everything"}, "suite"),
    ({"suite": "geometry", "geometry": {"points": 0}}, "geometry.points"),
    ({"suite": "geometry", "colour": "red"}, "colour"),
    ({"suite": "recover", "recover": {"band": 1.5}}, "recover.band"),
    ({"suite": "symbols", "symbols": {"inclusions": [
        {"from": ["1/0", "0", "0", "0"], "to": ["0", "0", "0", "0"], "expected": "proved"}]}},
     "symbols.inclusions[0].from[0]"),
    ({}, "suite"),
])
def test_schema_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    assert field in str(exc.value)


def test_bad_config_exits_2(tmp_path, capsys):
    p = _write(tmp_path, {"suite": "geometry", "geometry": {"points": -1}})
    assert main(["run", str(p)]) == 2
    assert "geometry.points" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == 2


def test_unparsable_config_exits_2(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{ suite: ")
    assert main(["run", str(p)]) == 2


def test_jobs_fallback(monkeypatch):
    monkeypatch.delenv("BBCALC_JOBS", raising=False)
    assert runner._jobs(None) == 1
    monkeypatch.setenv("BBCALC_JOBS", "3")
    assert runner._jobs(None) == 3
    assert runner._jobs("2") == 2
    monkeypatch.setenv("BBCALC_JOBS", "many")
    with pytest.raises(ConfigError):
        runner._jobs(None)
    with pytest.raises(ConfigError):
        runner._jobs("0")


def test_bad_jobs_env_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("BBCALC_JOBS", "-4")
    p = _write(tmp_path, {"suite": "geometry", "geometry": {"points": 5}})
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2


def test_geometry_run(tmp_path):
    p = _write(tmp_path, {"suite": "geometry", "geometry": {"points": 40}})
    out = tmp_path / "g"
    assert main(["run", str(p), "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["criteria"]["C1"]["status"] == "pass"
    assert summary["criteria"]["C8"]["status"] == "not_run"
    assert (out / "lift_identities.csv").is_file()
    assert json.loads((out / "config.json").read_text())["geometry"]["points"] == 40


def test_seed_flag_overrides_config(tmp_path):
    p = _write(tmp_path, {"suite": "geometry", "seed": 1, "geometry": {"points": 20}})
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["run", str(p), "--out", str(out_a), "--quiet", "--seed", "9"])
    main(["run", str(p), "--out", str(out_b), "--quiet", "--seed", "9"])
    a = json.loads((out_a / "summary.json").read_text())
    b = json.loads((out_b / "summary.json").read_text())
    assert a["seed"] == 9
    assert a["csv_sha256"] == b["csv_sha256"]


def test_plots_on_empty_dir(tmp_path, capsys):
    assert main(["plots", str(tmp_path)]) == 2
    assert "summary.json" in capsys.readouterr().err
    with pytest.raises(FileNotFoundError):
        emit_plots(tmp_path)


def test_recover_run_summary(recover_run):
    rc, out = recover_run
    summary = json.loads((out / "summary.json").read_text())
    crit = summary["criteria"]
    assert set(crit) == {f"C{i}" for i in range(1, 10)}
    assert crit["C1"]["status"] == "not_run"
    assert crit["C8"]["status"] in ("pass", "fail")
    assert rc == (1 if any(v["status"] == "fail" for v in crit.values()) else 0)
    for name in ("epsilon_sweep.csv", "recovery_history.csv", "reconstruction_f.bbg1"):
        assert (out / name).is_file()


def test_plots_from_recover_run(recover_run):
    _, out = recover_run
    assert main(["plots", str(out)]) == 0
    lines = (out / "epsilon_curve.dat").read_text().splitlines()
    cs = [float(l.split()[0]) for l in lines if not l.startswith("#")]
    assert cs == sorted(cs) and len(cs) == 2
    assert (out / "recovery_error.dat").is_file()


def test_plots_detect_deleted_artifact(recover_run, tmp_path):
    _, out = recover_run
    copy = tmp_path / "copy"
    copy.mkdir()
    for f in out.iterdir():
        if f.name != "recovery_history.csv":
            (copy / f.name).write_bytes(f.read_bytes())
    with pytest.raises(FileNotFoundError, match="recovery_history.csv"):
        emit_plots(copy)
