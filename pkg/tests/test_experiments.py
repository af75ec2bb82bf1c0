import csv
import json
import math

import pytest

from curveflow import experiments
from curveflow.__main__ import main
from curveflow import settings as lab_settings
from curveflow.backgrounds import BackgroundSpec, make_background
from curveflow.curve_flow import default_dt, seed_curve
from curveflow.errors import ConfigError
from curveflow.settings import set_settings


def _config(**flow):
    raw = {
        "name": "small_circle",
        "background": {"kind": "flat_torus", "horizon": 0.45},
        "curve": {"kind": "torus_circle", "radius": 1.0},
        "flow": {"nodes": 64, "dt": 5e-4, "t_end": 0.1, "record_every": 4, **flow},
        "checks": ["length_squared", "k2_corrected", "inequalities"],
    }
    return raw


def _violations(raw):
    with pytest.raises(ConfigError) as info:
        experiments.parse_config(json.dumps(raw))
    return info.value.violations


def test_parse_config_fills_step_and_regularisation():
    raw = _config()
    del raw["flow"]["dt"]
    raw["flow"]["nodes"] = 128
    config = experiments.parse_config(json.dumps(raw))
    assert config.flow.dt == pytest.approx(0.2 * (2 * math.pi / 128) ** 2, rel=1e-5)
    assert config.flow.epsilon == pytest.approx(2e-3, rel=1e-5)
    assert config.output.formats == ["csv", "json"]


def test_t_end_past_the_positivity_bound_is_rejected():
    raw = {
        "background": {"kind": "shrinking_sphere", "horizon": 0.4, "r0": 1.0},
        "curve": {"kind": "sphere_latitude"},
        "flow": {"nodes": 32, "dt": 1e-3, "t_end": 0.6},
    }
    problems = _violations(raw)
    assert any("t_end" in p and "0.5" in p for p in problems)


def test_all_violations_are_reported_together():
    raw = _config(nodes=15)
    raw["colour"] = "red"
    raw["checks"] = ["length_squared", "no_such_check"]
    problems = _violations(raw)
    assert "unknown key 'colour'" in problems
    assert any("flow.nodes" in p for p in problems)
    assert "unknown check 'no_such_check'" in problems


def test_curve_and_background_must_agree():
    raw = _config()
    raw["curve"] = {"kind": "sphere_latitude"}
    assert any("curve.kind" in p for p in _violations(raw))


def test_invalid_json_is_a_config_error():
    with pytest.raises(ConfigError):
        experiments.parse_config("{not json")


def test_scenario_registry():
    listing = experiments.list_scenarios()
    for name in ("flat_torus_circle", "sphere_latitude", "product_ramp"):
        assert name in listing
    config = experiments.scenario_config("product_ramp")
    assert config.expected_failures == ["k2_book_erroneous"]
    assert config.name == "product_ramp"
    with pytest.raises(ConfigError):
        experiments.scenario_config("nowhere")


def test_refinement_levels():
    config = experiments.parse_config(json.dumps(_config()))
    assert experiments.refinement_levels(config, 3) == [(64, 5e-4), (128, 1.25e-4), (256, 3.125e-5)]


def test_run_writes_artifacts(tmp_path):
    config = experiments.parse_config(json.dumps(_config()))
    result = experiments.run(config, str(tmp_path))
    assert result.exit_status == experiments.EXIT_OK

    with open(tmp_path / "trajectory.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "L", "Theta", "Theta_eps", "max_k", "min_absX", "min_u"]
    assert float(rows[-1][0]) == 0.1
    assert float(rows[-1][1]) == pytest.approx(2 * math.pi * math.sqrt(0.8), rel=1e-3)
    assert rows[-1][6] == ""

    assert (tmp_path / "residual_length_squared.csv").exists()
    assert (tmp_path / "margins_inequalities_pointwise_k2.csv").exists()
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "completed"
    assert report["constants"]["C2"] == 0
    assert report["checks"]["k2_corrected"]["passed"]
    assert "contrast" not in report


def test_runs_are_reproducible(tmp_path):
    raw = _config()
    raw["curve"] = {"kind": "torus_fourier", "radius": 1.0, "amplitudes": [0.05, 0.03]}
    raw["flow"] = {"nodes": 32, "dt": 1e-3, "t_end": 0.02, "record_every": 2}
    raw["checks"] = ["length_squared"]
    config = experiments.parse_config(json.dumps(raw))
    experiments.run(config, str(tmp_path / "a"))
    experiments.run(config, str(tmp_path / "b"))
    for name in ("trajectory.csv", "residual_length_squared.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_geodesic_run_keeps_zero_total_curvature(tmp_path):
    config = experiments.scenario_config(
        "sphere_geodesic", {"flow": {"nodes": 32, "dt": 2e-3, "t_end": 0.1, "record_every": 5}, "checks": ["k2_corrected"]}
    )
    experiments.run(config, str(tmp_path))
    with open(tmp_path / "trajectory.csv", newline="") as f:
        thetas = [float(row["Theta"]) for row in csv.DictReader(f)]
    assert max(thetas) < 1e-4


def test_aborted_run_reports_event_time(tmp_path):
    raw = {
        "name": "toward_pole",
        "background": {"kind": "shrinking_sphere", "horizon": 0.4, "r0": 1.0},
        "curve": {"kind": "sphere_latitude", "theta0": math.pi / 3},
        "flow": {"nodes": 32, "dt": 2e-3, "t_end": 0.39, "record_every": 5},
        "checks": ["length_squared"],
    }
    result = experiments.run(experiments.parse_config(json.dumps(raw)), str(tmp_path))
    assert result.exit_status == experiments.EXIT_ABORTED
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "aborted"
    assert report["event_time"] < 0.375
    assert (tmp_path / "trajectory.csv").exists()


def test_validate_background(capsys):
    residual, ok = experiments.validate_background(BackgroundSpec(kind="shrinking_sphere", horizon=0.4, r0=1.0))
    assert ok and residual < 1e-12
    assert "shrinking_sphere" in capsys.readouterr().out


def test_cli_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    assert "product_ramp" in capsys.readouterr().out


def test_cli_reports_config_errors(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({
        "background": {"kind": "shrinking_sphere", "horizon": 0.4, "r0": 1.0},
        "curve": {"kind": "sphere_latitude"},
        "flow": {"nodes": 32, "t_end": 0.6},
    }))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
    assert "0.5" in capsys.readouterr().err
    assert main(["run", "--scenario", "flat_torus_circle", "--checks", "bogus"]) == 1
    assert main(["convergence", "--scenario", "flat_torus_circle", "--levels", "2"]) == 1


def test_unknown_setting_is_rejected():
    with pytest.raises(ValueError):
        set_settings({"no_such_setting": 1})


@pytest.mark.slow
def test_product_ramp_scenario_shows_the_contrast(tmp_path):
    config = experiments.scenario_config("product_ramp")
    result = experiments.run(config, str(tmp_path))
    assert result.exit_status == experiments.EXIT_OK
    book = result.checks["k2_book_erroneous"]
    assert not book["passed"] and book["expected_failure"] and book["behaved"]
    assert result.checks["k2_corrected"]["passed"]
    contrast = result.report["contrast"]
    assert contrast["book_limit"] == pytest.approx(contrast["dropped_terms"], rel=0.2)


@pytest.mark.slow
def test_suite_subset(tmp_path):
    status = experiments.suite(str(tmp_path), names=["flat_torus_line", "sphere_latitude"])
    assert status == experiments.EXIT_OK
    summary = json.loads((tmp_path / "suite.json").read_text())
    assert set(summary) == {"flat_torus_line", "sphere_latitude"}
    assert all(entry["exit_status"] == 0 for entry in summary.values())


def _latitude_raw(**flow):
    return {
        "name": "latitude",
        "background": {"kind": "shrinking_sphere", "horizon": 0.4, "r0": 1.0},
        "curve": {"kind": "sphere_latitude", "theta0": math.pi / 3},
        "flow": {"nodes": 32, "dt": 1e-5, "t_end": 1e-3, "record_every": 1, **flow},
        "checks": ["k2_corrected"],
    }


def test_residual_frames_next_to_the_initial_time_are_rejected():
    problems = _violations(_latitude_raw())
    assert any("2·h_fd" in p for p in problems)
    # the same frames are fine for checks without spacetime curvature
    raw = _latitude_raw()
    raw["checks"] = ["length_squared"]
    experiments.parse_config(json.dumps(raw))


def test_too_few_frames_are_rejected():
    problems = _violations(_latitude_raw(dt=1e-3, t_end=0.003))
    assert any("at least 5" in p for p in problems)


def test_failing_check_evaluation_still_writes_a_report(tmp_path):
    raw = _latitude_raw(dt=1e-3, t_end=0.02)
    config = experiments.parse_config(json.dumps(raw))
    config = config.model_copy(update={"flow": config.flow.model_copy(update={"dt": 1e-5, "t_end": 1e-3})})
    result = experiments.run(config, str(tmp_path))
    assert result.exit_status == experiments.EXIT_FAILED
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "error"
    assert "h_fd" in report["reason"]
    assert (tmp_path / "trajectory.csv").exists()


def test_convergence_reports_monotonicity(tmp_path, capsys):
    raw = _config()
    raw["flow"] = {"nodes": 32, "dt": 2e-3, "t_end": 0.02, "record_every": 2}
    raw["checks"] = ["length_squared"]
    tables = experiments.convergence(experiments.parse_config(json.dumps(raw)), 3, str(tmp_path))
    out = capsys.readouterr().out
    assert "monotone" in out.lower()
    with open(tmp_path / "convergence_length_squared.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[-1][0] == "monotone"
    assert rows[-1][2] == ("true" if tables["length_squared"].monotone else "false")


def test_shipped_scenarios_step_within_the_advised_limit():
    for name in experiments.SCENARIOS:
        config = experiments.scenario_config(name)
        background = make_background(config.background)
        curve = seed_curve(config.curve, config.flow.nodes, background, seed=config.seed)
        assert config.flow.dt <= default_dt(curve), name


@pytest.mark.slow
@pytest.mark.parametrize("name", ["flat_torus_fourier", "sphere_latitude", "product_ramp"])
def test_shipped_scenario_meets_its_checks(name, tmp_path):
    result = experiments.run(experiments.scenario_config(name), str(tmp_path))
    assert result.exit_status == experiments.EXIT_OK
    assert result.checks["length_squared"]["max_norm"] < 1e-4
    assert result.checks["k2_corrected"]["passed"]


def test_cli_settings_update_is_persisted(tmp_path, monkeypatch, capsys):
    path = tmp_path / "lab_settings.json"
    monkeypatch.setattr(lab_settings, "_CONFIG_PATH", str(path))
    monkeypatch.setattr(lab_settings, "_settings", dict(lab_settings.get_settings()))
    assert main(["settings", "--set", "cfl_safety=0.1", "--set", "richardson=false"]) == 0
    saved = json.loads(path.read_text())
    assert saved["cfl_safety"] == 0.1
    assert saved["richardson"] is False
    assert json.loads(capsys.readouterr().out)["cfl_safety"] == 0.1
    assert main(["settings", "--set", "colour=red"]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["settings", "--set", "cfl_safety"]) == 1
