import numpy as np
import pytest
import yaml

from levyipde import cli, io
from levyipde.errors import ConfigurationError
from levyipde.scenario import (DEFAULTS, ScenarioError, dump_scenario, load_scenario, scenario_from_dict,
                               shipped_scenarios)


def write(tmp_path, data, name="s.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def errors_of(data):
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(data)
    return dict(err.value.errors)


def test_minimal_file_gets_defaults(tmp_path):
    cfg = load_scenario(write(tmp_path, {"name": "tiny"}))
    assert cfg.name == "tiny"
    assert cfg.numerics["n_steps"] == DEFAULTS["numerics"]["n_steps"]
    assert cfg.numerics["tolerances"]["viscosity"] == 0.05
    assert cfg.data["coefficients"]["gamma"] == [{"name": "zero"}]
    assert cfg.x0 == [0.0]
    assert cfg.grid().dt == pytest.approx(1 / 50)


def test_ladder_must_increase():
    errs = errors_of({"numerics": {"ladder": [4, 4, 8]}})
    assert errs["numerics.ladder"] == "ladder not strictly increasing"


def test_gamma_block_dimension():
    errs = errors_of({"dims": {"equations": 2}, "coefficients": {"gamma": [{"name": "one"}]}})
    assert "coefficients.gamma" in errs and "mismatch" in errs["coefficients.gamma"]


def test_all_errors_reported_together():
    errs = errors_of({"time": {"t0": 1.0, "T": 0.5}, "x0": [1.0, 2.0], "numerics": {"n_paths": 0},
                      "coefficients": {"b": {"name": "cubic"}}, "colour": "blue"})
    assert set(errs) == {"time.T", "x0", "numerics.n_paths", "coefficients.b", "colour"}


def test_bad_parameters_are_reported():
    errs = errors_of({"coefficients": {"b": {"name": "constant", "value": [1, 2]}},
                      "measure": {"kind": "power-law", "alpha": 2.5}})
    assert "coefficients.b" in errs and "measure" in errs


def test_table_measure_in_scenario():
    r = np.geomspace(1e-3, 1, 50)
    cfg = scenario_from_dict({"measure": {"kind": "table", "radii": r.tolist(), "values": (r ** -1.5).tolist()}})
    assert cfg.measure().dim_e == 1


def test_overrides_revalidate():
    cfg = scenario_from_dict({})
    assert cfg.with_overrides(k=16, paths=10).numerics["k"] == 16
    with pytest.raises(ScenarioError):
        cfg.with_overrides(ladder=[8, 2, 4])


def test_missing_file():
    with pytest.raises(ConfigurationError):
        load_scenario("/nonexistent/file.yaml")


@pytest.mark.parametrize("name", sorted(shipped_scenarios()))
def test_shipped_scenarios_round_trip(name, tmp_path):
    cfg = load_scenario(name)
    path = tmp_path / f"{name}.yaml"
    dump_scenario(cfg, path)
    assert load_scenario(path) == cfg
    cfg.model(), cfg.measure(), cfg.basis()


def test_csv_format_is_deterministic(tmp_path):
    rows = [{"a": 0.1, "b": 3, "c": True, "d": [1.0, 2.5], "e": float("nan")}]
    p = io.write_csv(tmp_path / "x.csv", rows, "test", "s")
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# levyipde") and "generated" in lines[0]
    assert lines[1:] == ["a,b,c,d,e", "0.1,3,true,1.0 2.5,nan"]
    assert io.read_csv(p) == [{"a": "0.1", "b": "3", "c": "true", "d": "1.0 2.5", "e": "nan"}]
    assert not list(tmp_path.glob(".x.csv.*"))


def run(*argv):
    return cli.main([*argv, "--quiet"])


def test_cli_verify_assumptions(tmp_path, capsys):
    assert run("verify-assumptions", "--config", "linear", "--out", str(tmp_path)) == 0
    rows = io.read_csv(tmp_path / "assumptions.csv")
    assert rows and all(r["passed"] == "1" for r in rows)
    assert "all" in capsys.readouterr().out


def test_cli_gate_and_force(tmp_path):
    bad = write(tmp_path, {"coefficients": {"g": [{"name": "sqrt-abs"}]}, "numerics": {"n_paths": 500, "n_steps": 5}})
    assert run("solve", "--config", str(bad), "--out", str(tmp_path / "a")) == 1
    assert not (tmp_path / "a" / "solution.npz").exists()
    assert run("solve", "--config", str(bad), "--out", str(tmp_path / "b"), "--force") == 0


def test_cli_invalid_config(tmp_path, capsys):
    bad = write(tmp_path, {"numerics": {"ladder": [2, 2, 4]}})
    assert run("solve", "--config", str(bad)) == 1
    assert "ladder not strictly increasing" in capsys.readouterr().err
    assert run("solve") == 1


def test_cli_numerical_failure(tmp_path):
    blow = write(tmp_path, {"coefficients": {"b": {"name": "linear", "slope": 1e5}}, "x0": [1.0],
                            "numerics": {"n_paths": 100}})
    assert run("solve", "--config", str(blow), "--force", "--out", str(tmp_path)) == 2


def test_cli_solve_then_residual(tmp_path):
    out = str(tmp_path)
    common = ["--config", "linear", "--out", out, "--paths", "20000", "--steps", "20"]
    assert run("solve", *common) == 0
    assert run("residual", *common, "--solution", str(tmp_path / "solution.npz")) == 0
    rows = io.read_csv(tmp_path / "residual.csv")
    per_step = np.array([float(r["mean_square"]) for r in rows])
    assert np.sqrt(per_step.sum()) < 0.05
    assert run("verify-viscosity", *common, "--solution", str(tmp_path / "solution.npz")) == 0
    solve_row = io.read_csv(tmp_path / "solve.csv")[0]
    assert abs(float(solve_row["u0"]) - 2.1) < 3 * float(solve_row["std_error"])


def test_cli_simulate_forward(tmp_path):
    assert run("simulate-forward", "--config", "brownian", "--out", str(tmp_path), "--paths", "1000",
               "--export-paths", "3") == 0
    lines = (tmp_path / "paths.csv").read_text().splitlines()
    assert lines[1] == "path,time,x0,jumps" and len(lines) == 2 + 3 * 51
    stats = {r["statistic"]: float(r["value"]) for r in io.read_csv(tmp_path / "forward.csv")}
    assert stats["jumps_per_path"] == pytest.approx(4 * (np.sqrt(8) - 1), abs=0.5)
    assert np.all(np.loadtxt(tmp_path / "paths.csv", delimiter=",", skiprows=2)[:, 3] >= 0)


def test_cli_ladder_overrides(tmp_path):
    assert run("ladder", "--config", "additive", "--out", str(tmp_path), "--paths", "20000", "--steps", "20",
               "--ladder", "2,4,8") == 0
    rows = io.read_csv(tmp_path / "ladder.csv")
    assert [int(r["k"]) for r in rows] == [2, 4, 8]
    gaps = [float(r["solution_gap"]) for r in rows[1:]]
    assert gaps[1] < gaps[0]


def test_cli_bench(tmp_path):
    assert run("bench", "--out", str(tmp_path), "--repeats", "1") == 0
    rows = io.read_csv(tmp_path / "bench.csv")
    assert {r["benchmark"] for r in rows} == {"poly_eval", "increment_values", "increment_integral"}


def test_cli_reproducible_across_workers(tmp_path):
    outs = []
    for w in ("1", "3"):
        out = tmp_path / f"w{w}"
        assert run("solve", "--config", "linear", "--out", str(out), "--paths", "9000", "--steps", "10",
                   "--workers", w) == 0
        outs.append(out)
    for name in ("solve.csv", "layers.csv", "assumptions.csv"):
        assert io.body(outs[0] / name) == io.body(outs[1] / name)
