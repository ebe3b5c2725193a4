import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from paranls import cli, runner
from paranls.config import ConfigError, Mode, RunConfig, apply_overrides, from_dict, load, loads

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@given(N=st.integers(2, 40), dt_steps=st.integers(1, 50), eps=st.floats(0.01, 0.24),
       re=st.floats(-1, 1), im=st.floats(-1, 1), seed=st.integers(0, 2**31))
def test_toml_round_trip(N, dt_steps, eps, re, im, seed):
    cfg = RunConfig(N=N, T=0.1, dt=0.1 / dt_steps, epsilon=eps, seed=seed,
                    modes=(Mode((1,), re, im),), density="coupled",
                    density_params={"kappa": 0.5})
    assert loads(cfg.to_toml()) == cfg


def test_bundled_configs_load():
    names = sorted(p.name for p in CONFIGS.glob("*.toml"))
    assert "picard_flagship.toml" in names and "selftest.toml" in names
    for p in CONFIGS.glob("*.toml"):
        cfg = load(p)
        assert cfg.initial().on_subspace(0)


def test_epsilon_out_of_range_cites_interval():
    with pytest.raises(ConfigError, match=r"\(0, 1/4\)") as exc:
        loads("[solver]\nepsilon = 0.5\n")
    assert exc.value.field == "solver.epsilon"


@pytest.mark.parametrize("text, field", [
    ("[grid]\ndim = 4\n", "grid.dim"),
    ("[grid]\nN = 0\n", "grid.N"),
    ("[solver]\nT = 0.1\ndt = 0.03\n", "solver.dt"),
    ("[model]\ndensity = 'nope'\n", "model.density"),
    ("[run]\nexperiment = 'fly'\n", "run.experiment"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[solver]\nwhat = 1\n", "solver.what"),
    ("[initial]\nmodes = [{k = [99], re = 1.0}]\n", "initial.modes"),
    ("[grid]\nN = 'x'\n", "N"),
    ("not toml [", "<file>"),
])
def test_validation_names_the_field(text, field):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert exc.value.field == field


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["grid.N=8", "solver.T=0.2", "model.density=quartic",
                                        "solver.epsilon=0.1"])
    assert (cfg.N, cfg.T, cfg.density, cfg.epsilon) == (8, 0.2, "quartic", 0.1)
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["N=8"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["grid.N"])


def test_default_modes_follow_dimension():
    cfg = from_dict({"grid": {"dim": 2, "N": 4}})
    assert cfg.initial().plus.coeffs.shape == (9, 9)
    assert cfg.perturbation_field().plus.coeffs.shape == (9, 9)


def test_selftest_command(tmp_path, capsys):
    code = cli.main(["selftest", "--output", str(tmp_path / "st")])
    out = json.loads(capsys.readouterr().out)
    assert code == 0 and out["status"] == 0
    suites = out["summary"]["suites"]
    assert set(suites) == {"torus_spectral", "symbol_algebra", "paradiff", "nls_model",
                           "diagonalize", "evolve"}
    assert all(v["failed"] == 0 and v["passed"] > 0 for v in suites.values())


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[solver]\nepsilon = 0.5\n")
    assert cli.main(["run", str(p), "--output", str(tmp_path / "o")]) == runner.EXIT_CONFIG
    assert "(0, 1/4)" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == runner.EXIT_CONFIG


def _small(tmp_path, experiment, **kw):
    p = tmp_path / f"{experiment}.toml"
    cfg = RunConfig(experiment=experiment, N=8, T=0.02, dt=0.005, **kw)
    p.write_text(cfg.to_toml())
    return p


def test_run_is_deterministic_and_echo_reproduces(tmp_path, capsys):
    p = _small(tmp_path, "picard")
    for name in ("a", "b"):
        assert cli.main(["run", str(p), "--output", str(tmp_path / name)]) == 0
    capsys.readouterr()
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("run.csv", "iterates.csv", "manifest.json", "config.toml"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert "timestamp" in json.loads((a / "timing.json").read_text())
    assert load(a / "config.toml") == load(p)
    man = json.loads((a / "manifest.json").read_text())
    assert from_dict(man["config"]) == load(p)
    assert b"\r\n" not in (a / "run.csv").read_bytes()


def test_output_directory_from_environment(tmp_path, monkeypatch, capsys):
    p = _small(tmp_path, "picard")
    monkeypatch.setenv("PARANLS_OUTPUT", str(tmp_path / "root"))
    assert cli.main(["run", str(p)]) == 0
    assert (tmp_path / "root" / "picard" / "manifest.json").exists()


@pytest.mark.parametrize("experiment, expected", [
    ("picard", {"hamiltonian_drift.csv", "sobolev.csv", "iterates.csv"}),
    ("energy-monitor", {"hamiltonian_drift.csv", "sobolev.csv", "iterates.csv", "energy.csv"}),
    ("linear", {"growth.csv"}),
    ("continuity", {"continuity.csv"}),
])
def test_emit_plots(tmp_path, capsys, experiment, expected):
    p = _small(tmp_path, experiment, halvings=1, energy_every=2)
    out = tmp_path / "out"
    assert cli.main(["run", str(p), "--output", str(out), "--jobs", "2"]) == 0
    assert cli.main(["emit-plots", str(out)]) == 0
    plots = out / "plots"
    assert {f.name for f in plots.iterdir()} == expected
    for f in plots.iterdir():
        header = f.read_text().splitlines()[0]
        assert header in ("series,t,value", "series,n,value", "delta_scale,distance", "t,ratio")
    if "energy.csv" in expected:
        assert (plots / "energy.csv").read_bytes() == (out / "energy.csv").read_bytes()
    if experiment == "picard":
        rows = (plots / "hamiltonian_drift.csv").read_text().splitlines()[1:]
        assert rows and all(r.startswith("hamiltonian_drift,") for r in rows)


def test_emit_plots_missing_artifacts(tmp_path, capsys):
    assert cli.main(["emit-plots", str(tmp_path)]) == runner.EXIT_CONFIG
    with pytest.raises(runner.MissingArtifact):
        runner.emit_plotdata(tmp_path)


def test_solver_failure_is_reported(tmp_path, capsys):
    # large data for the density that is elliptic only while |u| < 1
    p = tmp_path / "adv.toml"
    cfg = RunConfig(density="adversarial", N=8, T=0.01, dt=0.005, modes=(Mode((1,), 3.0),))
    p.write_text(cfg.to_toml())
    assert cli.main(["run", str(p), "--output", str(tmp_path / "o")]) == runner.EXIT_SOLVER
    fail = json.loads((tmp_path / "o" / "failure.json").read_text())
    assert fail["error"] == "EllipticityLost"
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["status"] == runner.EXIT_SOLVER
