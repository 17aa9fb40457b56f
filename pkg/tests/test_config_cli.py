import csv
import json
from pathlib import Path

import numpy as np
import pytest

from robust2bsde import config as cf
from robust2bsde.cli import main
from robust2bsde.pipeline import run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
market:
  dim: 1
  drift: 0.2
  a_bounds: [0.04, 0.09]
  scenarios: {m}
claim:
  builtin: zero
utility:
  kind: exponential
  risk_aversion: 1.0
  wealth: 1.0
numerics:
  time_steps: 40
  lattice_nodes: 401
  mc_paths: 4000
  k_paths: 2000
  perturbations: 2
  seed: 5
outputs:
  report: {out}
"""


def _small(tmp_path, m=5, name="run"):
    return cf.loads(SMALL.format(m=m, out=tmp_path / name))


def test_shipped_configs_validate():
    for p in sorted(CONFIGS.glob("*.yaml")):
        assert cf.validate(cf.load(p)) == [], p.name


def test_violations_are_collected():
    text = SMALL.format(m=5, out="x").replace("time_steps: 40", "time_steps: 0").replace(
        "a_bounds: [0.04, 0.09]", "a_bounds: [0.09, 0.04]"
    ).replace("risk_aversion: 1.0", "risk_aversion: -1.0")
    with pytest.raises(cf.ConfigError) as exc:
        cf.loads(text)
    v = exc.value.violations
    assert any("time steps out of range" in s for s in v)
    assert any("Loewner" in s for s in v)
    assert any("c > 0" in s for s in v)


def test_power_gamma_one_rejected():
    text = SMALL.format(m=5, out="x").replace("kind: exponential", "kind: power")
    with pytest.raises(cf.ConfigError) as exc:
        cf.loads(text)
    assert any("gamma < 1" in s for s in exc.value.violations)


def test_unknown_fields_rejected():
    with pytest.raises(cf.ConfigError) as exc:
        cf.loads(SMALL.format(m=5, out="x") + "extra: 1\n")
    assert any("extra" in s for s in exc.value.violations)


@pytest.mark.parametrize("expr,x,val", [("min(x**2, 0.05)", 0.3, 0.05), ("0.1*tanh(x)", 0.0, 0.0), ("clip(x, 0, 1)", 2.0, 1.0)])
def test_claim_expressions(expr, x, val):
    fn, _ = cf.claim_function(cf.ClaimConfig(expr=expr), 1)
    assert float(fn(np.array([[x]]))[0]) == pytest.approx(val)


@pytest.mark.parametrize("expr", ["__import__('os')", "x.real", "open('f')", "[x for x in y]"])
def test_claim_expressions_are_sandboxed(expr):
    with pytest.raises((ValueError, SyntaxError)):
        cf.claim_function(cf.ClaimConfig(expr=expr), 1)


def test_config_round_trip(tmp_path):
    cfg = _small(tmp_path)
    again = cf.loads(cfg.to_yaml())
    assert again.to_dict() == cfg.to_dict()


def test_singleton_family_report_matches_single_solve(tmp_path):
    from robust2bsde.engine import solve_bsde

    cfg = _small(tmp_path, m=1)
    res = run(cfg, "solve")
    sol = solve_bsde(cf.build_generator(cfg), cf.build_claim(cfg), 0.09, cf.build_grid(cfg), cf.build_lattice(cfg))
    assert res.report["robust"]["v0"] == sol.y0


def test_pipeline_report_and_determinism(tmp_path):
    r1 = run(_small(tmp_path), "report")
    assert r1.passed, r1.failures()
    assert r1.report["valuation"]["Y0"] == pytest.approx(-(0.2**2) / (2 * 0.09), abs=2e-3)
    names = {c["name"] for c in r1.report["checks"]}
    for n in ("certificate_audit", "representation_lower_bound", "minimum_condition", "optimality_identity",
              "simulation_optimal", "simulation_perturbations_dominated", "apriori_bound", "stability_ratio"):
        assert n in names
    r2 = run(_small(tmp_path), "report")
    assert json.dumps(r1.report, sort_keys=True) == json.dumps(r2.report, sort_keys=True)


def test_cli_writes_artifacts(tmp_path, capsys):
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(SMALL.format(m=3, out=tmp_path / "a"))
    assert main(["report", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS  utility_desk.optimality_identity" in out
    a = tmp_path / "a"
    for f in ("report.json", "report.md", "timings.json", "surfaces.csv", "scenarios.csv", "k_statistics.csv",
              "simulation.csv", "checks.csv"):
        assert (a / f).exists(), f
    for f in ("value_surface.png", "scenario_values.png", "argmax_scenario.png", "strategy.png", "simulation.png"):
        assert (a / "figures" / f).stat().st_size > 0
    with open(a / "surfaces.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "x1", "Y", "Z1", "pi1"]
    assert main(["report", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--no-figures"]) == 0
    for f in ("surfaces.csv", "scenarios.csv", "k_statistics.csv", "simulation.csv", "checks.csv"):
        assert (a / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert not (tmp_path / "b" / "figures").exists()


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.format(m=5, out=tmp_path / "x").replace("time_steps: 40", "time_steps: 0"))
    assert main(["solve", "--config", str(bad)]) == 2
    assert "time steps out of range" in capsys.readouterr().err
    assert main(["solve", "--config", str(tmp_path / "missing.yaml")]) == 2
    ok = tmp_path / "ok.yaml"
    ok.write_text(SMALL.format(m=3, out=tmp_path / "y"))
    assert main(["solve", "--config", str(ok), "--time-steps", "1"]) == 2
    narrow = tmp_path / "narrow.yaml"
    # a y-dependent generator cannot settle in one fixed-point iteration
    narrow.write_text(SMALL.format(m=3, out=tmp_path / "z").replace("time_steps: 40", "time_steps: 40\n  fp_max_iter: 1")
                      .replace("builtin: zero", "expr: '0.3*sin(5*x)'\ngenerator:\n  kind: linear\n  kappa: 0.01\n  mu: 0.5"))
    code = main(["solve", "--config", str(narrow), "--no-figures"])
    assert code == 3
    assert "FixedPointError" in capsys.readouterr().err


def test_cli_failed_checks_exit_one(tmp_path, capsys):
    p = tmp_path / "ph.yaml"
    text = (CONFIGS / "power_half.yaml").read_text().replace("time_steps: 200", "time_steps: 40\n  lattice_nodes: 401") \
        .replace("mc_paths: 200000", "mc_paths: 20000\n  k_paths: 2000").replace("out/power_half", str(tmp_path / "ph"))
    p.write_text(text)
    assert main(["simulate", "--config", str(p)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["kind"] == "checks"
    assert any(f["name"] == "simulation_optimal" for f in err["failures"])
    assert (tmp_path / "ph" / "failures.json").exists()
