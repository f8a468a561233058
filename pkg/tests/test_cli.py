import json

import numpy as np
import pytest

from clusterate.cli import main
from clusterate.estimators import block_ate
from clusterate.population import ingest_units, observed_assignment, without_covariates
from conftest import DATA


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_analyze_golden(capsys):
    code, out, _ = run(capsys, "analyze", "--input", DATA / "observed.csv")
    assert code == 0
    assert out == (DATA / "analyze_golden.txt").read_text()


def test_analyze_json_and_file(capsys, tmp_path):
    target = tmp_path / "out.json"
    code, out, _ = run(capsys, "analyze", "--input", DATA / "observed.csv", "--format", "json", "--out", target)
    assert code == 0
    doc = json.loads(target.read_text())
    assert list(doc)[0] == "provenance"
    assert doc["provenance"]["rng"].endswith("PCG64/SeedSequence")
    assert out == target.read_text()
    assert {r["effect"] for r in doc["rows"]} == {"tau[A]", "tau[B]", "tau"}


def test_model_none_ignores_covariates(capsys):
    code, out, _ = run(capsys, "analyze", "--input", DATA / "observed.csv", "--model", "none", "--variance", "design", "--format", "json")
    rows = json.loads(out)["rows"]
    pop = without_covariates(ingest_units(DATA / "observed.csv"))
    expected = [e.beta1 for e in block_ate(pop, observed_assignment(pop), model="none")]
    got = [r["estimate"] for r in rows if r["effect"].startswith("tau[")]
    np.testing.assert_allclose(got, expected, rtol=1e-13)


def test_csv_output_has_provenance_first(capsys):
    _, out, _ = run(capsys, "analyze", "--input", DATA / "observed.csv", "--format", "csv")
    lines = out.splitlines()
    assert lines[0].startswith("# clusterate")
    assert lines[1].startswith("effect,estimate,method")


def test_missing_weight_column(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster,y,T\na,1,1\nb,2,0\n")
    code, _, err = run(capsys, "analyze", "--input", bad)
    assert code == 2
    assert "weight" in err


def test_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "analyze", "--input", tmp_path / "nope.csv")
    assert code == 2


def test_rank_error_exit_code(capsys, tmp_path):
    bad = tmp_path / "dup.csv"
    rows = ["cluster,weight,x1,x2,y,T"] + [f"c{j},1,{j},{j},{j % 3},{j % 2}" for j in range(8)]
    bad.write_text("\n".join(rows) + "\n")
    code, _, err = run(capsys, "analyze", "--input", bad)
    assert code == 3
    assert "x2" in err


def test_infeasible_df_exit_code(capsys, tmp_path):
    bad = tmp_path / "small.csv"
    rows = ["cluster,weight,x1,x2,y,T"] + [f"c{j},1,{j * j % 5},{j % 3},{j},{int(j < 2)}" for j in range(4)]
    bad.write_text("\n".join(rows) + "\n")
    code, _, _ = run(capsys, "analyze", "--input", bad, "--variance", "design")
    assert code == 4


def test_simulate_deterministic(capsys):
    args = ("simulate", "--seed", 42, "--draws", 50, "--repeats", 2, "--format", "csv")
    _, a, _ = run(capsys, *args)
    _, b, _ = run(capsys, *args)
    assert a == b
    assert "seed=42" in a.splitlines()[0]


def test_simulate_defaults_echo_protocol(capsys):
    _, out, _ = run(capsys, "simulate", "--seed", 1, "--draws", 2, "--repeats", 1, "--format", "json", "--m", 8)
    rows = {r["name"]: r["value"] for r in json.loads(out)["rows"]}
    from clusterate.simlab import SimConfig

    assert (SimConfig().draws, SimConfig().repeats) == (500, 10)
    assert rows["config.m"] == 8 and rows["draws_total"] == 2


def test_simulate_requires_seed(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 2


def test_simulate_invalid_rho(capsys):
    code, _, err = run(capsys, "simulate", "--seed", 1, "--rho-x", 1)
    assert code == 2
    assert "rho_x" in err


def test_simulate_config_file(capsys, tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("m = 10\ndraws = 5\nrepeats = 1\n")
    _, out, _ = run(capsys, "simulate", "--config", cfg, "--seed", 3, "--draws", 7, "--format", "json")
    rows = {r["name"]: r["value"] for r in json.loads(out)["rows"]}
    assert rows["config.m"] == 10 and rows["config.draws"] == 7


def test_r2lab_default_grid(capsys):
    code, out, _ = run(capsys, "r2lab", "--seed", 5, "--draws", 20, "--repeats", 2, "--format", "json")
    rows = json.loads(out)["rows"]
    assert code == 0 and len(rows) == 27
    assert all(r["gap"] >= 0 for r in rows)


def test_exact_hartley_row(capsys):
    code, out, _ = run(capsys, "exact", "--input", DATA / "exact4.csv", "--seed", 1, "--format", "json")
    (row,) = json.loads(out)["rows"]
    assert code == 0
    assert row["assignments"] == 6
    assert row["residual"] < 1e-12
    assert row["exact_bias"] == pytest.approx(31 / 12 - 23 / 8, abs=1e-13)


def test_exact_cap_exit_code(capsys):
    code, _, _ = run(capsys, "exact", "--input", DATA / "schedule.csv", "--seed", 1, "--cap", 5)
    assert code == 4


def test_exact_needs_schedule(capsys):
    code, _, _ = run(capsys, "exact", "--input", DATA / "observed.csv", "--seed", 1)
    assert code == 2


def test_conditions_replication_visible(capsys):
    _, one, _ = run(capsys, "conditions", "--input", DATA / "schedule.csv", "--format", "json")
    _, two, _ = run(capsys, "conditions", "--input", DATA / "schedule.csv", "--replicate", 2, "--format", "json")
    a, b = json.loads(one)["rows"][0], json.loads(two)["rows"][0]
    m = a["m"]
    assert b["m"] == 2 * m
    for key in ("max_dev_treated", "max_dev_control"):
        assert b[key] == pytest.approx(a[key] * (2 * m - 1) / (4 * (m - 1)), rel=1e-12)
        assert b[key] < a[key]


def test_workers_env_default(capsys, monkeypatch):
    monkeypatch.setenv("CLUSTERATE_WORKERS", "2")
    _, a, _ = run(capsys, "simulate", "--seed", 9, "--draws", 20, "--repeats", 2)
    monkeypatch.setenv("CLUSTERATE_WORKERS", "1")
    _, b, _ = run(capsys, "simulate", "--seed", 9, "--draws", 20, "--repeats", 2)
    assert a == b


def test_tab_separated_input(capsys, tmp_path):
    tab = tmp_path / "obs.tsv"
    tab.write_text((DATA / "observed.csv").read_text().replace(",", "\t"))
    _, out, _ = run(capsys, "analyze", "--input", tab, "--sep", "tab")
    assert out.splitlines()[1:] == (DATA / "analyze_golden.txt").read_text().splitlines()[1:]
