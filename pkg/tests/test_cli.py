import json

from click.testing import CliRunner

from fedsim.cli import main
from fedsim.population import PopulationConfig
from fedsim.scenarios import rtt_histogram_document
from fedsim.simulation import Scenario


def _tiny_scenario_file(tmp_path, name="tiny", n=400, seed=3):
    scenario = Scenario(
        name=name,
        seed=seed,
        horizon_hours=40.0,
        population=PopulationConfig(n=n),
        queries=[
            {
                "launchHours": 0.0,
                "document": rtt_histogram_document(
                    "rtt_hist", release_interval_hours=12.0, max_releases=3, min_reporters=5
                ),
            }
        ],
    )
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(scenario.to_dict()))
    return path


def test_population_command(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main, ["population", "--n", "5000", "--seed", "3", "--out", str(tmp_path)]
    )
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "population_summary.json").read_text())
    assert summary["n"] == 5000
    assert summary["records_per_device"]["p50"] >= 1
    assert 40.0 <= summary["rtt_ms"]["p50"] <= 120.0


def test_population_command_env_seed(tmp_path, monkeypatch):
    runner = CliRunner()
    monkeypatch.setenv("FEDSIM_SEED", "77")
    a = runner.invoke(main, ["population", "--n", "800", "--out", str(tmp_path / "a")])
    monkeypatch.delenv("FEDSIM_SEED")
    b = runner.invoke(main, ["population", "--n", "800", "--seed", "77",
                             "--out", str(tmp_path / "b")])
    assert a.exit_code == 0 and b.exit_code == 0
    doc_a = json.loads((tmp_path / "a" / "population_summary.json").read_text())
    doc_b = json.loads((tmp_path / "b" / "population_summary.json").read_text())
    assert doc_a["records_per_device"] == doc_b["records_per_device"]
    assert doc_a["rtt_ms"] == doc_b["rtt_ms"]


def test_run_command_emits_files(tmp_path):
    scenario_path = _tiny_scenario_file(tmp_path)
    out = tmp_path / "out"
    runner = CliRunner()
    result = runner.invoke(
        main, ["run", "--scenario", str(scenario_path), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert (out / "coverage.csv").exists()
    assert (out / "releases.jsonl").exists()
    payload = json.loads(result.output.strip().splitlines()[-1])
    assert "final_coverage" in payload


def test_run_command_validation_error_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    doc = json.loads(_tiny_scenario_file(tmp_path).read_text())
    doc["queries"][0]["document"]["privacy"]["epsilon"] = -1
    path.write_text(json.dumps(doc))
    runner = CliRunner()
    result = runner.invoke(main, ["run", "--scenario", str(path), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2


def test_seed_env_override(tmp_path, monkeypatch):
    scenario_path = _tiny_scenario_file(tmp_path, seed=3)
    runner = CliRunner()
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    monkeypatch.setenv("FEDSIM_SEED", "99")
    res_a = runner.invoke(main, ["run", "--scenario", str(scenario_path), "--out", str(out_a)])
    monkeypatch.delenv("FEDSIM_SEED")
    res_b = runner.invoke(
        main, ["run", "--scenario", str(scenario_path), "--seed", "99", "--out", str(out_b)]
    )
    assert res_a.exit_code == 0 and res_b.exit_code == 0
    assert (out_a / "coverage.csv").read_text() == (out_b / "coverage.csv").read_text()


def test_quantile_command_flat(tmp_path):
    from fedsim.scenarios import p90_quantile_document

    scenario = Scenario(
        name="quantile-cli",
        seed=4,
        horizon_hours=49.0,
        population=PopulationConfig(n=2500),
        queries=[
            {
                "launchHours": 0.0,
                "document": p90_quantile_document("p90_nodp", "flat", False, 24.0, 2),
            }
        ],
    )
    path = tmp_path / "qscenario.json"
    path.write_text(json.dumps(scenario.to_dict()))
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["quantile", "--scenario", str(path), "--method", "flat", "--q", "0.5,0.9"],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.strip().splitlines()[-1])
    assert payload["method"] == "flat"
    estimates = {row["q"]: row["estimate"] for row in payload["results"]}
    assert 20.0 < estimates[0.5] < estimates[0.9] < 400.0


def test_run_command_extra_query_flag(tmp_path):
    scenario_path = _tiny_scenario_file(tmp_path)
    qdoc = rtt_histogram_document("extra_query", release_interval_hours=12.0,
                                  max_releases=3, min_reporters=5)
    qpath = tmp_path / "extra_query.json"
    qpath.write_text(json.dumps(qdoc))
    out = tmp_path / "outq"
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["run", "--scenario", str(scenario_path), "--query", str(qpath),
         "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.strip().splitlines()[-1])
    assert "extra_query" in payload["final_coverage"]


def test_run_command_trusted_binaries_flag(tmp_path):
    # an audit list that does not contain the running TSA binary: every
    # client aborts at attestation and nothing is ever ingested
    scenario_path = _tiny_scenario_file(tmp_path)
    registry_file = tmp_path / "trusted.json"
    registry_file.write_text(json.dumps([{"hash": "ab" * 32, "label": "other-binary"}]))
    out = tmp_path / "outt"
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["run", "--scenario", str(scenario_path), "--trusted-binaries",
         str(registry_file), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.strip().splitlines()[-1])
    assert payload["final_coverage"]["rtt_hist"] == 0.0
    assert payload["releases"] == 0


def test_quantile_command_multiround(tmp_path):
    scenario_path = _tiny_scenario_file(tmp_path, n=400, seed=8)
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "quantile", "--scenario", str(scenario_path), "--method", "multiround",
            "--q", "0.5", "--tolerance", "0.05", "--max-rounds", "10",
        ],
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.strip().splitlines()[-1])
    row = payload["results"][0]
    assert row["converged"]
    assert row["rounds"] <= 10
    assert 20.0 < row["estimate"] < 300.0


def test_compare_privacy_command(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "compare-privacy", "--modes", "cdp,none", "--n", "3000",
            "--seed", "6", "--out", str(tmp_path / "cmp"),
        ],
    )
    assert result.exit_code == 0, result.output
    rows = json.loads(result.output.strip().splitlines()[-1])
    assert [r["mode"] for r in rows] == ["cdp", "none"]
    assert (tmp_path / "cmp" / "comparison.csv").exists()
    assert (tmp_path / "cmp" / "cdp" / "releases.jsonl").exists()
