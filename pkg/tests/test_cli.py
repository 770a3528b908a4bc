import csv
import json
import logging
from pathlib import Path

import numpy as np
import pytest

import gridtrade.cli as cli
from gridtrade.cli import (
    ExperimentConfig,
    build_config,
    main,
    run_experiment,
    sample_scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from gridtrade.model import validate_scenario
from tests.conftest import make_scenario

SMALL = dict(n_values=[2, 3], runs=3, output_path="")


def small_cfg(tmp_path, preset="custom", **kw):
    values = dict(SMALL, preset=preset, output_path=str(tmp_path), **kw)
    return ExperimentConfig(**values)


def read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# config=")
    rows = list(csv.reader(lines[1:]))
    return lines[0], rows[0], rows[1:]


class TestSampleScenario:
    def test_deterministic_per_key(self):
        cfg = ExperimentConfig()
        a = sample_scenario(cfg, 5, 3)
        b = sample_scenario(cfg, 5, 3)
        assert np.array_equal(a.surpluses, b.surpluses)
        assert a.seed == b.seed
        c = sample_scenario(cfg, 5, 4)
        assert not np.array_equal(a.surpluses, c.surpluses)

    def test_defaults_match_experiment_scale(self):
        cfg = ExperimentConfig()
        s = sample_scenario(cfg, 5, 0)
        assert s.grid.total_price == 175.0
        assert s.grid.total_price / s.n_users == pytest.approx(35.0)
        assert np.all((s.surpluses >= 64.0) & (s.surpluses <= 240.0))
        assert validate_scenario(s) == []
        assert s.users[0].aggregation_count == 20

    def test_price_floor_relaxed_at_25(self, caplog):
        cli._warned_relaxations.clear()
        cfg = ExperimentConfig()
        with caplog.at_level(logging.WARNING, logger="gridtrade.cli"):
            s = sample_scenario(cfg, 25, 0)
        assert s.grid.p_min == pytest.approx(7.0)
        assert any("relaxing p_min" in r.message for r in caplog.records)
        assert validate_scenario(s) == []

    def test_deficiency_rules(self):
        cfg_frac = ExperimentConfig(deficiency_rule="surplus_fraction:0.5")
        s = sample_scenario(cfg_frac, 5, 0)
        assert s.grid.deficiency == pytest.approx(0.5 * s.surpluses.sum())
        cfg_fixed = ExperimentConfig(deficiency_rule="fixed:380.0")
        s2 = sample_scenario(cfg_fixed, 5, 0)
        assert s2.grid.deficiency == 380.0


class TestConfig:
    def test_preset_then_file_then_flags(self):
        cfg = build_config({"preset": "fig2_utility_vs_n", "runs": 7}, {"seed": 9})
        assert cfg.preset == "fig2_utility_vs_n"
        assert cfg.deficiency_rule == "fixed:380.0"   # preset default
        assert cfg.runs == 7                           # file wins over preset
        assert cfg.seed == 9                           # flag wins over default

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            build_config({"not_a_field": 1}, {})

    def test_validation_catches_bad_values(self):
        assert ExperimentConfig(runs=0).validate()
        assert ExperimentConfig(n_values=[]).validate()
        assert ExperimentConfig(surplus_range=[9.0, 2.0]).validate()
        assert ExperimentConfig(deficiency_rule="nope").validate()
        assert ExperimentConfig() .validate() == []


class TestRunExperiment:
    def test_fig1_trace_schema_and_ordering(self, tmp_path):
        cfg = small_cfg(tmp_path, preset="fig1_convergence", n_values=[5], runs=1,
                        deficiency_rule="surplus_fraction:0.95")
        (path,) = run_experiment(cfg)
        header, cols, rows = read_csv(path)
        assert cols == ["iteration", "eu_id", "surplus", "utility"]
        n_iter = max(int(r[0]) for r in rows)
        assert len(rows) == 5 * n_iter
        final = {int(r[1]): (float(r[2]), float(r[3])) for r in rows if int(r[0]) == n_iter}
        by_surplus = sorted(final.values())
        assert all(a[1] < b[1] for a, b in zip(by_surplus, by_surplus[1:]))

    def test_fig2_schema_and_aggregation(self, tmp_path):
        cfg = small_cfg(tmp_path, preset="fig2_utility_vs_n", dump_per_run=True)
        paths = run_experiment(cfg)
        by_name = {p.name: p for p in paths}
        _, cols, rows = read_csv(by_name["fig2_utility_vs_n.csv"])
        assert cols == ["n", "scheme", "mean_utility", "std"]
        assert {r[1] for r in rows} == {"nsg", "fit"}
        _, pcols, prows = read_csv(by_name["per_run.csv"])
        for n in cfg.n_values:
            vals = [float(r[pcols.index("nsg_utility")]) for r in prows
                    if int(r[0]) == n]
            mean = next(float(r[2]) for r in rows if int(r[0]) == n and r[1] == "nsg")
            std = next(float(r[3]) for r in rows if int(r[0]) == n and r[1] == "nsg")
            assert mean == pytest.approx(np.mean(vals), abs=1e-12)
            assert std == pytest.approx(np.std(vals, ddof=1), abs=1e-12)

    def test_fig3_schema_has_both_accountings(self, tmp_path):
        cfg = small_cfg(tmp_path, preset="fig3_cost_vs_n")
        paths = run_experiment(cfg)
        _, cols, rows = read_csv(paths[-1])
        assert cols == ["n", "scheme", "mean_cost", "std", "accounting_variant"]
        assert {r[4] for r in rows} == {"modelled_cost", "direct_payment"}

    def test_custom_writes_both_sweeps(self, tmp_path):
        cfg = small_cfg(tmp_path)
        names = {p.name for p in run_experiment(cfg)}
        assert names == {"utility_vs_n.csv", "cost_vs_n.csv"}

    def test_byte_identical_reruns(self, tmp_path):
        cfg = small_cfg(tmp_path, preset="fig2_utility_vs_n")
        (path,) = run_experiment(cfg)
        first = path.read_bytes()
        (path2,) = run_experiment(cfg)
        assert path2.read_bytes() == first

    def test_no_tmp_leftover(self, tmp_path):
        cfg = small_cfg(tmp_path)
        run_experiment(cfg)
        assert not list(Path(tmp_path).glob("*.tmp"))

    def test_float_formatting_17_digits(self, tmp_path):
        cfg = small_cfg(tmp_path, preset="fig2_utility_vs_n")
        (path,) = run_experiment(cfg)
        _, _, rows = read_csv(path)
        value = rows[0][2]
        assert float(value) == float(f"{float(value):.17g}")

    def test_invalid_config_raises(self, tmp_path):
        with pytest.raises(ValueError):
            run_experiment(small_cfg(tmp_path, runs=0))


class TestScenarioJson:
    def test_round_trip(self, peak_scenario):
        data = scenario_to_dict(peak_scenario)
        clone = scenario_from_dict(json.loads(json.dumps(data)))
        assert np.array_equal(clone.surpluses, peak_scenario.surpluses)
        assert clone.grid.total_price == peak_scenario.grid.total_price
        assert clone.seed == peak_scenario.seed


class TestMain:
    def test_simulate_exit_zero(self, tmp_path, capsys):
        code = main([
            "simulate", "--preset", "fig1_convergence", "--seed", "1",
            "--out", str(tmp_path), "--n-values", "5",
            "--deficiency-rule", "surplus_fraction:0.95",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "fig1_convergence.csv" in out

    def test_simulate_config_file(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "preset": "fig2_utility_vs_n", "n_values": [2], "runs": 2,
            "output_path": str(tmp_path / "out"),
        }))
        assert main(["simulate", "--config", str(cfg_path)]) == 0

    def test_simulate_invalid_exit_one(self, tmp_path, capsys):
        code = main(["simulate", "--runs", "0", "--out", str(tmp_path)])
        assert code == 1
        assert "runs" in capsys.readouterr().err

    def test_verify_corpus(self, tmp_path, capsys, peak_scenario):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        (corpus / "a.json").write_text(json.dumps(scenario_to_dict(peak_scenario)))
        code = main(["verify", "--corpus", str(corpus), "--trials", "500"])
        assert code == 0
        assert "OK" in capsys.readouterr().out

    def test_verify_empty_corpus_exit_one(self, tmp_path, capsys):
        corpus = tmp_path / "empty"
        corpus.mkdir()
        assert main(["verify", "--corpus", str(corpus)]) == 1

    def test_verify_invalid_scenario_exit_one(self, tmp_path, capsys):
        corpus = tmp_path / "bad"
        corpus.mkdir()
        bad = scenario_to_dict(make_scenario([10.0], 5.0, total_price=500.0))
        (corpus / "bad.json").write_text(json.dumps(bad))
        assert main(["verify", "--corpus", str(corpus)]) == 1
