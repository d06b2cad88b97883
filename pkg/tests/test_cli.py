import csv
import json
import subprocess
from pathlib import Path

import numpy as np
import pytest

from stcausal.cli import main

from conftest import chain_spec


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full artifact flow: simulate-data -> learn -> diagnose -> predict
    -> query -> score, with reruns for determinism checks."""
    root = tmp_path_factory.mktemp("cli")

    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(chain_spec(seed=42, n_locations=40, n_weeks=100).to_doc()))

    config_path = root / "learn_config.json"
    config_path.write_text(json.dumps({
        "fit": {"max_iterations": 10, "tolerance": 1e-5},
        "search": {"patience": 10, "restarts": 1, "max_steps": 150, "perturb_moves": 2},
    }))

    sim, sim2 = root / "sim", root / "sim2"
    for out in (sim, sim2):
        assert run("simulate-data", "--spec", spec_path, "--output", out) == 0

    learn_argv = (
        "learn", "--data", sim / "dataset.json", "--config", config_path,
        "--c", "2.0", "--bootstrap", "4", "--threshold", "0.5", "--seed", "11",
    )
    learn1, learn2, learn_t2 = root / "learn1", root / "learn2", root / "learn_t2"
    assert run(*learn_argv, "--output", learn1) == 0
    assert run(*learn_argv, "--output", learn2) == 0
    assert run(*learn_argv, "--output", learn_t2, "--threads", "2") == 0

    diag = root / "diag"
    assert run(
        "diagnose", "--data", sim / "dataset.json",
        "--model", learn1 / "model.json", "--output", diag,
    ) == 0

    weeks = json.loads((sim / "dataset.json").read_text())["schema"]["weeks"]
    pred = root / "pred"
    assert run(
        "predict", "--data", sim / "dataset.json", "--model", learn1 / "model.json",
        "--config", config_path, "--train-end", weeks[69], "--val-start", weeks[75],
        "--output", pred,
    ) == 0

    loc0 = json.loads((sim / "dataset.json").read_text())["schema"]["locations"][0]["id"]
    queries_path = root / "queries.json"
    queries_path.write_text(json.dumps({"queries": [
        {"type": "intervention", "horizon": 4, "draws": 30,
         "spec": {"kind": "scale", "target": "p1", "factor": 1.0}},
        {"type": "attribution", "outcome": "c1", "draws": 200},
        {"type": "mediation", "exposure": "w1", "mediators": ["p1"],
         "outcome": "c1", "lag": 2, "draws": 200},
        {"type": "counterfactual", "node": "w1", "location": loc0,
         "week": weeks[2], "value": 1.0, "horizon": 3},
    ]}))
    querydir = root / "query"
    assert run(
        "query", "--data", sim / "dataset.json", "--model", learn1 / "model.json",
        "--queries", queries_path, "--seed", "3", "--output", querydir,
    ) == 0

    # a competitor missing the true w1 -> p1 arc, refit and saved
    from stcausal import FitConfig, TwoSliceDag, fit_model
    from stcausal.panel import PanelDataset

    ds = PanelDataset.from_json((sim / "dataset.json").read_text())
    wrong_dag = TwoSliceDag(
        ("w1", "p1", "c1"),
        frozenset({("p1", "c1")}),
        frozenset({("w1", "w1"), ("p1", "p1"), ("c1", "c1")}),
    )
    wrong = fit_model(ds, wrong_dag, config=FitConfig(max_iterations=8, tolerance=1e-5))
    wrong_path = root / "wrong.json"
    wrong.save(wrong_path)

    scoredir = root / "score"
    assert run(
        "score", "--data", sim / "dataset.json",
        "--models", sim / "truth_model.json", wrong_path,
        "--c-grid", "2,8", "--output", scoredir,
    ) == 0

    return {
        "root": root, "sim": sim, "sim2": sim2,
        "learn1": learn1, "learn2": learn2, "learn_t2": learn_t2,
        "diag": diag, "pred": pred, "query": querydir, "score": scoredir,
    }


def artifact_bytes(outdir):
    return {
        p.name: p.read_bytes()
        for p in sorted(Path(outdir).iterdir())
        if not p.name.endswith(".meta.json")
    }


class TestPipeline:
    def test_simulate_data_writes_panel_and_truth(self, pipeline):
        sim = pipeline["sim"]
        for name in ("data.csv", "dataset.json", "truth_model.json"):
            assert (sim / name).exists()
        doc = json.loads((sim / "dataset.json").read_text())
        assert doc["provenance"]["seed"] == 42
        assert doc["provenance"]["config_hash"]

    def test_simulate_data_replays_byte_identical(self, pipeline):
        assert artifact_bytes(pipeline["sim"]) == artifact_bytes(pipeline["sim2"])

    def test_learn_recovers_the_generating_structure(self, pipeline):
        model = json.loads((pipeline["learn1"] / "model.json").read_text())
        truth = json.loads((pipeline["sim"] / "truth_model.json").read_text())
        for key in ("intra_arcs", "inter_arcs"):
            assert sorted(model["dag"][key]) == sorted(truth["dag"][key])
        strengths = json.loads(
            (pipeline["learn1"] / "structure.json").read_text()
        )["arc_strengths"]
        assert strengths  # bootstrap support table present

    def test_learn_rerun_byte_identical(self, pipeline):
        assert artifact_bytes(pipeline["learn1"]) == artifact_bytes(pipeline["learn2"])

    def test_thread_count_leaves_artifacts_unchanged(self, pipeline):
        assert artifact_bytes(pipeline["learn1"]) == artifact_bytes(pipeline["learn_t2"])

    def test_artifacts_carry_provenance(self, pipeline):
        doc = json.loads((pipeline["learn1"] / "model.json").read_text())
        prov = doc["provenance"]
        assert prov["seed"] == 11
        assert prov["config_hash"] and prov["dataset_hash"]

    def test_diagnose_is_clean_on_a_well_specified_run(self, pipeline):
        doc = json.loads((pipeline["diag"] / "diagnostics.json").read_text())
        for family, prop in doc["rejection_proportions"].items():
            assert prop is not None and prop <= 0.05, (family, prop)
        text = (pipeline["diag"] / "diagnostics.txt").read_text()
        for family in ("temporal", "spatial", "heterogeneity"):
            assert family in text

    def test_predict_reports_real_skill(self, pipeline):
        doc = json.loads((pipeline["pred"] / "predict.json").read_text())
        avg = doc["r2"]["average"]
        assert avg is not None and 0.3 < avg <= 1.0

    def test_scale_one_gives_an_all_zero_delta_column(self, pipeline):
        with open(pipeline["query"] / "trajectories.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows
        assert all(float(r["delta_mean"]) == 0.0 for r in rows)

    def test_query_results_cover_all_four_kinds(self, pipeline):
        doc = json.loads((pipeline["query"] / "query_results.json").read_text())
        results = doc["queries"]
        kinds = [r["type"] for r in results]
        assert kinds == ["intervention", "attribution", "mediation", "counterfactual"]
        assert [r["seed"] for r in results[:3]] == [3, 4, 5]  # replayable per query
        shares = results[1]["shares"]
        assert sum(shares.values()) == pytest.approx(1.0, abs=1e-6)
        assert results[2]["share"] == pytest.approx(0.0, abs=0.1)
        deltas = results[3]["deltas"]
        assert len(deltas["c1"]) == 4
        assert any(d != 0.0 for d in deltas["c1"])

    def test_score_sweep_favors_the_truth(self, pipeline):
        doc = json.loads((pipeline["score"] / "score.json").read_text())
        assert doc["models"] == ["truth_model", "wrong"]
        assert len(doc["sweep"]) == 2
        for entry in doc["sweep"]:
            assert entry["log_bf_vs_first"]["wrong"] < 0.0


class TestErrorReporting:
    def read_error(self, capsys):
        err = capsys.readouterr().err.strip().splitlines()[-1]
        return json.loads(err)

    def test_csv_without_schema(self, tmp_path, capsys):
        code = run("ingest", "--data", tmp_path / "x.csv", "--output", tmp_path)
        assert code == 2
        doc = self.read_error(capsys)
        assert doc["error"] == "UnknownColumnError"
        assert doc["exit_code"] == 2

    def test_missing_data_file(self, tmp_path, capsys):
        code = run(
            "diagnose", "--data", tmp_path / "absent.json",
            "--model", tmp_path / "absent_model.json", "--output", tmp_path,
        )
        assert code == 2
        assert "message" in self.read_error(capsys)

    def test_learn_requires_a_seed(self, tmp_path, capsys):
        code = run("learn", "--data", tmp_path / "d.json", "--output", tmp_path)
        assert code == 2
        assert "seed" in self.read_error(capsys)["message"]

    def test_query_requires_a_seed(self, tmp_path, capsys):
        code = run(
            "query", "--data", tmp_path / "d.json", "--model", tmp_path / "m.json",
            "--queries", tmp_path / "q.json", "--output", tmp_path,
        )
        assert code == 2
        assert "seed" in self.read_error(capsys)["message"]

    def test_malformed_spec_json(self, tmp_path, capsys):
        bad = tmp_path / "spec.json"
        bad.write_text("{not json")
        code = run("simulate-data", "--spec", bad, "--output", tmp_path)
        assert code == 2
        assert self.read_error(capsys)["error"] == "JSONDecodeError"


class TestSmallCommands:
    def test_simulate_data_prints_its_seed(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(chain_spec(seed=1, n_locations=6, n_weeks=10).to_doc()))
        assert run("simulate-data", "--spec", spec, "--output", tmp_path / "out") == 0
        assert "seed: 1" in capsys.readouterr().out

    def test_ingest_filters_and_reports(self, tmp_path, capsys):
        from stcausal.panel import PanelDataset, default_schema

        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(
            chain_spec(seed=2, n_locations=8, n_weeks=12, missing_rate=0.05).to_doc()
        ))
        out = tmp_path / "sim"
        assert run("simulate-data", "--spec", spec, "--output", out) == 0
        ds = PanelDataset.from_json((out / "dataset.json").read_text())
        schema = tmp_path / "schema.json"
        schema.write_text(json.dumps(default_schema(ds)))

        ingested = tmp_path / "ingested"
        assert run(
            "ingest", "--data", out / "data.csv", "--schema", schema,
            "--max-missing", "0.5", "--output", ingested,
        ) == 0
        assert "ingested 8 locations" in capsys.readouterr().out
        assert (ingested / "dataset.json").exists()

    def test_console_script_is_installed(self):
        proc = subprocess.run(
            ["stcausal", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "subcommand" in proc.stdout or "usage" in proc.stdout
