import json
from pathlib import Path

import pytest

from clmbench.cli import main
from clmbench.features import read_feature_matrix


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "gen.cfg"
    config.write_text(
        "num_patients = 300\n"
        "seed = 17\n"
        "codes_per_family = 40\n"
        "num_disease_modules = 4\n"
    )
    corpus = root / "cohort.jsonl"
    ontology = root / "ontology.tsv"
    assert main([
        "generate", "--config", str(config),
        "--out-corpus", str(corpus), "--out-ontology", str(ontology),
    ]) == 0
    examples = root / "examples.jsonl"
    assert main([
        "label", "--corpus", str(corpus), "--task", "long_admission",
        "--out", str(examples),
    ]) == 0
    return {"root": root, "corpus": corpus, "ontology": ontology, "examples": examples}


class TestCli:
    def test_generate_writes_manifest(self, workspace):
        manifest = json.loads(
            workspace["corpus"].with_suffix(".manifest.json").read_text()
        )
        assert manifest["seed"] == 17
        assert "corpus_hash" in manifest and "config_hash" in manifest

    def test_featurize_counts(self, workspace):
        out = workspace["root"] / "counts.bin"
        code = main([
            "featurize", "--repr", "counts",
            "--corpus", str(workspace["corpus"]),
            "--ontology", str(workspace["ontology"]),
            "--examples", str(workspace["examples"]),
            "--min-patients", "2",
            "--out", str(out),
            "--opts", "time_bins=true",
        ])
        assert code == 0
        matrix, columns = read_feature_matrix(out)
        assert matrix.shape[0] > 0
        assert matrix.shape[1] == len(columns)

    def test_train_extract_and_fit(self, workspace):
        ckpt = workspace["root"] / "lm.ckpt"
        code = main([
            "train-lm",
            "--corpus", str(workspace["corpus"]),
            "--ontology", str(workspace["ontology"]),
            "--out", str(ckpt),
            "--embedding-size", "8", "--gru-hidden", "8",
            "--lr", "0.01", "--epochs", "2", "--batch-days", "400",
            "--min-patients", "2",
        ])
        assert code == 0
        assert ckpt.exists() and ckpt.with_suffix(".trace.csv").exists()
        reps = workspace["root"] / "reps.bin"
        assert main([
            "extract", "--corpus", str(workspace["corpus"]),
            "--model", str(ckpt),
            "--examples", str(workspace["examples"]),
            "--out", str(reps),
        ]) == 0
        predictions = workspace["root"] / "preds.csv"
        assert main([
            "fit", "--model", "logistic",
            "--features", str(reps),
            "--examples", str(workspace["examples"]),
            "--out", str(predictions), "--C", "1.0",
        ]) == 0
        lines = predictions.read_text().strip().splitlines()
        assert lines[0] == "example_id,score,label"
        assert len(lines) > 1

    def test_benchmark_run_and_report(self, workspace):
        config = workspace["root"] / "bench.cfg"
        config.write_text(
            "\n".join(
                [
                    "seed = 5",
                    f"out_root = {workspace['root'] / 'runs'}",
                    "tasks = long_admission",
                    "representations = counts",
                    "models = logistic",
                    "cohort.num_patients = 400",
                    "cohort.codes_per_family = 40",
                    "cohort.modules = 4",
                    "vocab.min_patients = 2",
                    "logistic.c_grid = 1.0",
                    "bootstrap.samples = 10",
                    "subsample.enabled = false",
                ]
            )
        )
        assert main(["benchmark", "run", "--config", str(config)]) == 0
        run_dirs = list((workspace["root"] / "runs").glob("run-*"))
        assert len(run_dirs) == 1
        manifest = run_dirs[0] / "manifest.json"
        assert main([
            "benchmark", "report", "--manifest", str(manifest), "--format", "csv",
        ]) == 0
        assert (run_dirs[0] / "subsampling.csv").exists()

    def test_config_error_exit_code(self, workspace, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("not.a.key = 1\n")
        assert main(["benchmark", "run", "--config", str(bad)]) == 2
