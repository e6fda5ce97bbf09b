import csv
import subprocess
import sys

import pytest
import yaml

from ehrlab.cli import main
from ehrlab.scenarios import precursor_code

TINY = {
    "generator": {"n_patients": 300, "seed": 3,
                  "plants": [{"outcome": "DZ99", "precursors": [precursor_code("diagnosis", seed=3)], "effect": 3.0,
                              "base": -2.0}]},
    "model": {"layers": 1, "heads": 2, "hidden": 8, "intermediate": 8},
    "pretrain": {"epochs": 1, "batch_size": 64},
    "finetune": {"epochs": 1, "batch_size": 64},
    "run": {"folds": 2},
    "tasks": ["synthetic_outcome"],
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "exp.yaml").write_text(yaml.safe_dump(TINY))
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_pipeline_end_to_end(workdir):
    cfg = workdir / "exp.yaml"
    assert run("synth", "--config", cfg, "--out", workdir / "raw") == 0
    assert (workdir / "raw" / "patients.tsv").exists()
    assert run("process", "--config", cfg, "--input", workdir / "raw", "--out", workdir / "clean") == 0
    assert (workdir / "clean" / "vocab.tsv").exists()
    assert run("label", "--config", cfg, "--input", workdir / "clean", "--out", workdir / "labels") == 0
    rows = list(csv.DictReader(open(workdir / "labels" / "labels_synthetic_outcome.csv")))
    assert {r["label"] for r in rows} == {"0", "1"}
    assert run("pretrain", "--config", cfg, "--input", workdir / "clean", "--out", workdir / "pt") == 0
    assert run("finetune", "--config", cfg, "--input", workdir / "clean", "--checkpoint",
               workdir / "pt" / "pretrain.npz", "--out", workdir / "ft") == 0
    predictions = workdir / "ft" / "predictions_synthetic_outcome.csv"
    assert predictions.exists()
    assert (workdir / "ft" / "history_synthetic_outcome.csv").read_text().startswith("epoch,split,metric,value")
    assert run("evaluate", "--predictions", predictions, "--out", workdir / "eval") == 0
    metrics = list(csv.DictReader(open(workdir / "eval" / "metrics.csv")))
    assert 0.0 <= float(metrics[0]["auroc"]) <= 1.0


def test_replay_and_report(tmp_path, capsys):
    assert run("replay", "--out", tmp_path) == 0
    printed = capsys.readouterr().out
    assert "accepted path: +Medication, +FV+Sex" in printed
    table = (tmp_path / "ablation_table.txt").read_text()
    (tmp_path / "ablation_table.txt").unlink()
    assert run("report", "--out", tmp_path) == 0
    assert (tmp_path / "ablation_table.txt").read_text() == table


def test_replay_auprc(tmp_path):
    assert run("replay", "--metric", "auprc", "--out", tmp_path) == 0


def test_validation_errors_exit_2(tmp_path, workdir):
    assert run("nonsense") == 2
    assert run("synth", "--seed", "-1") == 2
    assert run("synth", "--seed", str(2 ** 64)) == 2
    assert run("report", "--trace", tmp_path / "missing.json") == 2
    assert run("replay", "--table", tmp_path / "missing.csv") == 2
    assert run("label", "--input", workdir / "raw") == 2  # no task
    assert run("process", "--input", tmp_path / "absent") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("generator: {n_patients: 5}\nsurprise: {}\n")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    bad.write_text("generator: {n_pateints: 5}\n")
    assert run("synth", "--config", bad, "--out", tmp_path) == 2
    bad.write_text("plan: {baseline: {label: b}, steps: [{name: s, candidates: [{label: x, changes: {model.nope: 1}}]}]}\n")
    assert run("replay", "--config", bad, "--out", tmp_path) == 2
    bad.write_text("plan: {baseline: {label: nowhere}}\n")
    assert run("replay", "--config", bad, "--out", tmp_path) == 2


def test_runtime_failure_exits_1(tmp_path):
    garbage = tmp_path / "pred.csv"
    garbage.write_text("patient_id,label,score\na,1,0.5\n")  # one class only
    assert run("evaluate", "--predictions", garbage, "--out", tmp_path) == 1


def test_seed_accepts_full_u64(tmp_path):
    assert run("synth", "--seed", str(2 ** 64 - 1), "--n-patients", "3", "--out", tmp_path) == 0


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "ehrlab", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for name in ("synth", "process", "label", "pretrain", "finetune", "evaluate", "ablate", "replay", "report"):
        assert name in done.stdout
