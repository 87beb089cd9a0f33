import json

import numpy as np
import pytest

from spdg.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = main(["gen-data", "--out-dir", str(out), "--seed", "7",
                 "--n-per-cell", "12", "--domains", "photo,cartoon,sketch"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory, cli_dataset):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", "--dataset", str(cli_dataset), "--held-out", "sketch",
                 "--epochs", "1", "--batch-size", "8", "--mc-samples", "2",
                 "--seed", "3", "--out-dir", str(out)])
    assert code == 0
    return out


def test_gen_data_reports_summary(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "gen-data", "--out-dir", str(tmp_path / "d"),
                           "--seed", "0", "--n-per-cell", "10")
    assert code == 0
    payload = json.loads(out)
    assert payload["samples"] == 10 * 4 * 4
    assert (tmp_path / "d" / "samples.spdg").exists()


def test_train_emits_summary(capsys, cli_dataset, tmp_path):
    code, out, _ = run_cli(capsys, "train", "--dataset", str(cli_dataset),
                           "--held-out", "sketch", "--epochs", "1",
                           "--batch-size", "8", "--mc-samples", "2",
                           "--seed", "1", "--out-dir", str(tmp_path / "r"))
    assert code == 0
    payload = json.loads(out)
    assert payload["final_checkpoint"]
    assert len(payload["val_accuracies"]) == 1


def test_infer_round_trip(capsys, cli_dataset, cli_run):
    code, out, _ = run_cli(capsys, "infer", "--checkpoint", str(cli_run / "final"),
                           "--bundle", str(cli_run / "bundle"),
                           "--dataset", str(cli_dataset), "--index", "5")
    assert code == 0
    payload = json.loads(out)
    assert payload["predicted_class"] in ["dog", "elephant", "guitar", "horse"]
    assert set(payload["scores"]) == {"dog", "elephant", "guitar", "horse"}


def test_similarity_report_command(capsys, cli_dataset, cli_run, tmp_path):
    code, out, _ = run_cli(capsys, "similarity-report",
                           "--checkpoint", str(cli_run / "final"),
                           "--bundle", str(cli_run / "bundle"),
                           "--dataset", str(cli_dataset), "--domain", "sketch",
                           "--out-dir", str(tmp_path / "sim"))
    assert code == 0
    payload = json.loads(out)
    assert payload["rows"] == 48  # 4 classes x 12 per cell
    header = (tmp_path / "sim" / "similarity_report.csv").read_text().splitlines()[0]
    assert header.endswith(",learned")


def test_eval_lodo_with_matrix_file(capsys, cli_dataset, tmp_path):
    matrix = tmp_path / "matrix.json"
    matrix.write_text(json.dumps({
        "dataset": str(cli_dataset),
        "methods": ["baseline_C", "baseline_PC"],
        "seeds": [0],
        "config": {"epochs": 1, "batch_size": 8, "mc_samples": 2},
    }))
    code, out, _ = run_cli(capsys, "eval-lodo", "--matrix", str(matrix),
                           "--out-dir", str(tmp_path / "lodo"))
    assert code == 0
    payload = json.loads(out)
    assert set(payload["averages"]) == {"baseline_C", "baseline_PC"}
    report = json.loads((tmp_path / "lodo" / "lodo_report.json").read_text())
    assert not report["partial"]


def test_error_json_on_stderr(capsys, tmp_path):
    code, out, err = run_cli(capsys, "train", "--dataset", str(tmp_path / "missing"),
                             "--out-dir", str(tmp_path / "r"))
    assert code != 0
    payload = json.loads(err)
    assert payload["error"]
    assert payload["message"]


def test_missing_out_dir_is_config_error(capsys, cli_dataset):
    code, _, err = run_cli(capsys, "gen-data", "--seed", "0")
    assert code == 2
    assert json.loads(err)["error"] == "config_error"


def test_precision_flag_stores_f32(capsys, tmp_path):
    code, _, _ = run_cli(capsys, "gen-data", "--out-dir", str(tmp_path / "d32"),
                         "--seed", "0", "--n-per-cell", "10", "--precision", "f32")
    assert code == 0
    from spdg.blob import read_blob
    assert read_blob(tmp_path / "d32" / "samples.spdg").dtype == np.float32


def test_train_determinism_across_cli_runs(capsys, cli_dataset, tmp_path):
    paths = []
    for name in ("r1", "r2"):
        code, *_ = run_cli(capsys, "train", "--dataset", str(cli_dataset),
                           "--held-out", "photo", "--epochs", "1",
                           "--batch-size", "8", "--mc-samples", "2",
                           "--seed", "11", "--threads", "1",
                           "--out-dir", str(tmp_path / name))
        assert code == 0
        paths.append(tmp_path / name)
    assert (paths[0] / "metrics.ndjson").read_bytes() == (paths[1] / "metrics.ndjson").read_bytes()
    for blob in sorted((paths[0] / "final").glob("*.spdg")):
        assert blob.read_bytes() == (paths[1] / "final" / blob.name).read_bytes()
