import json

import pytest

from mergcn import container
from mergcn.cli import main, read_config_file, UsageError

FAST = ["--width", "0.03125", "--epochs", "1", "--lr", "1e-2"]


def _manifest(path, records, class_names=("happiness", "disgust")):
    lines = [json.dumps({"header": {"class_names": list(class_names), "normalization": "x/127.5-1"}})]
    for i, (emotion, aus) in enumerate(records):
        lines.append(json.dumps({"id": f"r{i}", "frames_path": f"f{i}.mert", "subject": f"s{i}",
                                 "emotion": emotion, "aus": aus, "num_frames": 8}))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--subjects", "4", "--classes", "3", "--per", "2",
                 "--t", "8", "--seed", "7"]) == 0
    return out


# --- synth --------------------------------------------------------------------


def test_synth_reports_record_count(dataset, tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--seed", "7"]) == 0
    assert "24 records" in capsys.readouterr().out
    assert len((dataset / "manifest.jsonl").read_text().splitlines()) == 25


def test_synth_without_out_is_a_usage_error(capsys):
    assert main(["synth"]) == 2
    assert "usage" in capsys.readouterr().err


def test_synth_into_unwritable_location(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub")]) == 1
    assert "cannot create output directory" in capsys.readouterr().err


# --- graph --------------------------------------------------------------------


def test_graph_prints_example_matrix(tmp_path, capsys):
    m = _manifest(tmp_path / "m.jsonl", [("happiness", [1, 2]), ("happiness", [1]), ("disgust", [2, 4])])
    assert main(["graph", "--manifest", str(m)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("n 3\nvocab 1 2 4\n1 0.5 0\n0.5 1 1\n0 0.5 1\n")
    assert "n=3 zero_columns=0" in out


def test_graph_single_au(tmp_path, capsys):
    m = _manifest(tmp_path / "m.jsonl", [("happiness", [12]), ("disgust", [12])])
    out_file = tmp_path / "adj.txt"
    assert main(["graph", "--manifest", str(m), "--out", str(out_file)]) == 0
    assert out_file.read_text() == "n 1\nvocab 12\n1\n"
    assert "n=1 zero_columns=0" in capsys.readouterr().out


def test_graph_reports_unseen_au_column(tmp_path, capsys):
    m = _manifest(tmp_path / "m.jsonl", [("happiness", [1, 2]), ("disgust", [1])])
    assert main(["graph", "--manifest", str(m), "--vocab", "1,2,3"]) == 0
    assert "zero_columns=1" in capsys.readouterr().out


def test_graph_excluding_a_subject(tmp_path, capsys):
    m = _manifest(tmp_path / "m.jsonl", [("happiness", [1, 2]), ("disgust", [1])])
    assert main(["graph", "--manifest", str(m), "--exclude-subject", "s0"]) == 0
    assert capsys.readouterr().out.startswith("n 1\nvocab 1\n1\n")
    assert main(["graph", "--manifest", str(m), "--exclude-subject", "nobody"]) == 2


def test_graph_invalid_manifest(tmp_path, capsys):
    bad = tmp_path / "m.jsonl"
    bad.write_text("{oops\n")
    assert main(["graph", "--manifest", str(bad)]) == 1
    assert "invalid JSON" in capsys.readouterr().err


# --- train and eval -----------------------------------------------------------


@pytest.fixture(scope="module")
def kfold_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--strategy", "kfold", "--k", "4",
                 "--variant", "mer-gcn", "--seed", "1", "--out", str(out)] + FAST)
    assert code == 0
    return out, json.loads((out / "results.json").read_text())


def test_train_kfold_writes_results_and_checkpoints(kfold_run):
    out, results = kfold_run
    assert results["n_folds"] == 4 and len(results["folds"]) == 4
    assert results["cli"]["k"] == 4 and results["train_config"]["seed"] == 1
    assert results["pooled"]["n_eval"] == 24
    for k in range(4):
        assert (out / f"fold{k}.mert").exists() and (out / f"fold{k}.mert.json").exists()


def test_train_loso_cnn_only(dataset, tmp_path):
    assert main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--strategy", "loso",
                 "--variant", "cnn-only", "--out", str(tmp_path)] + FAST) == 0
    results = json.loads((tmp_path / "results.json").read_text())
    assert results["n_folds"] == 4
    assert not any(name.startswith("gcn.") for name in container.load(tmp_path / "fold0.mert"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_abort_names_fold_and_epoch(dataset, tmp_path, capsys):
    code = main(["train", "--manifest", str(dataset / "manifest.jsonl"), "--strategy", "loso", "--out",
                 str(tmp_path), "--width", "0.03125", "--epochs", "3", "--lr", "1e150", "--clip", "0"])
    assert code == 1
    err = capsys.readouterr().err
    assert "fold 0" in err and "epoch" in err


def test_eval_reproduces_fold_accuracy(dataset, kfold_run, capsys):
    out, results = kfold_run
    fold = results["folds"][2]
    ids = json.loads((out / "fold2.mert.json").read_text())["extra"]["test_ids"]
    metrics_file = out / "eval.json"
    assert main(["eval", "--checkpoint", str(out / "fold2.mert"), "--manifest", str(dataset / "manifest.jsonl"),
                 "--ids", ",".join(ids), "--out", str(metrics_file)]) == 0
    assert json.loads(metrics_file.read_text())["accuracy"] == fold["metrics"]["accuracy"]
    assert "accuracy" in capsys.readouterr().out


def test_eval_class_count_mismatch(dataset, kfold_run, tmp_path, capsys):
    out, _ = kfold_run
    other = tmp_path / "other"
    assert main(["synth", "--out", str(other), "--classes", "2"]) == 0
    assert main(["eval", "--checkpoint", str(out / "fold0.mert"), "--manifest", str(other / "manifest.jsonl")]) == 1
    err = capsys.readouterr().err
    assert "n_classes=3" in err and "2 classes" in err


def test_eval_empty_selection(dataset, kfold_run):
    out, _ = kfold_run
    args = ["eval", "--checkpoint", str(out / "fold0.mert"), "--manifest", str(dataset / "manifest.jsonl")]
    assert main(args + ["--subject", "nobody"]) == 2
    assert main(args + ["--ids", "missing_id"]) == 2


# --- gradcheck ----------------------------------------------------------------


def test_gradcheck_negative_control(capsys):
    assert main(["gradcheck", "--corrupt", "--samples", "1", "--eps", "1e-5"]) == 1
    captured = capsys.readouterr()
    assert "eps=1e-05" in captured.out
    assert "FAIL: worst gcn.layer0.weight" in captured.err


# --- config files -------------------------------------------------------------


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text(f"# synthetic defaults\nout = {tmp_path / 'from_file'}\nsubjects = 2\nclasses = 2\nper = 1\n")
    assert main(["synth", "--config", str(cfg), "--per", "2"]) == 0
    assert "8 records" in capsys.readouterr().out
    assert (tmp_path / "from_file" / "manifest.jsonl").exists()


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "colour" in capsys.readouterr().err


def test_config_file_syntax(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("a = 1\n\n  b=two words  # note\n")
    assert read_config_file(cfg) == {"a": "1", "b": "two words"}
    cfg.write_text("just words\n")
    with pytest.raises(UsageError):
        read_config_file(cfg)
