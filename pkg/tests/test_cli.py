import json

import numpy as np
import pytest

from gpgnn.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

from conftest import make_sentence


TINY_CONFIG = dict(
    layers=2, d_n=4, learning_rate=0.01, batch_size=6, dropout=0.0,
    hidden_size=6, epochs=2, patience=3, seed=1, word_dim=5, position_dim=2,
)


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = main(["synth", "--out", str(out), "--seed", "4", "--sentences", "24",
                 "--entities", "12", "--relations", "2", "--chains", "1",
                 "--splits", "0.5,0.25,0.25"])
    assert code == EXIT_OK
    return out


def write_config(tmp_path, **overrides):
    cfg = {**TINY_CONFIG, **overrides}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err.lower()


def test_no_subcommand_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["preprocess", "--out", "x"]) == EXIT_USAGE


def test_missing_file_is_data_error(tmp_path, capsys):
    assert main(["preprocess", "--input", str(tmp_path / "nope.jsonl"),
                 "--relations", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_synth_writes_expected_files(synth_dir):
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "relations.json",
                 "inverse_map.json", "synth_meta.json", "manifest.json"):
        assert (synth_dir / name).exists(), name
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 4
    assert manifest["counts"]["train"] == 12


def test_preprocess_skips_oversized_sentence_and_counts_it(tmp_path):
    relations = tmp_path / "relations.json"
    relations.write_text(json.dumps(["NA", "part of", "has a member"]))
    inverse = tmp_path / "inverse.json"
    inverse.write_text(json.dumps({"part of": "has a member", "has a member": "part of"}))

    tokens = [f"t{k}" for k in range(12)]
    big = make_sentence("big", tokens, [(k, k + 1) for k in range(10)], [])
    ok = make_sentence("ok", ["earth", "in", "space"], [(0, 1), (2, 3)], [(0, 1, "part of")])
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(ok.to_json() + "\n" + big.to_json() + "\n")

    out = tmp_path / "pre"
    code = main(["preprocess", "--input", str(corpus), "--relations", str(relations),
                 "--inverse-map", str(inverse), "--out", str(out), "--splits", "1.0,0.0,0.0",
                 "--dense"])
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"]["skipped"] == {"too_many_entities": 1}
    assert manifest["counts"]["split_sizes"]["train"] == 1
    assert (out / "test_dense.jsonl").exists()
    train_lines = (out / "train.jsonl").read_text().strip().splitlines()
    triples = json.loads(train_lines[0])["triples"]
    assert len(triples) == 2  # gold + reversed


def test_train_eval_predict_roundtrip(tmp_path, synth_dir):
    cfg = write_config(tmp_path)
    run = tmp_path / "run"
    code = main(["train", "--train", str(synth_dir / "train.jsonl"),
                 "--valid", str(synth_dir / "valid.jsonl"),
                 "--relations", str(synth_dir / "relations.json"),
                 "--inverse-map", str(synth_dir / "inverse_map.json"),
                 "--config", str(cfg), "--out", str(run)])
    assert code == EXIT_OK
    for name in ("checkpoint.bin", "run_log.jsonl", "model.json", "manifest.json"):
        assert (run / name).exists(), name
    log_lines = [json.loads(l) for l in (run / "run_log.jsonl").read_text().splitlines()]
    assert log_lines[0]["event"] == "config"
    assert all("wall_ms" in e for e in log_lines)

    ev = tmp_path / "eval"
    code = main(["eval", "--model-dir", str(run), "--data", str(synth_dir / "test.jsonl"),
                 "--out", str(ev)])
    assert code == EXIT_OK
    report = json.loads((ev / "metrics.json").read_text())
    assert 0.0 <= report["accuracy"] <= 1.0
    assert set(report["p_at"]) <= {"5", "10", "15", "20"}
    assert (ev / "predictions.jsonl").exists()
    assert (ev / "pr_curve.csv").exists()

    pr = tmp_path / "pred"
    code = main(["predict", "--model-dir", str(run), "--data", str(synth_dir / "test.jsonl"),
                 "--out", str(pr)])
    assert code == EXIT_OK
    lines = (pr / "predictions.jsonl").read_text().strip().splitlines()
    test_sentences = (synth_dir / "test.jsonl").read_text().strip().splitlines()
    assert len(lines) == 6 * len(test_sentences)  # m=3 -> 6 ordered pairs each
    record = json.loads(lines[0])
    assert abs(sum(record["probs"]) - 1.0) < 1e-9


def test_layer_and_seed_overrides_land_in_manifest(tmp_path, synth_dir):
    cfg = write_config(tmp_path)
    run = tmp_path / "run1"
    code = main(["train", "--train", str(synth_dir / "train.jsonl"),
                 "--valid", str(synth_dir / "valid.jsonl"),
                 "--relations", str(synth_dir / "relations.json"),
                 "--config", str(cfg), "--out", str(run), "--seed", "9", "--layers", "1"])
    assert code == EXIT_OK
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 9
    assert manifest["config"]["layers"] == 1
    assert manifest["seed"] == 9


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "7", "--layers", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "max relative error" in out
    # an absurd tolerance forces the failure path
    assert main(["gradcheck", "--seed", "7", "--layers", "1", "--tol", "1e-18"]) == EXIT_NUMERIC


def test_numeric_failure_exit_code_from_training(tmp_path, synth_dir):
    cfg = write_config(tmp_path, learning_rate=1e300, clip_norm=0.0, epochs=3)
    run = tmp_path / "run2"
    with np.errstate(all="ignore"):
        code = main(["train", "--train", str(synth_dir / "train.jsonl"),
                     "--valid", str(synth_dir / "valid.jsonl"),
                     "--relations", str(synth_dir / "relations.json"),
                     "--config", str(cfg), "--out", str(run)])
    assert code == EXIT_NUMERIC
