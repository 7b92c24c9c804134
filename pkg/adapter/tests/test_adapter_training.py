"""Training, persistence, and the classifier's ability to fit a corpus."""
import json

import numpy as np
import pytest

from memegrid_adapter.cli import main
from memegrid_adapter.config import AdapterConfig, CorpusError
from memegrid_adapter.model import (
    BowPredictor,
    ModelError,
    StubPredictor,
    caption_of,
    hashed_features,
    load_model,
    train,
)

from support import prompt_for, separable_rows, write_corpus


def _bow_config(tmp_path, rows, **overrides):
    corpus = write_corpus(tmp_path / "corpus.jsonl", rows)
    kwargs = dict(
        base_model="bow-v1",
        corpus=str(corpus),
        output_dir=str(tmp_path / "model"),
        epochs=20,
        batch_size=8,
        learning_rate=0.5,
        weight_decay=0.0,
        feature_dim=512,
        seed=0,
    )
    kwargs.update(overrides)
    return AdapterConfig(**kwargs)


def test_caption_extraction():
    assert caption_of("instr\nCaption: a dog") == "a dog"
    assert caption_of("a\nCaption: first\nCaption: second") == "second"
    assert caption_of("no marker here") == "no marker here"


def test_hashed_features_are_deterministic_presence_vectors():
    a = hashed_features("Sunny sunny GARDEN", 64)
    b = hashed_features("sunny garden", 64)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0}
    assert a.sum() >= 1.0


def test_stub_train_writes_marker_directory(tmp_path):
    corpus = write_corpus(tmp_path / "corpus.jsonl", [("x", "FALSE")])
    config = AdapterConfig(
        base_model="stub", corpus=str(corpus), output_dir=str(tmp_path / "model")
    )
    model_dir, summary = train(config)
    manifest = json.loads((model_dir / "adapter.json").read_text(encoding="utf-8"))
    assert manifest["mode"] == "stub"
    assert manifest["examples"] == 1
    assert summary["mode"] == "stub"
    assert not (model_dir / "weights.npz").exists()
    assert isinstance(load_model(model_dir), StubPredictor)


def test_stub_train_still_requires_a_real_corpus(tmp_path):
    empty = tmp_path / "corpus.jsonl"
    empty.write_text("", encoding="utf-8")
    config = AdapterConfig(
        base_model="stub", corpus=str(empty), output_dir=str(tmp_path / "model")
    )
    with pytest.raises(CorpusError):
        train(config)


def test_classifier_fits_a_separable_corpus(tmp_path):
    rows = separable_rows()
    config = _bow_config(tmp_path, rows)
    model_dir, summary = train(config)
    assert summary["mode"] == "bow"
    assert summary["classes"] == ["FALSE", "TRUE"]
    predictor = load_model(model_dir)
    assert isinstance(predictor, BowPredictor)
    correct = sum(
        predictor.predict(prompt_for(caption)) == target for caption, target in rows
    )
    assert correct == len(rows)


def test_classifier_handles_scale_targets(tmp_path):
    words = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
    rows = [
        (f"severity {words[d]} sample {i}", str(d)) for d in range(10) for i in range(5)
    ]
    config = _bow_config(tmp_path, rows, epochs=60)
    model_dir, summary = train(config)
    assert summary["classes"] == [str(d) for d in range(10)]
    predictor = load_model(model_dir)
    correct = sum(
        predictor.predict(prompt_for(caption)) == target for caption, target in rows
    )
    assert correct == len(rows)


def test_training_is_deterministic_per_seed(tmp_path):
    rows = separable_rows(per_class=10)
    dir_a, _ = train(_bow_config(tmp_path, rows, output_dir=str(tmp_path / "a")))
    dir_b, _ = train(_bow_config(tmp_path, rows, output_dir=str(tmp_path / "b")))
    with np.load(dir_a / "weights.npz") as wa, np.load(dir_b / "weights.npz") as wb:
        assert np.array_equal(wa["weights"], wb["weights"])
        assert np.array_equal(wa["bias"], wb["bias"])
    dir_c, _ = train(_bow_config(tmp_path, rows, output_dir=str(tmp_path / "c"), seed=1))
    with np.load(dir_a / "weights.npz") as wa, np.load(dir_c / "weights.npz") as wc:
        assert not np.array_equal(wa["weights"], wc["weights"])


def test_save_load_round_trip_preserves_predictions(tmp_path):
    rows = separable_rows(per_class=10)
    config = _bow_config(tmp_path, rows)
    model_dir, _ = train(config)
    first = load_model(model_dir)
    second = load_model(model_dir)
    for caption, _ in rows:
        assert first.predict(prompt_for(caption)) == second.predict(prompt_for(caption))


def test_load_model_rejects_broken_directories(tmp_path):
    with pytest.raises(ModelError, match="adapter.json"):
        load_model(tmp_path)
    (tmp_path / "adapter.json").write_text("{", encoding="utf-8")
    with pytest.raises(ModelError, match="unreadable"):
        load_model(tmp_path)
    (tmp_path / "adapter.json").write_text(
        json.dumps({"format": 1, "mode": "bow", "classes": ["A"]}), encoding="utf-8"
    )
    with pytest.raises(ModelError, match="weights.npz"):
        load_model(tmp_path)
    (tmp_path / "adapter.json").write_text(
        json.dumps({"format": 99, "mode": "stub"}), encoding="utf-8"
    )
    with pytest.raises(ModelError, match="format"):
        load_model(tmp_path)


def test_cli_train_prints_summary(tmp_path, capsys):
    corpus = write_corpus(tmp_path / "corpus.jsonl", separable_rows(per_class=5))
    config_path = tmp_path / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "base_model": "bow-v1",
                "corpus": str(corpus),
                "output_dir": str(tmp_path / "model"),
                "epochs": 2,
                "learning_rate": 0.5,
            }
        ),
        encoding="utf-8",
    )
    assert main(["train", "--config", str(config_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["mode"] == "bow"
    assert summary["model_dir"] == str(tmp_path / "model")
    assert (tmp_path / "model" / "adapter.json").exists()


def test_cli_train_maps_user_errors_to_exit_one(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert "error:" in capsys.readouterr().err
