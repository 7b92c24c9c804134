"""Protocol conformance against the evaluation harness.

These tests exercise the two external interfaces the adapter promises:
the newline-delimited request protocol (driven both raw and through the
harness's external-command backend) and a full grid run bound to the
stub. Each prints a [PASS] line on success, mirroring the harness's own
acceptance suite.
"""
import json
import shlex
import subprocess
import sys
from collections import Counter

from memegrid.backends import BackendRequest, BackendSpec, external_predict
from memegrid.dataset import Record, Split, write_split
from memegrid.gridrun import load_grid_spec, run_grid
from memegrid.labeling import export_training_file
from memegrid.promptkit import LabelKind, Modality, PromptKind

from memegrid_adapter.config import AdapterConfig, load_corpus
from memegrid_adapter.model import load_model, train

from support import stub_model_dir


def _serve_command(model_dir) -> str:
    return " ".join(
        shlex.quote(part)
        for part in (sys.executable, "-m", "memegrid_adapter", "serve", "--model", str(model_dir))
    )


def test_five_hundred_requests_match_as_multisets(tmp_path):
    model_dir = stub_model_dir(tmp_path)
    keys = [f"key-{i:04d}" for i in range(490)] + ["key-0000"] * 10
    payload = "".join(
        json.dumps({"request_key": key, "prompt": f"request for {key}"}) + "\n"
        for key in keys
    )
    proc = subprocess.run(
        [sys.executable, "-m", "memegrid_adapter", "serve", "--model", str(model_dir)],
        input=payload,
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert proc.returncode == 0
    replies = [json.loads(line) for line in proc.stdout.splitlines()]
    assert len(replies) == 500
    assert all("error" not in reply for reply in replies)
    assert Counter(reply["request_key"] for reply in replies) == Counter(keys)
    assert all(reply["text"] == "FALSE" for reply in replies)
    print("[PASS] 500 stub responses match their requests as key multisets")


def test_harness_backend_drives_the_stub(tmp_path):
    model_dir = stub_model_dir(tmp_path)
    spec = BackendSpec(
        id="stub", kind="external_command", command=_serve_command(model_dir)
    )
    requests = [BackendRequest(prompt_text=f"caption number {i}") for i in range(490)]
    requests += [requests[0]] * 10
    responses = external_predict(spec, requests)
    assert len(responses) == 500
    assert all(response.text == "FALSE" for response in responses)
    print("[PASS] the harness external-command backend collects all 500 stub answers")


def test_grid_run_bound_to_stub_completes_and_evaluates(tmp_path):
    model_dir = stub_model_dir(tmp_path)
    records = [
        Record(id=f"r{i:03d}", image_ref=f"img/{i:03d}.png", text=f"caption {i}", label=i % 2)
        for i in range(40)
    ]
    data_path = tmp_path / "test.jsonl"
    write_split(Split(name="test", records=tuple(records)), data_path)

    grid_obj = {
        "v": 1,
        "data": {"eval": str(data_path), "split": "test"},
        "backends": {
            "stub": {"kind": "external_command", "command": _serve_command(model_dir)}
        },
        "arms": [
            {"name": "tuned-stub", "backend": "stub", "modality": "text_only", "finetune": True}
        ],
        "prompts": ["simple"],
        "labels": ["binary", "scale"],
    }
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps(grid_obj), encoding="utf-8")

    table, results = run_grid(load_grid_spec(grid_path), tmp_path / "out", workers=4)
    assert len(results) == 2
    by_label = {config.label: report for config, report in results}

    binary = by_label[LabelKind.BINARY]
    assert binary.n == 40
    assert binary.parse_failure_rate == 0.0
    assert binary.accuracy == 0.5  # constant FALSE on balanced labels

    scale = by_label[LabelKind.SCALE]
    assert scale.parse_failure_rate == 1.0  # FALSE never parses as a 0-9 rating
    assert scale.accuracy == 0.5

    assert len(table.strip().splitlines()) == 2 + 2
    print("[PASS] a grid run bound to the stub backend completes and evaluates")


def test_exported_corpus_trains_directly(tmp_path):
    words = {0: "garden picnic flower", 1: "toxic venom slur"}
    records = [
        Record(
            id=f"r{i:03d}",
            image_ref=f"img/{i:03d}.png",
            text=f"{words[i % 2]} item {i}",
            label=i % 2,
        )
        for i in range(60)
    ]
    corpus_path = tmp_path / "train_export.jsonl"
    written = export_training_file(
        records, PromptKind.SIMPLE, LabelKind.BINARY, Modality.TEXT_ONLY, corpus_path
    )
    examples = load_corpus(corpus_path)
    assert len(examples) == written == 60
    assert {e.target for e in examples} == {"TRUE", "FALSE"}
    assert all(e.image is None for e in examples)

    config = AdapterConfig(
        base_model="bow-v1",
        corpus=str(corpus_path),
        output_dir=str(tmp_path / "model"),
        epochs=20,
        batch_size=8,
        learning_rate=0.5,
        feature_dim=512,
    )
    model_dir, _ = train(config)
    predictor = load_model(model_dir)
    correct = sum(
        predictor.predict(e.prompt) == e.target for e in examples
    )
    assert correct == len(examples)
    print("[PASS] the exported corpus format feeds training without translation")
