import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from mcan import checkpoint
from mcan.cli import main
from mcan.cues import extract_cues
from mcan.image_core import load_image, save_image

FIXTURES = Path(__file__).parent / "fixtures"
TINY = ["--set", "backbone.img_size=8", "--set", "backbone.d=8", "--set", "backbone.depth=2",
        "--set", "backbone.n_experts=3", "--set", "corpus.img_size=8", "--set", "corpus.n_per_class=6",
        "--set", "holdout_per_class=4", "--set", "train.steps=5", "--set", "train.batch=4"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_unknown_flag_exits_2_without_side_effects(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "-o", str(tmp_path / "out"), "--bogus"])
    assert info.value.code == 2
    assert not (tmp_path / "out").exists()
    assert capsys.readouterr().out == ""


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_process_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "mcan.cli", "--help"], capture_output=True)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "mcan.cli", "infer", "--nope"], capture_output=True)
    assert bad.returncode == 2 and bad.stdout == b""


def test_eval_frozen_checkpoint_matches_stored_accuracy(capsys):
    expected = json.loads((FIXTURES / "toy_expected.json").read_text())["holdout"]
    code, out, _ = run(capsys, "eval", "--model", str(FIXTURES / "toy_model.ckpt"))
    assert code == 0
    got = json.loads(out)
    assert abs(got["accuracy"] - expected["accuracy"]) <= 0.01
    assert set(got["per_cue"]) == {"img", "hf", "ci"}


def test_infer_prints_decision_json(tmp_path, capsys):
    img = np.random.default_rng(0).random((20, 24, 3))  # off-size: resized to the model input
    save_image(img, tmp_path / "x.png")
    code, out, _ = run(capsys, "infer", "--model", str(FIXTURES / "toy_model.ckpt"), "--image", str(tmp_path / "x.png"))
    assert code == 0
    res = json.loads(out)
    assert set(res) >= {"score", "decision", "per_cue"}
    assert set(res["per_cue"]) == {"img", "hf", "ci"}
    assert res["score"] == min(res["per_cue"].values())
    assert res["decision"] == ("real" if res["score"] >= 0.5 else "fake")


def test_infer_missing_image_is_runtime_error(tmp_path, capsys):
    code, out, err = run(capsys, "infer", "--model", str(FIXTURES / "toy_model.ckpt"), "--image", str(tmp_path / "no.png"))
    assert code == 1 and out == "" and "no.png" in err


def test_corrupt_checkpoint_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, out, err = run(capsys, "eval", "--model", str(bad))
    assert code == 1 and out == ""


def test_bad_override_is_runtime_error(tmp_path, capsys):
    code, out, err = run(capsys, "gen-corpus", "-o", str(tmp_path), "--set", "corpus.colour=1")
    assert code == 1 and "colour" in err


def test_gen_corpus_then_extract_cues(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-corpus", "-o", str(tmp_path / "c"), "--set", "corpus.n_per_class=2",
                       "--set", "corpus.img_size=8")
    assert code == 0 and json.loads(out)["counts"] == {"real": 2, "fake": 2}
    code, out, _ = run(capsys, "extract-cues", "--input", str(tmp_path / "c"), "-o", str(tmp_path / "cues"), "--viz")
    assert code == 0 and json.loads(out)["count"] == 4
    src = tmp_path / "c" / "real" / "00000.png"
    header, tensors = checkpoint.load_tensors(tmp_path / "cues" / "real" / "00000.cues")
    expect = extract_cues(load_image(src))
    for name in ("img", "hf", "ci"):
        np.testing.assert_allclose(tensors[name], getattr(expect, name), atol=1e-6)
    assert header["meta"]["eps"] == 1e-3
    assert load_image(tmp_path / "cues" / "real" / "00000_ci.png").shape == (8, 8, 3)


def test_extract_cues_empty_folder(tmp_path, capsys):
    code, _, err = run(capsys, "extract-cues", "--input", str(tmp_path), "-o", str(tmp_path / "o"))
    assert code == 1 and "no PNG/PPM" in err


def test_train_is_byte_reproducible(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", "-o", str(tmp_path / name), *TINY)
        assert code == 0
        outs.append(json.loads(out))
    for f in ("model.ckpt", "metrics.jsonl", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(json_lines((tmp_path / "a" / "metrics.jsonl").read_text())) == 5
    assert len(json_lines((tmp_path / "a" / "timing.jsonl").read_text())) == 5
    assert outs[0]["holdout"] == outs[1]["holdout"]

    # the checkpoint carries its experiment, so eval needs no flags and matches training's report
    code, out, _ = run(capsys, "eval", "--model", str(tmp_path / "a" / "model.ckpt"))
    assert json.loads(out) == outs[0]["holdout"]

    code, out, _ = run(capsys, "inspect-router", "--model", str(tmp_path / "a" / "model.ckpt"))
    rows = json_lines(out)
    assert [(r["layer"], r["cue"]) for r in rows] == [(l, c) for l in (0, 1) for c in ("ci", "hf", "img")]
    for r in rows:
        assert len(r["mean_gate"]) == 3 and sum(r["mean_gate"]) == pytest.approx(1.0)
        assert sum(r["argmax_hist"]) == r["tokens"] == 8 * 5  # 8 samples x (4 patches + class token)


def test_train_on_image_folder(tmp_path, capsys):
    run(capsys, "gen-corpus", "-o", str(tmp_path / "c"), "--set", "corpus.n_per_class=3", "--set", "corpus.img_size=8")
    code, out, _ = run(capsys, "train", "-o", str(tmp_path / "m"), "--data", str(tmp_path / "c"),
                       "--holdout-data", str(tmp_path / "c"), *TINY)
    assert code == 0 and json.loads(out)["holdout"]["n"] == 6


def test_grad_check_passes(capsys):
    code, out, _ = run(capsys, "grad-check", "--n-params", "30")
    res = json.loads(out)
    assert code == 0 and res["passed"]
    assert res["max_rel_error"] < 1e-3 and res["frozen_grads_zero"]


def test_thread_cap_from_environment(monkeypatch, tmp_path, capsys):
    before = torch.get_num_threads()
    monkeypatch.setenv("MCF_THREADS", "1")
    try:
        code, _, _ = run(capsys, "gen-corpus", "-o", str(tmp_path), "--set", "corpus.n_per_class=1",
                         "--set", "corpus.img_size=4")
        assert code == 0 and torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)
