import io
import json
import os

import numpy as np
import pytest

from fabgpt.cli import main
from fabgpt.services.detect_service import read_map


def test_gen_writes_manifest(tiny_workspace):
    with open(os.path.join(tiny_workspace["data"], "manifest.json")) as f:
        manifest = json.load(f)
    assert {"train", "test"} <= set(manifest["splits"])
    assert os.path.exists(os.path.join(tiny_workspace["data"], "run.json"))


def test_train_writes_log_and_record(tiny_workspace):
    run_dir = os.path.dirname(tiny_workspace["ckpt"])
    with open(os.path.join(run_dir, "train_log.jsonl")) as f:
        steps = [json.loads(line) for line in f if line.strip()]
    assert [s["tag"] for s in steps] == ["A", "A", "B"]
    assert all(set(s["losses"]) >= {"focal", "dice", "ce1", "ce2", "gate", "total"} for s in steps)
    with open(os.path.join(run_dir, "run.json")) as f:
        record = json.load(f)
    assert record["status"] == "success"
    assert record["seed"] == 3


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 1}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "train.epochz" in capsys.readouterr().err


def test_zero_epochs_exits_1(tmp_path, tiny_workspace):
    cfg = json.loads(open(tiny_workspace["config"]).read())
    cfg["train"]["epochs"] = 0
    path = tmp_path / "zero.json"
    path.write_text(json.dumps(cfg))
    code = main(["train", "--config", str(path), "--data", tiny_workspace["data"],
                 "--out", str(tmp_path / "m.ckpt")])
    assert code == 1
    assert not (tmp_path / "m.ckpt").exists()


def test_usage_error_exits_1():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def test_missing_checkpoint_exits_1(tmp_path, tiny_workspace):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", tiny_workspace["data"],
                 "--report", str(tmp_path / "r.json")]) == 1


def test_oracle_eval_is_perfect(tmp_path, tiny_workspace):
    report = tmp_path / "oracle.json"
    csv = tmp_path / "oracle.csv"
    assert main(["eval", "--ckpt", tiny_workspace["ckpt"], "--data", tiny_workspace["data"],
                 "--report", str(report), "--csv", str(csv), "--oracle", "--no-qa"]) == 0
    data = json.loads(report.read_text())
    assert data["oracle"] is True
    for metric in ("image_auc", "pixel_auc", "pro", "ap"):
        assert data["average"][metric] == pytest.approx(1.0)
    assert csv.read_text().splitlines()[0] == "class,image_auc,pixel_auc,pro,ap"


def test_eval_with_qa(tmp_path, tiny_workspace):
    report = tmp_path / "report.json"
    assert main(["eval", "--ckpt", tiny_workspace["ckpt"], "--data", tiny_workspace["data"],
                 "--report", str(report), "--heatmaps", "1"]) == 0
    data = json.loads(report.read_text())
    assert data["qa"]["counts"]["unrelated"] == 20
    assert sum(data["qa"]["counts"].values()) == 44
    assert set(data["mean_gate"]) == {"defect", "unrelated"}
    transcript = json.loads((tmp_path / "report_qa.json").read_text())
    assert len(transcript) == 44
    assert os.listdir(tmp_path / "heatmaps")


def test_detect_writes_outputs(tmp_path, tiny_workspace, capsys):
    manifest = json.load(open(os.path.join(tiny_workspace["data"], "manifest.json")))
    entry = manifest["splits"]["test"][-1]
    prefix = str(tmp_path / "out" / "det")
    assert main(["detect", "--ckpt", tiny_workspace["ckpt"],
                 "--image", os.path.join(tiny_workspace["data"], entry["image"]), "--out-prefix", prefix]) == 0
    for suffix in ("_mask.png", "_heat.png", "_map.bin", "_map.json", "_heat.html"):
        assert os.path.exists(prefix + suffix)
    amap = read_map(prefix)
    assert amap.shape == (32, 32)
    assert ((amap >= 0) & (amap <= 1)).all()
    assert "P_n=" in capsys.readouterr().out


def test_detect_rejects_wrong_size(tmp_path, tiny_workspace):
    from PIL import Image
    path = tmp_path / "big.png"
    Image.fromarray(np.zeros((64, 64), dtype=np.uint8)).save(path)
    assert main(["detect", "--ckpt", tiny_workspace["ckpt"], "--image", str(path),
                 "--out-prefix", str(tmp_path / "x")]) == 1


def test_chat_single_question(tiny_workspace, capsys):
    assert main(["chat", "--ckpt", tiny_workspace["ckpt"], "--question", "what is a wafer?"]) == 0
    captured = capsys.readouterr()
    assert "[a=" in captured.err


def test_chat_session(tiny_workspace, monkeypatch, capsys):
    from fabgpt.services.chat_service import ChatSession
    from fabgpt.services.train_service import load_pipeline
    pipeline, _ = load_pipeline(tiny_workspace["ckpt"])
    out, err = io.StringIO(), io.StringIO()
    session = ChatSession(pipeline, out=out, err=err)
    script = io.StringIO("/image /no/such/file.png\nis there a defect in the image?\n/image\n/quit\nnever read\n")
    assert session.repl(script) == 0
    assert "error:" in err.getvalue()
    assert "image cleared" in out.getvalue()
    assert err.getvalue().count("[a=") == 1


def test_corpora_export(tmp_path):
    assert main(["corpora", "--out", str(tmp_path)]) == 0
    a = json.loads((tmp_path / "corpus_a.json").read_text())
    b = json.loads((tmp_path / "corpus_b.json").read_text())
    assert len(a) == 60 and len(b) == 100
