import csv
import json

import pytest

from mmlego.cli import main

TINY = """
train: {epochs: 2, batch: 32}
lego: {latent_dims: [4, 6], depth: 2, attn_dim: 5, head_dim: 5}
encoders: {snn_hidden: [8], abmil_hidden: [8], abmil_gate: 4}
data:
  n_samples: 120
  factor_dim: 3
  modalities:
    - {name: tab, kind: tabular, dim: 4, snr: 2.0}
    - {name: bag, kind: bag, dim: 3, snr: 2.0, n_instances: [2, 4]}
"""


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    last = out.strip().splitlines()[-1] if out.strip() else None
    return rc, json.loads(last) if last else None, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    cfg = root / "tiny.yaml"
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    for m in ("tab", "bag"):
        assert main(["train-block", "--config", str(cfg), "--data", str(root / "data"),
                     "--modality", m, "--out", str(root / f"{m}.ckpt")]) == 0
    return root


def test_train_block_writes_epoch_csv(workspace):
    rows = list(csv.DictReader(open(workspace / "tab.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert {"train_loss", "val_loss", "val_metric", "lr"} <= set(rows[0])


def test_self_merge_matches_block(workspace, capsys):
    w = workspace
    _, block, _ = run(capsys, "eval", "--model", w / "tab.ckpt", "--data", w / "data")
    rc, rec, _ = run(capsys, "merge", "--config", w / "tiny.yaml", "--blocks", w / "tab.ckpt",
                     "--out", w / "self.ckpt")
    assert rc == 0 and rec["gradient_steps"] == 0
    _, merged, _ = run(capsys, "eval", "--model", w / "self.ckpt", "--data", w / "data")
    assert abs(merged["metric"] - block["metric"]) < 1e-9


def test_merge_then_masked_eval(workspace, capsys):
    w = workspace
    rc, rec, _ = run(capsys, "merge", "--config", w / "tiny.yaml", "--blocks", w / "tab.ckpt",
                     w / "bag.ckpt", "--out", w / "m.ckpt", "--data", w / "data")
    assert rc == 0 and rec["gradient_steps"] == 0 and 0 <= rec["test"] <= 1
    rc, rec, _ = run(capsys, "eval", "--model", w / "m.ckpt", "--data", w / "data",
                     "--mask-modality", "bag", "--out", w / "e.csv")
    assert rc == 0 and rec["masked"] == "bag"


def test_fuse_reports_steps(workspace, capsys):
    w = workspace
    rc, rec, _ = run(capsys, "fuse", "--config", w / "tiny.yaml", "--blocks", w / "tab.ckpt",
                     w / "bag.ckpt", "--data", w / "data", "--epochs", 1, "--method", "weave",
                     "--out", w / "f.ckpt")
    assert rc == 0 and rec["method"] == "weave" and rec["gradient_steps"] > 0


def test_demo_parseval_passes(tmp_path, capsys):
    rc, rec, _ = run(capsys, "demo", "parseval", "--out", tmp_path)
    assert rc == 0 and rec["passed"]
    assert (tmp_path / "parseval.csv").exists()


def test_demo_interference(tmp_path, capsys):
    rc, rec, _ = run(capsys, "demo", "interference", "--seeds", 3, "--out", tmp_path)
    assert rc == 0 and set(rec["mean_retained"])


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], 1),
    (["eval", "--model", "/nonexistent.ckpt", "--data", "/nonexistent"], 2),
])
def test_failures_emit_one_json_line(argv, code, capsys):
    rc, _, err = run(capsys, *argv)
    assert rc == code
    lines = err.strip().splitlines()
    rec = json.loads(lines[-1])
    assert rec["code"] == code and rec["error"] and rec["message"]


def test_corrupt_checkpoint_is_a_data_error(workspace, tmp_path, capsys):
    buf = bytearray((workspace / "tab.ckpt").read_bytes())
    buf[-3] ^= 0x10
    (tmp_path / "bad.ckpt").write_bytes(bytes(buf))
    rc, _, err = run(capsys, "eval", "--model", tmp_path / "bad.ckpt", "--data",
                     workspace / "data")
    assert rc == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "ChecksumMismatch"


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("train: {speed: 3}\n")
    rc, _, _ = run(capsys, "generate", "--config", tmp_path / "c.yaml", "--out", tmp_path / "d")
    assert rc == 1
