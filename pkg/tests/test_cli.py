import json

import numpy as np
import pytest
from PIL import Image

from lvsnet.cli import main
from lvsnet.data import Dataset


def run(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse usage errors
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_prints_usage(capsys):
    code, _, err = run([], capsys)
    assert code == 2
    assert "usage: lvsnet" in err


@pytest.mark.parametrize("argv", [["bogus"], ["audit", "--nope"], ["evaluate", "--threshold", "mean"]])
def test_bad_arguments_exit_2(capsys, argv):
    code, _, err = run(argv, capsys)
    assert code == 2 and "usage" in err


def test_audit_reports_reference_values(capsys):
    code, out, _ = run(["audit", "--config", "default"], capsys)
    assert code == 0
    assert "parameter_count=737069" in out
    for ref in ("0.71", "29.60", "2.74"):
        assert ref in out


def test_audit_layer_table(capsys):
    code, out, _ = run(["audit", "--layers"], capsys)
    assert code == 0 and "bottleneck.fmam.gate" in out


def test_audit_bad_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"input_hieght": 64}))
    code, _, err = run(["audit", "--config", str(tmp_path / "c.json")], capsys)
    assert code == 1
    assert err.count("\n") == 1 and "input_hieght" in err


def _mask(path, arr):
    Image.fromarray((arr * 255).astype(np.uint8)).save(path)
    return str(path)


def test_overlay_mismatched_sizes(tmp_path, capsys):
    p = _mask(tmp_path / "p.png", np.zeros((8, 8)))
    t = _mask(tmp_path / "t.png", np.zeros((8, 9)))
    code, _, err = run(["overlay", "--pred", p, "--truth", t, "--out", str(tmp_path / "o.png")], capsys)
    assert code != 0
    assert "shape" in err and err.count("\n") == 1


def test_overlay_writes_image(tmp_path, capsys):
    rng = np.random.default_rng(0)
    p = _mask(tmp_path / "p.png", rng.random((8, 8)) < 0.5)
    t = _mask(tmp_path / "t.png", rng.random((8, 8)) < 0.5)
    code, _, _ = run(["overlay", "--pred", p, "--truth", t, "--black", "--out", str(tmp_path / "o.png")], capsys)
    assert code == 0
    from lvsnet.reports import render_overlay

    expected = render_overlay(np.asarray(Image.open(p)) > 127, np.asarray(Image.open(t)) > 127)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "o.png")), expected)


def test_roc_command(tmp_path, capsys):
    rng = np.random.default_rng(1)
    np.save(tmp_path / "s.npy", rng.random((16, 16)))
    t = _mask(tmp_path / "t.png", rng.random((16, 16)) < 0.3)
    code, out, _ = run(
        ["roc", "--curve", "a", str(tmp_path / "s.npy"), t, "--curve", "a", str(tmp_path / "s.npy"), t, "--out-dir", str(tmp_path)],
        capsys,
    )
    assert code == 0 and "a#2" in out
    assert (tmp_path / "roc" / "roc.csv").exists() and (tmp_path / "roc" / "roc.png").exists()


def test_missing_dataset_root(tmp_path, capsys):
    code, _, err = run(["prepare", "--dataset", "DRIVE", "--root", str(tmp_path / "none"), "--out-dir", str(tmp_path)], capsys)
    assert code == 1 and "not a directory" in err


def test_prepare_streams_pool(synthetic_roots, tmp_path, capsys):
    root = str(synthetic_roots[Dataset.DRIVE])
    code, out, _ = run(["prepare", "--dataset", "DRIVE", "--root", root, "--out-dir", str(tmp_path)], capsys)
    assert code == 0 and "720 augmented pairs" in out
    rows = (tmp_path / "pool.csv").read_text().splitlines()[1:]
    assert len(rows) == 720
    train_bases = {r.split(",")[1] for r in rows if r.split(",")[3] == "train"}
    val_bases = {r.split(",")[1] for r in rows if r.split(",")[3] == "val"}
    assert len(train_bases) == 16 and len(val_bases) == 4
    assert (tmp_path / "manifest.csv").exists()


@pytest.fixture(scope="module")
def trained(synthetic_roots, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"input_height": 32, "input_width": 32, "epochs": 2, "batch_size": 4}))
    root = str(synthetic_roots[Dataset.DRIVE])
    code = main(["train", "--dataset", "DRIVE", "--root", root, "--config", str(cfg), "--limit", "6", "--out-dir", str(out)])
    assert code == 0
    return out, root, cfg


def test_train_output_tree(trained):
    out, _, _ = trained
    assert (out / "checkpoints" / "best.npz").exists()
    assert (out / "training.png").exists()
    assert len((out / "run.jsonl").read_text().splitlines()) == 2


def test_evaluate_outputs_and_idempotence(trained, capsys):
    out, root, _ = trained
    argv = ["evaluate", "--dataset", "DRIVE", "--root", root, "--checkpoint", str(out / "checkpoints" / "best.npz"),
            "--limit", "4", "--out-dir", str(out / "eval"), "--threshold", "fixed:0.7"]
    code, stdout, _ = run(argv, capsys)
    assert code == 0 and "threshold 0.7000" in stdout
    for sub in ("metrics", "overlays", "roc"):
        assert any((out / "eval" / sub).iterdir())
    first = {p.name: p.read_bytes() for p in (out / "eval").rglob("*.csv")}
    assert run(argv, capsys)[0] == 0
    second = {p.name: p.read_bytes() for p in (out / "eval").rglob("*.csv")}
    assert first == second
    rows = (out / "eval" / "metrics" / "per_image.csv").read_text().splitlines()
    assert rows[0].startswith("id,Acc,Dice,J,Sn,Sp,AUC") and len(rows) == 5


def test_resume_from_cli(trained, capsys):
    out, root, cfg = trained
    argv = ["train", "--dataset", "DRIVE", "--root", root, "--config", str(cfg), "--limit", "6", "--epochs", "3",
            "--out-dir", str(out / "resumed"), "--resume", str(out / "checkpoints" / "last.npz")]
    code, stdout, _ = run(argv, capsys)
    assert code == 0 and "best epoch 3" in stdout


def test_ablate_from_cli(trained, capsys):
    out, root, cfg = trained
    argv = ["ablate", "--dataset", "DRIVE", "--root", root, "--config", str(cfg), "--limit", "6", "--epochs", "1",
            "--rows", "LU,Full", "--out-dir", str(out / "abl")]
    code, stdout, _ = run(argv, capsys)
    assert code == 0
    assert stdout.splitlines()[0].split() == ["Method", "Dice", "J", "Acc", "Sn", "Sp"]
    assert (out / "abl" / "metrics" / "ablation.csv").exists() and (out / "abl" / "ablation.png").exists()
