import subprocess
import sys

import numpy as np
import pytest

from lookwhere.cli import main

TINY_RUN = ["--set", "data.image_side=32", "--set", "data.train_count=48", "--set", "data.test_count=24",
            "--set", "model.embed_dim=16", "--set", "model.num_layers=2", "--set", "model.num_heads=2",
            "--set", "model.num_registers=2", "--set", "selector.low_res=16", "--set", "selector.low_depth=1",
            "--set", "selector.map_hidden=8", "--set", "train.teacher_epochs=1", "--set", "train.epochs=2",
            "--set", "train.k_min=2", "--set", "train.k_max=8", "--set", "train.finetune_epochs=1",
            "--set", "train.finetune_k_max=16", "--set", "eval.k=1,4,16"]


def run(capsys, *args):
    code = main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["train-teacher", "--seed", "3", "--out", str(d / "t.lwck"), *TINY_RUN]) == 0
    assert main(["pretrain", "--seed", "3", "--teacher", str(d / "t.lwck"), "--out", str(d / "p.lwck"),
                 "--report-dir", str(d / "rep"), *TINY_RUN]) == 0
    assert main(["finetune", "--seed", "3", "--model", str(d / "p.lwck"), "--out", str(d / "f.lwck"), *TINY_RUN]) == 0
    return d


def test_malformed_config_exits_nonzero_with_one_line(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nepochz = 1\n")
    code, out, err = run(capsys, "train-teacher", "--config", str(bad), "--out", str(tmp_path / "t.lwck"))
    assert code != 0
    assert err.strip().count("\n") == 0 and "epochz" in err
    assert not (tmp_path / "t.lwck").exists()


def test_bad_flag_is_one_line(capsys):
    code, _, err = run(capsys, "pretrain", "--bogus")
    assert code != 0 and err.strip().count("\n") == 0


def test_missing_teacher(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--teacher", str(tmp_path / "nope.lwck"), "--out", str(tmp_path / "p"))
    assert code != 0 and "does not exist" in err


def test_unwritable_output(tmp_path, capsys):
    code, _, err = run(capsys, "train-teacher", "--out", str(tmp_path / "missing" / "t.lwck"), *TINY_RUN)
    assert code != 0 and "not writable" in err


def test_same_seed_same_bytes(artifacts, tmp_path):
    for name, cmd in [("t.lwck", ["train-teacher"]),
                      ("p.lwck", ["pretrain", "--teacher", str(artifacts / "t.lwck")]),
                      ("f.lwck", ["finetune", "--model", str(artifacts / "p.lwck")])]:
        assert main([*cmd, "--seed", "3", "--out", str(tmp_path / name), *TINY_RUN]) == 0
        assert (tmp_path / name).read_bytes() == (artifacts / name).read_bytes()


def test_pretrain_logs_losses_and_report(artifacts):
    assert (artifacts / "rep" / "pretrain_history.csv").read_text().startswith("epoch,total,cls,pat,map")
    assert (artifacts / "rep" / "pretrain_losses.png").stat().st_size > 0


def test_eval_prints_csv_and_writes_report(artifacts, capsys, tmp_path):
    code, out, err = run(capsys, "eval", "--seed", "3", "--model", str(artifacts / "f.lwck"),
                         "--report-dir", str(tmp_path / "r"), *TINY_RUN)
    assert code == 0, err
    lines = out.strip().splitlines()
    assert lines[0].startswith("k,selection,accuracy")
    assert len(lines) == 1 + 3 * 2 + 1
    assert "config run.seed=3" in err
    for f in ("metrics.csv", "metrics.txt", "accuracy_vs_k.png", "flops_vs_k.png", "selector_map.png"):
        assert (tmp_path / "r" / f).stat().st_size > 0
    assert (tmp_path / "r" / "metrics.csv").read_text() == out


def test_eval_single_class_is_perfect(artifacts, capsys):
    code, out, _ = run(capsys, "eval", "--seed", "3", "--model", str(artifacts / "p.lwck"),
                       *TINY_RUN, "--set", "data.num_classes=1", "--k", "4")
    assert code == 0
    row = out.splitlines()[1].split(",")
    header = out.splitlines()[0].split(",")
    assert float(row[header.index("knn_accuracy")]) == 1.0
    assert float(row[header.index("linear_probe_accuracy")]) == 1.0


def test_eval_rejects_architecture_mismatch(artifacts, capsys):
    code, _, err = run(capsys, "eval", "--model", str(artifacts / "f.lwck"), *TINY_RUN, "--set", "model.embed_dim=8")
    assert code != 0 and "model.embed_dim" in err


def test_selectmap_full_k_lists_every_cell(artifacts, capsys, tmp_path):
    img = np.random.default_rng(0).standard_normal((32, 32, 1)).astype("<f4")
    (tmp_path / "img.f32").write_bytes(img.tobytes())
    code, out, err = run(capsys, "selectmap", "--model", str(artifacts / "p.lwck"), "--image", str(tmp_path / "img.f32"),
                         "--out", str(tmp_path / "m.pgm"), "--k", "16", "--teacher", str(artifacts / "t.lwck"),
                         "--report-dir", str(tmp_path / "r"), *TINY_RUN)
    assert code == 0, err
    coords = (tmp_path / "m.topk.txt").read_text().splitlines()[1:]
    assert sorted((int(r), int(c)) for r, c, _ in (l.split(",") for l in coords)) == [(r, c) for r in range(4)
                                                                                      for c in range(4)]
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
    assert (tmp_path / "r" / "selectmap.png").exists()


def test_selectmap_k_out_of_range(artifacts, capsys, tmp_path):
    np.save(tmp_path / "img.npy", np.zeros((32, 32, 1), np.float32))
    code, _, err = run(capsys, "selectmap", "--model", str(artifacts / "p.lwck"), "--image", str(tmp_path / "img.npy"),
                       "--out", str(tmp_path / "m.pgm"), "--k", "17", *TINY_RUN)
    assert code != 0 and "--k" in err


def test_threads_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("LOOKWHERE_THREADS", "zero")
    code, _, err = run(capsys, "train-teacher", "--out", "x")
    assert code != 0 and "LOOKWHERE_THREADS" in err


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "lookwhere.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "selectmap" in res.stdout
