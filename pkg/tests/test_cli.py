import os
import re

import pytest

from kermod.cli import main

FAST_TRAIN = ["--data", "stripes", "--classes", "3", "--samples-per-class", "20",
              "--image-size", "12", "--blocks", "1", "--width", "4",
              "--epochs", "2", "--batch-size", "16", "--schedule", "constant",
              "--lr", "0.05"]


def run_train(out, extra=()):
    return main(["train", *FAST_TRAIN, "--mask", "implicit,explicit,classifier",
                 "--seed", "1", "--out", str(out), *extra])


def test_train_writes_all_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_train(out) == 0
    for fname in ("manifest.txt", "metrics.log", "report.txt",
                  "checkpoint.kmc", "task.kmd", "curves.png", "weights.png"):
        assert (out / fname).exists(), fname
    stdout = capsys.readouterr().out
    records = [l for l in stdout.splitlines() if l.startswith("epoch=")]
    assert len(records) == 4
    pat = re.compile(r"^epoch=\d+ split=(train|test) loss=[\d.]+ acc=[\d.]+$")
    assert all(pat.match(l) for l in records)
    assert records == (out / "metrics.log").read_text().splitlines()


def test_train_deterministic_reports(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_train(a, ["--no-figures"]) == 0
    assert run_train(b, ["--no-figures"]) == 0
    assert (a / "report.txt").read_text() == (b / "report.txt").read_text()
    assert (a / "task.kmd").read_bytes() == (b / "task.kmd").read_bytes()


def test_empty_mask_exits_2(tmp_path, capsys):
    assert main(["train", *FAST_TRAIN, "--mask", "none",
                 "--out", str(tmp_path / "x")]) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_group_exits_2(tmp_path):
    assert main(["train", *FAST_TRAIN, "--mask", "frobnicate",
                 "--out", str(tmp_path / "x")]) == 2


def test_cifar_without_dir_exits_2(tmp_path):
    assert main(["train", "--data", "cifar10", "--mask", "classifier",
                 "--out", str(tmp_path / "x")]) == 2


def test_manifest_contains_digest_and_config(tmp_path):
    out = tmp_path / "run"
    run_train(out)
    manifest = (out / "manifest.txt").read_text()
    assert "config_digest=" in manifest
    assert "seeds=1" in manifest
    assert "epochs=2" in manifest


def test_config_file_flags_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("epochs=1\nlr=0.01\nmask=implicit,classifier\n"
                   "data=stripes\nclasses=3\nsamples_per_class=10\n"
                   "image_size=12\nblocks=1\nwidth=4\nschedule=constant\n")
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg), "--epochs", "2",
                 "--out", str(out), "--no-figures"])
    assert code == 0
    manifest = (out / "manifest.txt").read_text()
    assert "epochs=2" in manifest          # flag beats file
    assert "lr=0.01" in manifest           # file beats default
    records = (out / "metrics.log").read_text().splitlines()
    assert len(records) == 4               # 2 epochs ran


def test_bad_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("optimizer=adam\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "optimizer" in capsys.readouterr().err


def test_ablate_writes_table_and_chart(tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", *FAST_TRAIN, "--epochs", "1",
                 "--mask", "implicit,explicit,classifier",
                 "--axis", "depth", "--values", "1,2", "--seeds", "2",
                 "--out", str(out)])
    assert code == 0
    lines = (out / "ablation.tsv").read_text().splitlines()
    assert lines[0] == "value\tmean\tstd\tseed0\tseed1"
    assert len(lines) == 3
    assert (out / "ablation.png").exists()
    assert (out / "manifest.txt").exists()


def test_ablate_unknown_value_exits_2(tmp_path):
    assert main(["ablate", *FAST_TRAIN, "--mask", "implicit,explicit,classifier",
                 "--axis", "activation", "--values", "gelu", "--seeds", "1",
                 "--out", str(tmp_path / "abl")]) == 2


def test_delta_workflow_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_train(out, ["--no-figures"]) == 0
    ckpt = str(out / "checkpoint.kmc")
    delta = str(tmp_path / "exported.kmd")
    assert main(["delta", "export", "--checkpoint", ckpt, "--out", delta]) == 0
    assert main(["delta", "verify", "--base", ckpt, "--delta", delta]) == 0
    merged = str(tmp_path / "merged.kmc")
    assert main(["delta", "apply", "--base", ckpt, "--delta", delta,
                 "--out", merged]) == 0
    assert os.path.getsize(merged) > 0


def test_delta_verify_wrong_base_exits_3(tmp_path, capsys):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_train(out1, ["--no-figures"]) == 0
    assert main(["train", *FAST_TRAIN, "--mask", "implicit,explicit,classifier",
                 "--seed", "9", "--out", str(out2), "--no-figures"]) == 0
    code = main(["delta", "verify", "--base", str(out2 / "checkpoint.kmc"),
                 "--delta", str(out1 / "task.kmd")])
    assert code == 3
    assert "integrity" in capsys.readouterr().err


def test_delta_report_paper_numbers(tmp_path, capsys):
    code = main(["delta", "report", "--base-mb", "94", "--fraction", "0.014",
                 "--tasks", "100"])
    assert code == 0
    out = capsys.readouterr().out
    assert "km_total_mb=225.6" in out
    assert "naive_total_mb=9400.0" in out
    assert "reduction_factor=41.7" in out
    assert "per_task_reduction_factor=71.4" in out


def test_delta_report_requires_size(tmp_path):
    assert main(["delta", "report", "--base-mb", "94", "--tasks", "10"]) == 2


def test_eval_command(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_train(out, ["--no-figures"]) == 0
    capsys.readouterr()  # drop the training run's stream
    code = main(["eval", "--checkpoint", str(out / "checkpoint.kmc"),
                 *FAST_TRAIN[:8]])
    assert code == 0
    assert re.match(r"split=test loss=[\d.]+ acc=[\d.]+", capsys.readouterr().out)


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "klingon"])
    assert exc.value.code == 2


def test_train_with_recovered_ratio_in_report(tmp_path):
    out = tmp_path / "run"
    assert run_train(out, ["--no-figures", "--full-accuracy", "0.9"]) == 0
    report = (out / "report.txt").read_text()
    assert "recovered_accuracy_ratio=" in report
