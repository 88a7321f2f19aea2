import os

import pandas as pd
import pytest

from llmdiff import cli
from llmdiff.cli import main, parse_arguments, resolve_config


def test_every_command_has_a_handler():
    for argv in (
        ["gen-data", "--out", "d"],
        ["train-lm", "--data", "d", "--out", "o"],
        ["train-adapter", "--data", "d", "--out", "o", "--lm-ckpt", "a", "--base-ckpt", "b"],
        ["sample", "--ckpt", "c", "--prompt", "one red circle", "--out", "x.ppm"],
        ["eval", "--ckpt", "c", "--testset", "t", "--metric-ckpt", "m", "--clf-ckpt", "k", "--out", "r.json"],
        ["report-scales", "--ckpt", "c", "--out", "s.csv"],
        ["verify"],
        ["inspect", "--ckpt", "c"],
    ):
        assert callable(parse_arguments(argv).handler)


def test_unknown_mode_is_a_usage_error():
    with pytest.raises(SystemExit):
        parse_arguments(["sample", "--ckpt", "c", "--prompt", "p", "--out", "x", "--mode", "pixels"])


def test_gen_data_is_byte_identical_across_runs(tmp_path, trained_run):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", trained_run.config_path, "--out", str(tmp_path / name), "--n", "3"]) == 0
    for name in ("data.jsonl", "img_0.ppm", "img_2.ppm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_splits_differ(tmp_path, trained_run):
    for split in ("train", "test"):
        main(["gen-data", "--config", trained_run.config_path, "--out", str(tmp_path / split), "--n", "3", "--split", split])
    assert (tmp_path / "train" / "data.jsonl").read_bytes() != (tmp_path / "test" / "data.jsonl").read_bytes()


def test_gen_data_needs_force_to_overwrite(tmp_path, capsys, trained_run):
    out = str(tmp_path / "data")
    assert main(["gen-data", "--config", trained_run.config_path, "--out", out, "--n", "3"]) == 0
    assert main(["gen-data", "--config", trained_run.config_path, "--out", out, "--n", "2"]) == 1
    assert "already holds" in capsys.readouterr().err
    assert (tmp_path / "data" / "img_2.ppm").exists()
    assert main(["gen-data", "--config", trained_run.config_path, "--out", out, "--n", "2", "--force"]) == 0
    assert not (tmp_path / "data" / "img_2.ppm").exists()
    assert len((tmp_path / "data" / "data.jsonl").read_text().splitlines()) == 2


def test_existing_run_needs_force(capsys, trained_run):
    code = main(["train-lm", "--config", trained_run.config_path, "--data", trained_run.data, "--out", os.path.dirname(trained_run.lm)])
    assert code == 1
    assert "already holds" in capsys.readouterr().err


def test_missing_prerequisite_exits_nonzero(tmp_path, capsys, trained_run):
    code = main(
        [
            "train-adapter",
            "--config",
            trained_run.config_path,
            "--data",
            trained_run.data,
            "--out",
            str(tmp_path / "adapter"),
            "--lm-ckpt",
            str(tmp_path / "missing.llmd"),
            "--base-ckpt",
            trained_run.base,
        ]
    )
    assert code == 1
    assert "Missing prerequisite lm checkpoint" in capsys.readouterr().err


def test_config_is_found_next_to_the_checkpoint(trained_run):
    assert resolve_config(None, trained_run.adapter) == trained_run.config


def test_sample_command(tmp_path, trained_run):
    out = str(tmp_path / "a.ppm")
    assert main(["sample", "--ckpt", trained_run.adapter, "--prompt", "one red circle", "--seed", "3", "--out", out]) == 0
    again = str(tmp_path / "b.ppm")
    assert main(["sample", "--ckpt", trained_run.adapter, "--prompt", "one red circle", "--seed", "3", "--out", again]) == 0
    assert open(out, "rb").read() == open(again, "rb").read()
    baseline = str(tmp_path / "c.ppm")
    assert main(["sample", "--ckpt", trained_run.adapter, "--prompt", "one red circle", "--out", baseline, "--mode", "baseline"]) == 0


def test_eval_rerun_is_byte_identical(tmp_path, trained_run):
    outputs = []
    for name in ("first", "second"):
        report = tmp_path / f"{name}.json"
        images = tmp_path / f"{name}_images"
        argv = [
            "eval",
            "--ckpt",
            trained_run.adapter,
            "--testset",
            trained_run.test,
            "--metric-ckpt",
            trained_run.metric,
            "--clf-ckpt",
            trained_run.clf,
            "--out",
            str(report),
            "--images-dir",
            str(images),
        ]
        assert main(argv) == 0
        outputs.append((report.read_bytes(), {p.name: p.read_bytes() for p in sorted(images.iterdir())}))
    assert outputs[0] == outputs[1]
    assert len(outputs[0][1]) == 4


def test_report_scales_command(tmp_path, capsys, trained_run):
    out = str(tmp_path / "scales.csv")
    assert main(["report-scales", "--ckpt", trained_run.adapter, "--out", out]) == 0
    report = pd.read_csv(out)
    assert list(report.columns) == ["site", "frozen_scale", "new_scale"]
    assert list(report["site"]) == ["down1", "down2", "mid", "up2", "up1"]
    assert "mid" in capsys.readouterr().out


def test_report_scales_rejects_a_checkpoint_without_adapter(tmp_path, trained_run):
    assert main(["report-scales", "--ckpt", trained_run.base, "--config", trained_run.config_path, "--out", str(tmp_path / "s.csv")]) == 1


def test_inspect_command(capsys, trained_run):
    assert main(["inspect", "--ckpt", trained_run.lm]) == 0
    out = capsys.readouterr().out
    assert "lm.tok_emb.weight" in out
    assert "train.step" in out


def test_verify_exit_code_follows_the_checks(monkeypatch):
    def fake_suite(passed):
        return lambda suite: pd.DataFrame(
            [{"suite": suite, "check": "example", "passed": passed, "seconds": 0.0, "detail": ""}]
        )

    monkeypatch.setattr(cli, "run_suite", fake_suite(True))
    assert main(["verify", "--suite", "grad"]) == 0
    monkeypatch.setattr(cli, "run_suite", fake_suite(False))
    assert main(["verify"]) == 1


@pytest.mark.slow
def test_verify_invariants_suite_passes():
    assert main(["verify", "--suite", "invariants"]) == 0


@pytest.mark.slow
def test_verify_grad_suite_passes():
    assert main(["verify", "--suite", "grad"]) == 0
