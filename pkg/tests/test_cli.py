import json

import numpy as np
import pytest

from hdrsplat.cli import main
from hdrsplat.io import read_pfm, read_png

TINY = ["--set", "synth.n_gaussians=10", "--set", "synth.width=16", "--set", "synth.height=16",
        "--set", "synth.n_frames=8", "--set", "synth.n_gt=4"]
FAST = ["--iterations", "6", "--set", "training.log_every=3"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), *TINY]) == 0
    assert main(["train", str(root / "data"), "--out", str(root / "run"), *FAST]) == 0
    return root


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "CHS1" in capsys.readouterr().out


def test_unknown_key_exits_with_config_code(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "synth.n_gausians=3"]) == 2
    assert "n_gausians" in capsys.readouterr().err


def test_unknown_section_in_file(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[synthh]\nseed = 1\n", encoding="utf-8")
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 2


def test_bad_value_type(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--set", "synth.width=wide"]) == 2


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_unknown_ablation(trained, tmp_path):
    assert main(["train", str(trained / "data"), "--out", str(tmp_path), "--ablate", "colour"]) == 2


def test_synth_writes_resolved_config(trained):
    text = (trained / "data" / "config.ini").read_text()
    assert "[synth]" in text and "n_gaussians = 10" in text


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "checkpoint.chs").read_bytes()[:4] == b"CHS1"
    records = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in records] == [3, 6]
    assert "[training]" in (run / "config.ini").read_text()


def test_commands_are_idempotent(trained, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), *TINY]) == 0
    for name in ("exposures.csv", "points3d.txt", "frames/frame_0003.png", "meta.json"):
        assert (tmp_path / "data" / name).read_bytes() == (trained / "data" / name).read_bytes()
    assert main(["train", str(trained / "data"), "--out", str(tmp_path / "run"), *FAST]) == 0
    for name in ("checkpoint.chs", "metrics.jsonl", "config.ini"):
        assert (tmp_path / "run" / name).read_bytes() == (trained / "run" / name).read_bytes()


def test_resume_continues(trained, tmp_path):
    ckpt = str(trained / "run" / "checkpoint.chs")
    assert main(["train", str(trained / "data"), "--out", str(tmp_path), "--resume", ckpt,
                 "--iterations", "9", "--set", "training.log_every=3"]) == 0
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert records[-1]["iteration"] == 9


def test_render_modes(trained, tmp_path):
    ckpt = str(trained / "run" / "checkpoint.chs")
    assert main(["render", ckpt, "--out", str(tmp_path / "a.png"), "--frame", "2"]) == 0
    assert read_png(tmp_path / "a.png").shape == (16, 16, 3)
    assert main(["render", ckpt, "--out", str(tmp_path / "h.pfm"), "--time", "0.3", "--hdr"]) == 0
    assert read_pfm(tmp_path / "h.pfm").min() >= 0
    assert main(["render", ckpt, "--out", str(tmp_path / "s.png"), "--dt-sweep", "0.001:0.1:4", "--bits", "16"]) == 0
    sweep = [read_png(tmp_path / f"s_{i:03d}.png").mean() for i in range(4)]
    assert np.all(np.diff(sweep) >= 0)
    assert main(["render", ckpt, "--out", str(tmp_path / "p.png"), "--pose", "1 0 0 0 0 0 0"]) == 0
    assert main(["render", ckpt, "--out", str(tmp_path / "x.png"), "--dt-sweep", "1:2"]) == 2
    assert main(["render", ckpt, "--out", str(tmp_path / "y.png"), "--time", "99"]) == 4


def test_eval_report(trained, tmp_path):
    out = tmp_path / "report.json"
    assert main(["eval", str(trained / "run" / "checkpoint.chs"), str(trained / "data"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    for key in ("heldout", "ate", "ate_init", "exposure", "crf", "config"):
        assert key in report
    assert report["ate"]["alignment"] == "sim3"
