import csv
import json

import pytest

from mcvd.checkpoint import load_checkpoint
from mcvd.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_REFUSED, EXIT_USAGE, dispatch
from mcvd.data_io import read_video, write_video

TINY = ["--set", "data.frame_size=8", "--set", "data.length=8", "--set", "data.shape_size=3",
        "--set", "model.base_width=4", "--set", "model.channel_multipliers=[1, 2]",
        "--set", "model.attention_resolutions=[4]", "--set", "model.embedding_dim=8", "--set", "model.groups=2",
        "--set", "model.cond_width=4", "--set", "schedule.T=50", "--set", "train.batch_size=2",
        "--set", "train.stride=3", "--set", "train.log_interval=0"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert dispatch(["gen-data", *TINY, "--count", "2", "--out", str(root / "data")]) == EXIT_OK
    return root


def train(ws, name, *extra):
    ckpt = ws / name
    code = dispatch(["train", *TINY, *extra, "--data", str(ws / "data"), "--out", str(ckpt), "--steps", "3"])
    return code, ckpt


def test_gen_data_writes_videos_and_config(workspace):
    files = sorted((workspace / "data").glob("*.mcvd"))
    assert [f.name for f in files] == ["video_0000.mcvd", "video_0001.mcvd"]
    assert read_video(files[0]).shape == (8, 8, 8, 1)
    assert "data.frame_size = 8" in (workspace / "data" / "run_config.toml").read_text()


def test_train_sample_evaluate_export(workspace, capsys):
    code, ckpt = train(workspace, "pf.ckpt", "--set", "layout.f=1")
    assert code == EXIT_OK
    state = load_checkpoint(ckpt)
    assert state.step == 3 and state.metadata["run_config"]["layout.f"] == 1

    video = workspace / "data" / "video_0000.mcvd"
    pred = workspace / "pred"
    for task in ("predict", "retrodict", "generate", "interpolate"):
        out = pred / task / "video_0000.mcvd"
        assert dispatch(["sample", "--checkpoint", str(ckpt), "--task", task, "--steps", "5", "--video", str(video),
                         "--out", str(out)]) == EXIT_OK
        frames = read_video(out)
        assert frames.shape == (4, 8, 8, 1) and frames.min() >= 0 and frames.max() <= 1
        sidecar = json.loads(out.with_name(out.name + ".json").read_text())
        assert sidecar["checkpoint_step"] == 3 and sidecar["sampler"]["num_steps"] == 5

    traj = pred / "multi" / "video_0000.mcvd"
    assert dispatch(["sample", "--checkpoint", str(ckpt), "--task", "predict", "--steps", "3", "--video", str(video),
                     "--trajectories", "2", "--out", str(traj)]) == EXIT_OK
    assert {p.name for p in traj.parent.glob("*.mcvd")} == {"video_0000_0.mcvd", "video_0000_1.mcvd"}

    ref = workspace / "ref"
    ref.mkdir()
    write_video(ref / "video_0000.mcvd", read_video(video)[2:6])
    report = workspace / "report.csv"
    capsys.readouterr()
    assert dispatch(["evaluate", "--pred", str(traj.parent), "--ref", str(ref), "--report", str(report)]) == EXIT_OK
    rows = list(csv.DictReader(report.open()))
    assert list(rows[0]) == ["video_id", "mse", "psnr", "ssim", "agg"]
    assert [r["agg"] for r in rows] == ["mean", "best_of_n"]
    assert float(rows[1]["psnr"]) >= float(rows[0]["psnr"])
    assert "n/a" in capsys.readouterr().out

    strip = workspace / "s.png"
    assert dispatch(["export", "--video", str(video), "--strip", str(strip), "--scale", "2"]) == EXIT_OK
    assert strip.read_bytes()[:4] == b"\x89PNG"


def test_resume_continues_to_target(workspace):
    code, ckpt = train(workspace, "r.ckpt")
    assert code == EXIT_OK
    assert dispatch(["train", *TINY, "--data", str(workspace / "data"), "--out", str(workspace / "r2.ckpt"),
                     "--steps", "5", "--resume", str(ckpt)]) == EXIT_OK
    assert load_checkpoint(workspace / "r2.ckpt").step == 5


def test_autoregressive_sampling(workspace):
    code, ckpt = train(workspace, "ar.ckpt", "--set", "train.masking_regime=PastOnly")
    out = workspace / "ar" / "long.mcvd"
    assert dispatch(["sample", "--checkpoint", str(ckpt), "--task", "predict", "--steps", "2", "--blocks", "3",
                     "--video", str(workspace / "data" / "video_0001.mcvd"), "--out", str(out)]) == EXIT_OK
    assert read_video(out).shape == (12, 8, 8, 1)


def test_refuses_untrained_task(workspace, capsys):
    code, ckpt = train(workspace, "po.ckpt", "--set", "train.masking_regime=PastOnly")
    assert code == EXIT_OK
    capsys.readouterr()
    out = workspace / "refused.mcvd"
    code = dispatch(["sample", "--checkpoint", str(ckpt), "--task", "interpolate",
                     "--video", str(workspace / "data" / "video_0000.mcvd"), "--out", str(out)])
    assert code == EXIT_REFUSED
    err = capsys.readouterr().err
    assert "PastOnly" in err and "FuturePrediction" in err
    assert not out.exists()


def test_missing_config_is_a_config_error(workspace, tmp_path, capsys):
    out = tmp_path / "never.ckpt"
    code = dispatch(["train", "--config", str(tmp_path / "missing.cfg"), "--data", str(workspace / "data"),
                     "--out", str(out)])
    assert code == EXIT_CONFIG
    assert "missing.cfg" in capsys.readouterr().err
    assert not out.exists()


def test_usage_errors(capsys):
    assert dispatch(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert dispatch([]) == EXIT_USAGE
    assert dispatch(["sample"]) == EXIT_USAGE


def test_io_errors(tmp_path):
    bad = tmp_path / "bad.mcvd"
    bad.write_bytes(b"garbage!" * 4)
    assert dispatch(["export", "--video", str(bad), "--strip", str(tmp_path / "x.png")]) == EXIT_IO
    assert dispatch(["sample", "--checkpoint", str(bad)]) == EXIT_IO


def test_selftest_passes(capsys):
    assert dispatch(["selftest"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)
