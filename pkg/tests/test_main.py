from pathlib import Path

import pytest
from typer.testing import CliRunner

from meshsplat.errors import CheckpointError, ConfigError
from meshsplat.gradcheck import GradCheckResult
from meshsplat.main import app


@pytest.fixture
def runner():
    return CliRunner()


def test_no_arguments_shows_help(runner):
    result = runner.invoke(app, [])
    assert "stage1" in result.output
    assert "gradcheck" in result.output


def test_synth_forwards_options(runner, mocker, tmp_path):
    synth = mocker.patch("meshsplat.main.synth_dataset")
    synth.return_value.frames = [object()] * 5
    result = runner.invoke(app, ["synth", "bending-bar", "--frames", "5", "--resolution", "32",
                                 "--camera-mode", "static", "--clean", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    synth.assert_called_once_with("bending-bar", 5, 32, "static", 0, tmp_path, None, degrade=False)
    assert "wrote 5 frames" in result.output


def test_synth_defaults_under_runs_dir(runner, mocker, tmp_path):
    synth = mocker.patch("meshsplat.main.synth_dataset")
    synth.return_value.frames = []
    result = runner.invoke(app, ["synth", "twisting-torus"], env={"MESHSPLAT_RUNS_DIR": str(tmp_path)})
    assert result.exit_code == 0, result.output
    assert synth.call_args.args[5] == tmp_path / "data" / "twisting-torus"


def test_stage1_applies_overrides(runner, mocker, tmp_path):
    mocker.patch("meshsplat.main.load_dataset")
    run = mocker.patch("meshsplat.main.run_stage1", return_value=tmp_path / "stage1.npz")
    result = runner.invoke(app, ["stage1", "--dataset", str(tmp_path), "--out", str(tmp_path),
                                 "--stage1.steps=5", "--seed=3"])
    assert result.exit_code == 0, result.output
    config = run.call_args.args[1]
    assert config.stage1.steps == 5
    assert config.seed == 3


def test_bad_override_exits_with_one(runner, mocker, tmp_path):
    mocker.patch("meshsplat.main.load_dataset")
    run = mocker.patch("meshsplat.main.run_stage1")
    result = runner.invoke(app, ["stage1", "--dataset", str(tmp_path), "--stage1.steps=-2"])
    assert result.exit_code == 1
    assert "error" in result.output
    run.assert_not_called()


def test_stage2_reports_checkpoint_errors(runner, mocker, tmp_path):
    mocker.patch("meshsplat.main.load_dataset")
    mocker.patch("meshsplat.main.run_stage2", side_effect=CheckpointError("checkpoint not found: x.npz"))
    result = runner.invoke(app, ["stage2", "--dataset", str(tmp_path), "--checkpoint", "x.npz"])
    assert result.exit_code == 1
    assert "checkpoint not found" in result.output


def test_stage2_uses_env_workers(runner, mocker, tmp_path):
    mocker.patch("meshsplat.main.load_dataset")
    run = mocker.patch("meshsplat.main.run_stage2", return_value=tmp_path / "stage2.npz")
    result = runner.invoke(app, ["stage2", "--dataset", str(tmp_path), "--checkpoint", "s1.npz",
                                 "--out", str(tmp_path)], env={"MESHSPLAT_WORKERS": "3"})
    assert result.exit_code == 0, result.output
    assert run.call_args.kwargs["workers"] == 3


def test_bad_environment_exits_with_one(runner):
    result = runner.invoke(app, ["gradcheck"], env={"MESHSPLAT_WORKERS": "many"})
    assert result.exit_code == 1
    assert "invalid environment settings" in result.output


def test_render_collects_timesteps(runner, mocker, tmp_path):
    render = mocker.patch("meshsplat.main.render_cmd", return_value=[tmp_path / "frame_0000.png"] * 2)
    result = runner.invoke(app, ["render", "--checkpoint", "s2.npz", "--cameras", "path.json",
                                 "--t", "0.0", "--t", "0.5", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    checkpoint, cameras, timesteps, out = render.call_args.args[:4]
    assert (checkpoint, cameras, out) == (Path("s2.npz"), Path("path.json"), tmp_path)
    assert list(timesteps) == [0.0, 0.5]


def test_eval_prints_metrics(runner, mocker, tmp_path):
    mocker.patch("meshsplat.main.load_dataset")
    mocker.patch("meshsplat.main.eval_cmd", return_value=[
        {"view": "train", "frames": 3, "psnr": 24.5, "ssim": 0.91, "chamfer_x1e3": 0.4, "gaussians": 600},
    ])
    result = runner.invoke(app, ["eval", "--checkpoint", str(tmp_path / "c" / "s2.npz"),
                                 "--dataset", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "24.5000" in result.output
    assert "psnr" in result.output


def test_gradcheck_exit_code_follows_results(runner, mocker):
    check = mocker.patch("meshsplat.main.run_gradcheck", return_value=[GradCheckResult("stage1/a", 6, 0, 1e-7)])
    assert runner.invoke(app, ["gradcheck"]).exit_code == 0
    check.assert_called_with(0, None)
    check.return_value = [GradCheckResult("stage2/b", 5, 1, 3e-2)]
    result = runner.invoke(app, ["gradcheck", "--samples", "2"])
    assert result.exit_code == 1
    check.assert_called_with(0, 2)


def test_ablate_unknown_flag(runner, mocker, tmp_path):
    mocker.patch("meshsplat.main.load_dataset")
    mocker.patch("meshsplat.main.run_ablation", side_effect=ConfigError("unknown ablation flag 'colour'"))
    result = runner.invoke(app, ["ablate", "colour", "--dataset", str(tmp_path)])
    assert result.exit_code == 1
    assert "unknown ablation flag" in result.output
