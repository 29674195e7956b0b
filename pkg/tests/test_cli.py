import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config.config_system import serialize_config
from main import main
from src.common.constants import NONDETERMINISTIC_COLUMNS, ExitCode
from src.common.exceptions import ConfigError, DataFormatError, DimensionError, DivergenceError
from src.core.application import exit_code_for, parse_overrides
from src.models.serialization import load_params
from src.services.checkpoint_service import resolve_checkpoint
from src.services.data_service import MANIFEST_FILE, METRICS_FILE, read_metrics


@pytest.fixture
def config_file(tiny_config, tmp_path):
    """12×12 的小配置 (SSIM 需要至少 11 像素)"""
    tiny_config.data.height = tiny_config.data.width = 12
    path = tmp_path / "tiny.yaml"
    path.write_text(serialize_config(tiny_config.validate()), encoding="utf-8")
    return path


def _deterministic(frame):
    return frame.drop(columns=list(NONDETERMINISTIC_COLUMNS))


def test_parse_overrides():
    assert parse_overrides(["--model.heads", "4", "--train.sigma=0.5", "--eval.max-samples", "3"]) == {
        "model.heads": "4", "train.sigma": "0.5", "eval.max_samples": "3"}
    for tokens in (["model.heads", "4"], ["--model.heads"], ["--"]):
        with pytest.raises(ConfigError):
            parse_overrides(tokens)


def test_exit_codes():
    assert exit_code_for(DivergenceError("nan")) == ExitCode.DIVERGENCE == 3
    assert exit_code_for(DataFormatError("bad", path="x", offset=4)) == ExitCode.DATA == 2
    assert exit_code_for(DimensionError("数据集通道数 3 与 in_channels=1 不一致")) == ExitCode.DATA
    assert exit_code_for(ConfigError("bad")) == ExitCode.USAGE == 1


def test_usage_errors_exit_1(config_file):
    assert main(["fly"]) == 1
    assert main(["train", "--config", str(config_file), "--model.colour", "red"]) == 1
    assert main(["train", "--config", str(config_file), "stray"]) == 1
    assert main(["train", "--config", str(config_file), "--rollout", "fusion-mitosis",
                 "--model.patch_h", "4", "--model.patch_w", "4"]) == 1


def test_bad_idx_file_exits_2(config_file, tmp_path):
    bogus = tmp_path / "bogus.idx"
    bogus.write_bytes(b"\x00\x00\x08\x03\x00\x00")
    assert main(["train", "--config", str(config_file), "--data.dataset", "idx",
                 "--data.train_images", str(bogus)]) == 2


def test_train_writes_run_directory(config_file, tiny_config):
    assert main(["train", "--config", str(config_file)]) == 0
    run = Path(tiny_config.output_dir)
    frame = read_metrics(run / METRICS_FILE)
    assert frame["iteration"].tolist() == list(range(1, 11))
    assert np.isfinite(frame["loss"]).all()
    manifest = json.loads((run / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert manifest["command"] == "train" and manifest["summary"]["iterations"] == 10
    assert resolve_checkpoint(run).name == "iter_000010"


def test_resume_matches_uninterrupted_run(config_file, tmp_path):
    interrupted, straight = tmp_path / "interrupted", tmp_path / "straight"
    assert main(["train", "--config", str(config_file), "--output_dir", str(interrupted), "--until", "5"]) == 0
    assert resolve_checkpoint(interrupted).name == "iter_000005"
    assert main(["train", "--resume", str(interrupted)]) == 0
    assert main(["train", "--config", str(config_file), "--output_dir", str(straight)]) == 0

    pd.testing.assert_frame_equal(_deterministic(read_metrics(interrupted / METRICS_FILE)),
                                  _deterministic(read_metrics(straight / METRICS_FILE)))
    resumed, reference = load_params(resolve_checkpoint(interrupted)), load_params(resolve_checkpoint(straight))
    for name in reference.names():
        np.testing.assert_array_equal(resumed[name].data, reference[name].data)


def test_evaluation_commands_on_trained_run(config_file, tiny_config, tmp_path):
    assert main(["train", "--config", str(config_file)]) == 0
    run = tiny_config.output_dir
    assert main(["evaluate", "--params", run]) == 0
    assert main(["denoise", "--params", run, "--mask", "2x2@50%"]) == 0
    assert main(["analyze", "stability", "--params", run]) == 0
    assert main(["analyze", "unseen", "--params", run, "--mask", "3x3@50%", "--mask", "1x1@90%"]) == 0
    assert main(["analyze", "interp", "--params", run, "--size", "24x24"]) == 1
    assert main(["analyze", "head-mask", "--params", run, "--heads", "7"]) == 1

    runs = tmp_path / "runs"
    evaluate_dir = next(runs.glob("evaluate_*"))
    denoising = pd.read_csv(evaluate_dir / "analysis" / "denoising.csv")
    assert len(denoising) == 10 and denoising["config"].iloc[0] == "1x1@25%:gaussian"
    denoise = pd.read_csv(next(runs.glob("denoise_*")) / "analysis" / "denoise.csv")
    assert len(denoise) == tiny_config.eval.max_samples
    unseen = pd.read_csv(next(runs.glob("analyze-unseen_*")) / "analysis" / "unseen.csv")
    assert unseen["config"].tolist() == ["3x3@50%:gaussian", "1x1@90%:gaussian"]


def test_probe_command(config_file, tiny_config, tmp_path):
    assert main(["train", "--config", str(config_file), "--train.iterations", "2"]) == 0
    assert main(["probe", "--params", str(tiny_config.output_dir)]) == 0
    row = pd.read_csv(next((tmp_path / "runs").glob("probe_*")) / "analysis" / "probe.csv").iloc[0]
    assert row["probe_parameters"] == row["expected_probe_parameters"]


def test_bench_commands(config_file, tmp_path):
    assert main(["bench-attn", "--config", str(config_file), "--sizes", "4,8", "--heads", "2",
                 "--embed-dim", "8", "--repeats", "1"]) == 0
    assert main(["bench-memory", "--config", str(config_file), "--steps", "4", "--segments", "2",
                 "--batch", "2", "--output_dir", str(tmp_path / "mem")]) == 0
    frame = pd.read_csv(tmp_path / "mem" / "analysis" / "bench_memory.csv")
    assert frame["mode"].tolist() == ["plain", "checkpointed"]
    assert main(["bench-memory", "--config", str(config_file), "--steps", "4", "--segments", "5",
                 "--output_dir", str(tmp_path / "mem2")]) == 1


def test_evaluate_small_grid_run(tiny_config, tmp_path):
    path = tmp_path / "tiny8.yaml"
    path.write_text(serialize_config(tiny_config), encoding="utf-8")
    assert main(["train", "--config", str(path)]) == 0
    assert main(["evaluate", "--params", tiny_config.output_dir]) == 0
    denoising = pd.read_csv(next((tmp_path / "runs").glob("evaluate_*")) / "analysis" / "denoising.csv")
    assert denoising["ssim"].isna().all()
    assert np.isfinite(denoising["psnr_db"]).all()
