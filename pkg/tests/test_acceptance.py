"""
端到端检查：展开模式之间的一致性，以及 (--runslow) 反瓶颈配置在合成形状上训练后的去噪、鲁棒性与探针效果
"""

import dataclasses

import numpy as np
import pytest

from config.config_system import DataConfig, EngineConfig, ModelConfig, RunConfig, TrainConfig
from conftest import tiny_model
from src.common.constants import NOT_CONVERGED, STABILITY_STEPS
from src.services.analysis_service import (
    damage_run, evaluate_denoising, evaluation_configs, seed_with_input, stability_run, update_rate_sweep,
)
from src.services.data_service import load_datasets
from src.services.probe_service import linear_probe
from src.services.training_service import TrainingService
from src.utils.masking import MaskConfig, apply_mask

MARGIN_DB = 3.0
RECOVERY_DB = 2.0


def _losses(config, dataset, iterations):
    service = TrainingService(config, dataset)
    return service, np.array([service.step()["loss"] for _ in range(iterations)])


def test_checkpointed_training_tracks_plain(tiny_config, tiny_dataset):
    _, plain = _losses(tiny_config, tiny_dataset, 8)
    checkpointed_config = dataclasses.replace(
        tiny_config, train=dataclasses.replace(tiny_config.train, rollout_mode="checkpointed",
                                               checkpoint_segments=2))
    _, checkpointed = _losses(checkpointed_config.validate(), tiny_dataset, 8)
    np.testing.assert_allclose(checkpointed, plain, rtol=1e-8)


def test_fusion_mitosis_training_stays_finite(tiny_config, tiny_dataset):
    config = dataclasses.replace(
        tiny_config, model=tiny_model(positional="xy"),
        train=dataclasses.replace(tiny_config.train, rollout_mode="fusion-mitosis", t_min=5, t_max=6,
                                  fusion_pre=2, fusion_post=2))
    service, losses = _losses(config.validate(), tiny_dataset, 6)
    assert np.isfinite(losses).all()
    assert all(np.isfinite(t.data).all() for t in service.params)


@pytest.fixture(scope="module")
def trained_denoiser():
    """d=64、MLP 256 的更新规则在 2000 张 16×16 合成形状上训练 5000 次"""
    config = RunConfig(
        model=ModelConfig.inverted_bottleneck(),
        data=DataConfig(height=16, width=16, num_samples=2000, val_fraction=0.0, test_fraction=0.1),
        train=TrainConfig(iterations=5000, batch_size=16, t_min=8, t_max=32, pool_size=256,
                          checkpoint_every=0, log_every=500),
        engine=EngineConfig(dtype="float32", log_level="WARNING"),
        seed=0,
    ).validate()
    splits = {name: ds.astype(np.float32) for name, ds in
              load_datasets(config.data, config.model.in_channels, config.seed).items()}
    service = TrainingService(config, splits["train"])
    losses = [service.step()["loss"] for _ in range(config.train.iterations)]
    return service.params, splits, np.array(losses)


def _masked_inputs(splits, count=32, seed=1):
    truth = splits["test"].images[:count]
    masked, _ = apply_mask(truth, MaskConfig.parse("2x2@50%:gaussian"), np.random.default_rng(seed))
    return masked, truth


@pytest.mark.slow
def test_training_reduces_loss(trained_denoiser):
    _, _, losses = trained_denoiser
    assert np.isfinite(losses).all()
    assert losses[-100:].mean() < 0.7 * losses[:100].mean()


@pytest.mark.slow
def test_denoising_beats_both_baselines_on_every_config(trained_denoiser):
    params, splits, _ = trained_denoiser
    test = splits["test"].head(128)
    report = evaluate_denoising(params, test, configs=evaluation_configs(1), rng=np.random.default_rng(0))
    assert len(report.per_config) == 9
    for name, values in report.per_config.items():
        assert values["psnr_db"] >= values["noisy_psnr_db"] + MARGIN_DB, (name, values)
        assert values["psnr_db"] >= values["constant_psnr_db"] + MARGIN_DB, (name, values)


@pytest.mark.slow
def test_convergence_is_faster_at_higher_update_rates(trained_denoiser):
    params, splits, _ = trained_denoiser
    masked, _ = _masked_inputs(splits)
    steps = update_rate_sweep(params, masked, [0.25, 0.5, 1.0], np.random.default_rng(0), max_steps=512)
    assert NOT_CONVERGED not in steps.values(), steps
    assert steps[0.25] >= steps[0.5] >= steps[1.0], steps


@pytest.mark.slow
def test_damaged_cells_recover(trained_denoiser):
    params, splits, _ = trained_denoiser
    masked, truth = _masked_inputs(splits)
    result = damage_run(params, masked, truth, steps=64, recovery_steps=64, sigma=0.5,
                        rng=np.random.default_rng(0))
    assert result["psnr_damaged"] < result["psnr_converged"]
    assert result["psnr_recovered"] >= result["psnr_undamaged"] - RECOVERY_DB, result


@pytest.mark.slow
def test_long_rollout_stays_bounded(trained_denoiser):
    params, splits, _ = trained_denoiser
    masked, _ = _masked_inputs(splits, count=8)
    trace = stability_run(params, seed_with_input(params, masked), steps=STABILITY_STEPS,
                          rng=np.random.default_rng(0))
    assert not trace.diverged, trace.max_abs
    assert len(trace.drift) == STABILITY_STEPS and np.isfinite(trace.drift).all()


@pytest.mark.slow
def test_hidden_state_classifier_beats_pixels(trained_denoiser):
    params, splits, _ = trained_denoiser
    result = linear_probe(params, splits["train"].head(512), splits["test"])
    assert result.accuracy > result.pixel_accuracy, result
