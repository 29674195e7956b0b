import numpy as np
import pytest

from src.common.exceptions import ConfigError, ContractError, DimensionError
from src.utils.masking import (
    CurriculumSchedule, MaskConfig, apply_mask, available_configs, default_noise_kind, mask_batch,
    patch_count,
)


def test_curriculum_unlocks_doubling_intervals():
    schedule = CurriculumSchedule()
    assert schedule.unlock_iterations[0] == 0
    assert schedule.unlock_iterations[1] == 40
    assert schedule.unlock_iterations[-1] == 10000
    gaps = np.diff(schedule.unlock_iterations)
    np.testing.assert_allclose(gaps[1:] / gaps[:-1], 2.0, atol=0.06)


@pytest.mark.parametrize("iteration,count", [(0, 1), (39, 1), (40, 2), (9999, 8), (10000, 9), (50000, 9)])
def test_available_configs(iteration, count):
    configs = available_configs(iteration)
    assert len(configs) == count
    assert configs[0] == MaskConfig(1, 1, 0.25, "gaussian")


def test_available_configs_rejects_negative_iteration():
    with pytest.raises(ContractError):
        available_configs(-1)


def test_text_form():
    cfg = MaskConfig.parse("2x2@50%:gaussian")
    assert cfg == MaskConfig(2, 2, 0.5, "gaussian")
    assert cfg.format() == "2x2@50%:gaussian"
    assert MaskConfig.parse("4x4@75%", "dropout").noise_kind == "dropout"
    for bad in ("2x2", "2x2@150%", "2@50%", "2x2@50%:salt"):
        with pytest.raises(ConfigError):
            MaskConfig.parse(bad)


def test_default_noise_kind():
    assert default_noise_kind(1) == "gaussian"
    assert default_noise_kind(3) == "dropout"
    assert default_noise_kind(3, "gaussian") == "gaussian"


@pytest.mark.parametrize("patch,coverage,expected", [(1, 0.25, 16), (2, 0.5, 8), (4, 0.75, 3)])
def test_patch_count_rounds_half_up(patch, coverage, expected):
    total, corrupted = patch_count(8, 8, MaskConfig(patch, patch, coverage))
    assert total == 64 // (patch * patch)
    assert corrupted == expected


def test_dropout_zeros_exactly_the_chosen_patches(rng):
    images = rng.uniform(0.1, 1.0, (5, 3, 8, 8))
    masked, mask = apply_mask(images, MaskConfig(2, 2, 0.5, "dropout"), rng)
    assert mask.shape == (5, 1, 8, 8)
    assert (mask.reshape(5, -1).sum(axis=1) == 8 * 4).all()
    full_mask = np.broadcast_to(mask, images.shape)
    np.testing.assert_array_equal(masked[full_mask], 0.0)
    np.testing.assert_array_equal(masked[~full_mask], images[~full_mask])
    # 被破坏区域由完整 patch 组成
    blocks = mask[:, 0].reshape(5, 4, 2, 4, 2)
    assert (blocks.all(axis=(2, 4)) == blocks.any(axis=(2, 4))).all()


def test_gaussian_noise_stays_in_range(rng):
    images = rng.random((4, 1, 8, 8))
    masked, mask = apply_mask(images, MaskConfig(1, 1, 0.75, "gaussian"), rng)
    assert masked.min() >= 0.0 and masked.max() <= 1.0
    np.testing.assert_array_equal(masked[~mask], images[~mask])
    assert mask.sum() == 4 * 48


def test_mask_batch_picks_per_image(rng):
    configs = available_configs(10000, "dropout")
    masked, mask, picked = mask_batch(rng.random((16, 1, 8, 8)), configs, rng)
    assert masked.shape == (16, 1, 8, 8) and len(picked) == 16
    assert len(set(picked)) > 1
    with pytest.raises(ContractError):
        mask_batch(masked, [], rng)


def test_mask_requires_divisible_image(rng):
    with pytest.raises(DimensionError):
        apply_mask(rng.random((1, 1, 6, 6)), MaskConfig(4, 4, 0.5), rng)
