import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from conftest import make_grid, tiny_model
from src.common.constants import NOT_CONVERGED
from src.common.exceptions import ContractError, IndexRangeError
from src.core.event_bus import EventType, get_event_bus
from src.models.update_rule import UpdateRuleParams
from src.services.analysis_service import (
    AnalysisService, convergence_step, damage_cells, damage_mask, dump_attention, evaluate_denoising,
    evaluation_configs, head_mask_rollout, median_run, pca_hidden, plot_pca, reinject_run,
    spatial_interpolation_run, stability_run, unseen_noise_run, update_rate_sweep,
)
from src.services.data_service import MANIFEST_FILE, DataService
from src.utils.masking import MaskConfig
from src.utils.synth_shapes import synth_shapes


@pytest.fixture
def zero_params(rng):
    return UpdateRuleParams.initialize(tiny_model(), 4, 4, rng, np.float64)


def test_damage_covers_a_quarter_block(rng):
    mask = damage_mask(8, 8, 5, rng)
    assert mask.shape == (5, 64)
    assert (mask.sum(axis=1) == 16).all()
    for row in mask.reshape(5, 8, 8):
        rows, cols = np.nonzero(row)
        assert rows.max() - rows.min() == 3 and cols.max() - cols.min() == 3


def test_damage_only_touches_output_and_hidden(tiny_params, rng):
    grid = make_grid(tiny_params, rng.random((2, 1, 4, 4)))
    mask = damage_mask(4, 4, 2, rng)
    damaged = damage_cells(grid, rng, mask)
    np.testing.assert_array_equal(damaged.slab_data("input"), grid.slab_data("input"))
    changed = np.any(damaged.cells.data != grid.cells.data, axis=-1)
    np.testing.assert_array_equal(changed, mask)
    assert np.abs(damaged.slab_data("hidden")).max() <= 1.0


def test_convergence_step():
    assert convergence_step(np.array([1.0, 1.0, 0.0, 0.0, 0.0]), tol=0.5, window=3) == 2
    assert convergence_step(np.array([0.0, 0.0, 1.0, 0.0]), tol=0.5, window=3) == NOT_CONVERGED
    assert convergence_step(np.zeros(8), tol=1e-3, window=8) == 0


def test_zero_update_rule_is_immediately_stable(zero_params, rng):
    grid = make_grid(zero_params, rng.random((2, 1, 4, 4)))
    trace = stability_run(zero_params, grid, steps=20, rng=rng, window=4)
    assert trace.drift.shape == (20,) and not trace.drift.any()
    assert trace.status == "converged" and trace.converged_at == 0


def test_exploding_update_rule_is_reported_divergent(zero_params, rng):
    zero_params["head_b"].data[...] = 5.0
    trace = stability_run(zero_params, make_grid(zero_params, rng.random((1, 1, 4, 4))), steps=50,
                          sigma=1.0, rng=rng)
    assert trace.diverged and trace.status == "diverged"
    assert trace.converged_at == NOT_CONVERGED
    assert np.isinf(trace.drift[-1])


def test_sigma_sweep_marks_zero_rate_not_converged(zero_params, rng):
    result = update_rate_sweep(zero_params, rng.random((2, 1, 4, 4)), [0.0, 0.5, 1.0], rng,
                               max_steps=16, window=4)
    assert result == {0.0: NOT_CONVERGED, 0.5: 0, 1.0: 0}


def test_pca_recovers_a_line(rng):
    t = rng.standard_normal(50)
    hidden = (t[:, None] * rng.standard_normal(6)[None, :]).reshape(50, 2, 3)
    result = pca_hidden(hidden, components=3)
    assert result.components == 1 and result.degenerate
    np.testing.assert_allclose(result.explained_variance_ratio, [1.0])
    assert abs(np.corrcoef(result.projections[:, 0], t)[0, 1]) == pytest.approx(1.0)


def test_pca_wide_features_and_plot(rng, tmp_path):
    hidden = rng.standard_normal((12, 40))
    result = pca_hidden(hidden, components=3)
    assert result.projections.shape == (12, 3) and not result.degenerate
    assert result.explained_variance_ratio.sum() < 1.0
    assert plot_pca(result, np.arange(12) % 3, tmp_path / "pca.png").exists()
    with pytest.raises(ContractError):
        pca_hidden(hidden[:1])


def test_head_masking(tiny_params, rng):
    images = rng.random((2, 1, 4, 4))
    baseline = head_mask_rollout(tiny_params, images, (), 3, 1.0, rng)
    masked = head_mask_rollout(tiny_params, images, (0,), 3, 1.0, rng)
    assert not np.allclose(baseline, masked)
    with pytest.raises(IndexRangeError):
        head_mask_rollout(tiny_params, images, (2,), 3, 1.0, rng)


def test_interpolation_needs_spatial_positional(rng):
    params = UpdateRuleParams.initialize(tiny_model(positional="xy"), 4, 4, rng, np.float64)
    output = spatial_interpolation_run(params, rng.random((2, 1, 4, 4)), 8, 8, 3, 0.5, rng)
    assert output.shape == (2, 1, 8, 8) and np.isfinite(output).all()

    for kind in ("handcrafted", "learned"):
        fixed = UpdateRuleParams.initialize(tiny_model(positional=kind), 4, 4, rng, np.float64)
        with pytest.raises(ContractError):
            spatial_interpolation_run(fixed, rng.random((1, 1, 4, 4)), 8, 8, 3, 0.5, rng)
        assert spatial_interpolation_run(fixed, rng.random((1, 1, 4, 4)), 4, 4, 2, 0.5, rng).shape == (1, 1, 4, 4)


def test_reinject_and_median_runs(tiny_params, rng):
    images_a, images_b = rng.random((2, 1, 4, 4)), rng.random((2, 1, 4, 4))
    result = reinject_run(tiny_params, images_a, images_b, 3, 0.5, rng)
    assert result["output"].shape == (2, 1, 4, 4)
    assert np.isfinite([result["psnr_vs_a"], result["psnr_vs_b"]]).all()

    train = rng.random((9, 1, 4, 4))
    median = median_run(tiny_params, train, images_a, 3, 0.5, rng)
    np.testing.assert_array_equal(median["median_image"], np.median(train, axis=0))
    assert median["full_mask_output"].shape == (2, 1, 4, 4)
    assert median["full_mask_median_l1"] >= 0.0


def test_unseen_noise_rows(rng):
    params = UpdateRuleParams.initialize(tiny_model(), 12, 12, rng, np.float64)
    params["head_w"].data = rng.standard_normal(params["head_w"].shape) * 0.1
    configs = [MaskConfig(2, 2, 0.5, "dropout"), MaskConfig(1, 1, 0.9, "gaussian")]
    rows = unseen_noise_run(params, rng.random((2, 1, 12, 12)), configs, 3, 0.5, rng, extra_steps=4)
    assert [row["config"] for row in rows] == ["2x2@50%:dropout", "1x1@90%:gaussian"]
    assert all(row["status"] in ("converged", "not-converged", "diverged") for row in rows)


def test_attention_dump(tiny_params, rng, tmp_path):
    paths = dump_attention(tiny_params, rng.random((1, 4, 4)), 3, 1.0, rng, tmp_path)
    assert [p.name for p in paths] == ["attention_head0.npy", "attention_head1.npy", "neighborhood_index.npy"]
    weights = np.load(paths[0])
    assert weights.shape == (3, 16, 9)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0)
    assert np.load(paths[-1]).shape == (16, 9)


def test_zero_rule_denoising_scores_like_constant_canvas(zero_params, rng):
    dataset = synth_shapes(6, 12, 12, seed=2).astype(np.float64)
    configs = evaluation_configs(1)[:2]
    report = evaluate_denoising(zero_params, dataset, steps=2, configs=configs, rng=rng, batch_size=4)
    assert list(report.per_config) == ["1x1@25%:gaussian", "1x1@50%:gaussian"]
    for values in report.per_config.values():
        assert values["psnr_db"] == pytest.approx(values["constant_psnr_db"])
    assert report.to_rows()[-1]["config"] == "all"
    assert [c.format() for c in evaluation_configs(3)][-1] == "4x4@75%:dropout"


def test_denoising_report_on_grids_smaller_than_ssim_window(rng):
    params = UpdateRuleParams.initialize(tiny_model(), 8, 8, rng, np.float64)
    dataset = synth_shapes(4, 8, 8, seed=0).astype(np.float64)
    report = evaluate_denoising(params, dataset, steps=2,
                                configs=[MaskConfig.parse("1x1@50%:gaussian")], rng=rng)
    values = report.per_config["1x1@50%:gaussian"]
    assert np.isfinite(values["psnr_db"]) and np.isfinite(values["noisy_psnr_db"])
    assert np.isnan(values["ssim"]) and np.isnan(values["constant_ssim"])
    assert np.isnan(report.ssim) and np.isfinite(report.psnr_db)


@pytest.fixture
def analysis_setup(tiny_config, tmp_path, rng):
    config = dataclasses.replace(tiny_config, data=dataclasses.replace(tiny_config.data, height=12, width=12))
    params = UpdateRuleParams.initialize(config.model, 12, 12, rng, np.float64)
    params["head_w"].data = rng.standard_normal(params["head_w"].shape) * 0.05
    corpus = synth_shapes(12, 12, 12, seed=1).astype(np.float64)
    splits = {"train": corpus.head(8), "test": corpus.subset(np.arange(8, 12), "test")}
    data_service = DataService(config, tmp_path / "analysis_run", "analyze")
    data_service.start()
    yield AnalysisService(config, params, splits, data_service), data_service
    data_service.stop()


def test_analysis_service_writes_tables(analysis_setup):
    service, data_service = analysis_setup
    completed = []
    get_event_bus().subscribe(EventType.ANALYSIS_COMPLETED, completed.append)
    report = service.evaluate()
    assert np.isfinite(report.psnr_db)
    service.damage()
    service.stability()
    service.sigma_sweep()
    service.head_mask([1])
    service.reinject()
    service.median()
    service.unseen([MaskConfig(2, 2, 0.5, "gaussian")])
    assert service.pca().components >= 1
    assert len(service.attention()) == 3
    assert [event["analysis"] for event in completed] == [
        "evaluate", "damage", "stability", "sigma_sweep", "head_mask", "reinject", "median", "unseen", "pca",
        "attention"]

    analysis = data_service.run_dir / "analysis"
    frame = pd.read_csv(analysis / "denoising.csv")
    assert len(frame) == 10 and frame["config"].iloc[-1] == "all"
    assert len(pd.read_csv(analysis / "stability.csv")) == service.config.eval.stability_steps
    sweep = pd.read_csv(analysis / "sigma_sweep.csv")
    assert sweep["sigma"].tolist() == service.config.eval.sigma_list
    assert (sweep["iterations"] >= NOT_CONVERGED).all()

    data_service.stop()
    manifest = json.loads((data_service.run_dir / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert {"evaluate", "damage", "stability", "pca", "attention"} <= set(manifest["summary"])
    assert "analysis/denoising.csv" in manifest["outputs"]


def test_analysis_service_rejects_unusable_requests(analysis_setup):
    service, _ = analysis_setup
    with pytest.raises(ContractError):
        service.interp(24, 24)
    with pytest.raises(IndexRangeError):
        service.head_mask([5])
    summary = service.denoise(MaskConfig(2, 2, 0.5, "gaussian"))
    assert summary["mask"] == "2x2@50%:gaussian"
    assert service.eval_split.split == "test"
