import numpy as np
import pytest

from conftest import make_grid, tiny_model
from src.common.exceptions import ContractError, DimensionError
from src.core import ops
from src.core.gradcheck import check_gradients
from src.core.tensor import Tensor
from src.models.cell_grid import extract_output
from src.models.update_rule import UpdateRule, UpdateRuleParams, apply_update_rule, draw_update_mask


def _randomize_head(params, rng, scale=0.1):
    for name in ("head_w", "head_b"):
        params[name].data = rng.standard_normal(params[name].shape) * scale
    return params


def test_parameter_names_and_zero_head(rng):
    params = UpdateRuleParams.initialize(tiny_model(positional="learned"), 4, 4, rng, np.float64)
    assert params.names()[:2] == ["embed_w", "pos_table"]
    assert "block0.w_q" in params.names()
    assert not params["head_w"].data.any() and not params["head_b"].data.any()
    np.testing.assert_array_equal(params["block0.ln1_g"].data, 1.0)


def test_parameter_count_independent_of_heads(rng):
    counts = {h: UpdateRuleParams.initialize(tiny_model(heads=h), 4, 4, rng).count() for h in (1, 2, 4, 8)}
    assert len(set(counts.values())) == 1


def test_zero_initialized_head_is_identity(rng):
    params = UpdateRuleParams.initialize(tiny_model(), 4, 4, rng, np.float64)
    grid = make_grid(params, rng.random((2, 1, 4, 4)))
    after = apply_update_rule(grid, params, 1.0)
    np.testing.assert_array_equal(after.cells.data, grid.cells.data)


def test_only_output_and_hidden_slabs_change(rng):
    params = _randomize_head(UpdateRuleParams.initialize(tiny_model(positional="xy"), 4, 4, rng, np.float64), rng)
    grid = make_grid(params, rng.random((2, 1, 4, 4)))
    after = apply_update_rule(grid, params, 1.0)
    for name in ("input", "pe"):
        np.testing.assert_array_equal(after.slab_data(name), grid.slab_data(name))
    for name in ("output", "hidden"):
        assert not np.allclose(after.slab_data(name), grid.slab_data(name))


def test_sigma_zero_leaves_grid_unchanged(tiny_params, rng):
    grid = make_grid(tiny_params, rng.random((2, 1, 4, 4)))
    after = apply_update_rule(grid, tiny_params, 0.0)
    np.testing.assert_array_equal(after.cells.data, grid.cells.data)


def test_masked_cells_keep_their_state(tiny_params, rng):
    grid = make_grid(tiny_params, rng.random((1, 1, 4, 4)))
    mask = np.zeros((1, 16), dtype=bool)
    mask[0, 5] = True
    after = apply_update_rule(grid, tiny_params, 0.5, update_mask=mask)
    changed = np.any(after.cells.data != grid.cells.data, axis=-1)[0]
    np.testing.assert_array_equal(np.flatnonzero(changed), [5])


def test_partial_sigma_requires_rng(tiny_params, rng):
    grid = make_grid(tiny_params, rng.random((1, 1, 4, 4)))
    with pytest.raises(ContractError):
        apply_update_rule(grid, tiny_params, 0.5)
    with pytest.raises(ContractError):
        apply_update_rule(grid, tiny_params, 1.5, rng)
    with pytest.raises(DimensionError):
        UpdateRule(tiny_params).step(grid, np.ones((1, 15), dtype=bool))


def test_update_mask_rate(rng):
    mask = draw_update_mask(rng, 0.5, 64, 256)
    assert mask.shape == (64, 256)
    assert abs(mask.mean() - 0.5) < 0.02


def test_composite_rollout_gradient():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = _randomize_head(UpdateRuleParams.initialize(tiny_model(), 4, 4, rng, np.float64), rng, 0.3)
        images = rng.random((1, 1, 4, 4))
        masks = [draw_update_mask(rng, 0.5, 1, 16) for _ in range(2)]
        weights = Tensor(rng.standard_normal((1, 1, 4, 4)))
        rule = UpdateRule(params)

        def loss():
            grid = make_grid(params, images)
            for mask in masks:
                grid = rule.step(grid, mask)
            start, stop = grid.layout.slab_bounds("output")
            output = ops.reshape(ops.slice_axis(grid.cells, start, stop), (1, 1, 4, 4))
            return ops.sum(ops.mul(output, weights))

        errors = check_gradients(loss, list(params))
        assert max(errors.values()) <= 1e-3, (seed, errors)


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_information_spreads_one_chebyshev_ring_per_step(rng, steps):
    params = _randomize_head(UpdateRuleParams.initialize(tiny_model(), 9, 9, rng, np.float64), rng)
    images = rng.random((1, 1, 9, 9))
    perturbed = images.copy()
    perturbed[0, 0, 4, 4] += 0.5

    rule = UpdateRule(params)
    grids = [make_grid(params, images), make_grid(params, perturbed)]
    for _ in range(steps):
        grids = [apply_update_rule(g, params, 1.0, rule=rule) for g in grids]

    changed = np.any(np.abs(grids[0].cells.data - grids[1].cells.data) > 1e-12, axis=-1)[0].reshape(9, 9)
    rows, cols = np.indices((9, 9))
    distance = np.maximum(np.abs(rows - 4), np.abs(cols - 4))
    assert not changed[distance > steps].any()
    assert changed[distance == steps].any()


def test_output_readout_shape(tiny_params, rng):
    grid = apply_update_rule(make_grid(tiny_params, rng.random((3, 1, 4, 4))), tiny_params, 1.0)
    assert extract_output(grid).shape == (3, 1, 4, 4)
