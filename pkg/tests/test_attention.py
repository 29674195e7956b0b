import numpy as np
import pytest

from conftest import make_grid, tiny_model
from src.common.exceptions import ContractError, DimensionError, IndexRangeError
from src.core import ops
from src.core.tensor import Tensor, backward
from src.models.attention import (
    attention_scale, build_neighborhood_index, head_mask_tensor, localized_attention,
    masked_global_attention, merge_heads, split_heads,
)
from src.models.update_rule import UpdateRule, UpdateRuleParams


def test_wrap_index_rows_are_toroidal():
    index = build_neighborhood_index(4, 4, 3, 3, "wrap")
    assert index.shape == (16, 9)
    np.testing.assert_array_equal(index[0], [15, 12, 13, 3, 0, 1, 7, 4, 5])
    # 中心总在窗口中间
    np.testing.assert_array_equal(index[:, 4], np.arange(16))


def test_zero_pad_index_points_outside_cells_at_padding_row():
    index = build_neighborhood_index(4, 4, 3, 3, "zero-pad")
    np.testing.assert_array_equal(index[0], [16, 16, 16, 16, 0, 1, 16, 4, 5])
    assert (index[5] < 16).all()


@pytest.mark.parametrize("window", [(2, 3), (3, 4), (0, 1)])
def test_even_or_empty_window_rejected(window):
    with pytest.raises(ContractError):
        build_neighborhood_index(4, 4, *window)


def test_window_larger_than_grid_rejected():
    with pytest.raises(ContractError):
        build_neighborhood_index(2, 2, 3, 3)


@pytest.mark.parametrize("boundary,grid", [("wrap", (4, 4)), ("zero-pad", (4, 4)), ("wrap", (1, 9))])
def test_gathered_attention_equals_banded_global(rng, boundary, grid):
    num = grid[0] * grid[1]
    index = build_neighborhood_index(*grid, 3, 3, boundary)
    q, k, v = (Tensor(rng.standard_normal((2, 3, num, 4)), requires_grad=True) for _ in range(3))
    weights = Tensor(rng.standard_normal((2, 3, num, 4)))

    local = localized_attention(q, k, v, index, 2.0)
    backward(ops.sum(ops.mul(local, weights)))
    local_grads = [t.grad.copy() for t in (q, k, v)]
    for t in (q, k, v):
        t.grad = None

    dense = masked_global_attention(q, k, v, index, 2.0)
    backward(ops.sum(ops.mul(dense, weights)))
    np.testing.assert_allclose(local.data, dense.data, atol=1e-10)
    for got, expected in zip(local_grads, (q.grad, k.grad, v.grad)):
        np.testing.assert_allclose(got, expected, atol=1e-10)


@pytest.mark.parametrize("heads", [1, 4])
@pytest.mark.parametrize("positional", ["handcrafted", "learned", "none", "xy", "sincos5xy"])
def test_update_rule_matches_global_oracle(rng, heads, positional):
    params = UpdateRuleParams.initialize(tiny_model(heads=heads, positional=positional), 4, 4, rng, np.float64)
    params["head_w"].data = rng.standard_normal(params["head_w"].shape) * 0.1
    grid = make_grid(params, rng.random((2, 1, 4, 4)))
    weights = Tensor(rng.standard_normal((2, 16, params.layout.update_len)))

    results = []
    for oracle in (False, True):
        params.zero_grad()
        delta = UpdateRule(params, global_oracle=oracle).update_vectors(grid)
        backward(ops.sum(ops.mul(delta, weights)))
        results.append((delta.data.copy(), params.grads()))

    (local, local_grads), (dense, dense_grads) = results
    assert np.max(np.abs(local - dense)) <= 1e-5
    for name in params.names():
        assert np.max(np.abs(local_grads[name] - dense_grads[name])) <= 1e-5, name


def test_attention_sink_receives_weights_over_neighbourhood(rng):
    params = UpdateRuleParams.initialize(tiny_model(), 4, 4, rng, np.float64)
    captured = []
    UpdateRule(params, sink=captured.append).update_vectors(make_grid(params, rng.random((1, 1, 4, 4))))
    (weights,) = captured
    assert weights.shape == (1, 2, 16, 9)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0)


def test_head_split_merge_and_mask(rng):
    x = Tensor(rng.standard_normal((2, 5, 8)))
    split = split_heads(x, 4)
    assert split.shape == (2, 4, 5, 2)
    np.testing.assert_array_equal(merge_heads(split).data, x.data)
    with pytest.raises(DimensionError):
        split_heads(x, 3)

    keep = head_mask_tensor(4, [1, 3], np.float64)
    np.testing.assert_array_equal(keep.data.reshape(-1), [1, 0, 1, 0])
    with pytest.raises(IndexRangeError):
        head_mask_tensor(4, [4], np.float64)


def test_attention_scale_modes():
    assert attention_scale(128, 4) == pytest.approx(np.sqrt(32))
    assert attention_scale(128, 4, "full") == pytest.approx(np.sqrt(128))
    with pytest.raises(ContractError):
        attention_scale(128, 4, "other")
