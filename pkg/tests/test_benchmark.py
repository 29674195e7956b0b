import numpy as np
import pandas as pd
import pytest

from src.common.exceptions import ContractError
from src.services.benchmark_service import bench_attention, bench_memory, scaling_ratios


def test_attention_benchmark_rows():
    frame = bench_attention(grid_sizes=(4, 8), window=3, heads=2, embed_dim=8, repeats=1, dtype=np.float64)
    assert list(frame.columns) == ["N", "kernel", "forward_ms", "backward_ms", "total_ms", "max_abs_diff"]
    assert frame["N"].tolist() == [16, 16, 64, 64]
    assert frame["kernel"].tolist() == ["local", "global"] * 2
    assert (frame["max_abs_diff"] < 1e-10).all()
    assert (frame["total_ms"] >= frame["forward_ms"]).all()


def test_scaling_ratios():
    frame = pd.DataFrame({"N": [16, 64, 256, 16, 64, 256], "kernel": ["local"] * 3 + ["global"] * 3,
                          "total_ms": [1.0, 4.0, 16.0, 1.0, 16.0, 256.0]})
    assert scaling_ratios(frame) == {"local": [4.0, 4.0], "global": [16.0, 16.0]}


@pytest.mark.slow
def test_local_attention_scales_linearly_global_quadratically():
    ratios = scaling_ratios(bench_attention((16, 32, 64), window=3, heads=4, embed_dim=128, repeats=2))
    assert len(ratios["local"]) == len(ratios["global"]) == 2
    assert max(ratios["local"]) <= 6.0, ratios
    assert min(ratios["global"]) >= 10.0, ratios


def test_memory_benchmark(tiny_config):
    frame = bench_memory(tiny_config, steps=32, segments=16, batch=2)
    assert frame["mode"].tolist() == ["plain", "checkpointed"]
    assert frame["T"].tolist() == [32, 32] and frame["segments"].tolist() == [0, 16]
    assert frame["forward_identical"].all()
    plain, checkpointed = frame.to_dict("records")
    assert 0 < checkpointed["peak_bytes"] <= 0.5 * plain["peak_bytes"]
    # 重算的代价：检查点模式的反向不会比普通模式快
    assert checkpointed["backward_ms"] >= plain["backward_ms"]


def test_memory_benchmark_rejects_too_many_segments(tiny_config):
    with pytest.raises(ContractError):
        bench_memory(tiny_config, steps=4, segments=5)
