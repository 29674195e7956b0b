"""
测试公共夹具：双精度小模型配置、固定种子随机数、小型合成数据集
"""

import numpy as np
import pytest

from config.config_system import DataConfig, EngineConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig
from src.common.constants import RUN_ROOT_ENV
from src.core.event_bus import get_event_bus
from src.core.tensor import get_default_dtype, set_default_dtype
from src.models.cell_grid import inject_input, seed_cells
from src.models.update_rule import UpdateRuleParams
from src.utils.synth_shapes import synth_shapes


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时的经验性检查")
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="重新生成 tests/data 下的 golden 指标轨迹")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时的端到端检查，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_run_root(tmp_path, monkeypatch):
    """运行目录写到临时目录；测试结束恢复默认精度并清空事件订阅"""
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "runs"))
    previous = get_default_dtype()
    yield
    set_default_dtype(previous)
    get_event_bus().clear_subscriptions()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(**overrides) -> ModelConfig:
    values = dict(in_channels=1, out_channels=1, hidden_channels=4, embed_dim=8, heads=2, mlp_dim=8,
                  positional="handcrafted")
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """8×8 灰度、双精度、10 次迭代的训练配置"""
    config = RunConfig(
        model=tiny_model(),
        data=DataConfig(height=8, width=8, num_samples=40, val_fraction=0.0, test_fraction=0.2),
        train=TrainConfig(iterations=10, batch_size=4, t_min=2, t_max=4, pool_size=16,
                          checkpoint_every=5, log_every=5),
        eval=EvalConfig(steps=4, batch_size=8, max_samples=8, stability_steps=16,
                        max_converge_steps=32, probe_epochs=5, probe_batch=8, save_images=False),
        engine=EngineConfig(dtype="float64", log_level="WARNING"),
        seed=7,
        output_dir=str(tmp_path / "run"),
    )
    return config.validate()


@pytest.fixture
def tiny_dataset(tiny_config):
    data = tiny_config.data
    return synth_shapes(data.num_samples, data.height, data.width, tiny_config.seed).astype(np.float64)


@pytest.fixture
def tiny_params(rng):
    """头部已随机化的参数 (零初始化的头部会让更新恒为 0)"""
    params = UpdateRuleParams.initialize(tiny_model(), 4, 4, rng, np.float64)
    for name in ("head_w", "head_b"):
        params[name].data = rng.standard_normal(params[name].shape) * 0.1
    return params


def make_grid(params, images):
    grid = seed_cells(images.shape[0], images.shape[2], images.shape[3], params.layout, params.dtype)
    return inject_input(grid, images)
