import pytest

from config.config_system import (
    ConfigManager, ModelConfig, RunConfig, apply_overrides, parse_config, serialize_config,
)
from src.common.exceptions import ConfigError


def test_defaults_validate():
    config = parse_config("")
    assert config.model.embed_dim == 128 and config.model.heads == 4
    assert config.train.sigma == 0.5 and config.train.rollout_mode == "plain"
    assert config.eval.steps == 64


def test_text_round_trip(tiny_config):
    assert parse_config(serialize_config(tiny_config)) == tiny_config


def test_partial_document_keeps_defaults():
    config = parse_config("model:\n  heads: 2\ntrain:\n  sigma: 1\nseed: 3\n")
    assert config.model.heads == 2
    assert config.train.sigma == 1.0 and isinstance(config.train.sigma, float)
    assert config.seed == 3 and config.model.embed_dim == 128


def test_json_is_accepted():
    assert parse_config('{"model": {"hidden_channels": 16}}').model.hidden_channels == 16


@pytest.mark.parametrize("text", [
    "model:\n  colour: red\n",
    "extras: 1\n",
    "model:\n  heads: two\n",
    "model:\n  heads: 3\n",
    "model:\n  window_h: 4\n",
    "train:\n  sigma: 1.5\n",
    "train:\n  t_min: 9\n  t_max: 8\n",
    "train:\n  batch_size: 64\n  pool_size: 32\n",
    "data:\n  height: 30\n",
    "model:\n  depth: 2\n",
    "model: [1, 2]\n",
    "model: {heads: [\n",
    "train:\n  rollout_mode: fusion-mitosis\ndata:\n  height: 36\n  width: 36\nmodel:\n  patch_h: 4\n  patch_w: 4\n",
    "train:\n  rollout_mode: fusion-mitosis\nmodel:\n  positional: learned\n",
])
def test_invalid_documents_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_neighbourhood_must_fit_grid():
    with pytest.raises(ConfigError):
        parse_config("data:\n  height: 4\n  width: 4\nmodel:\n  window_h: 5\n  window_w: 5\n")


def test_experimental_depth_opt_in():
    config = parse_config("model:\n  depth: 2\n  experimental_depth: true\n")
    assert config.model.depth == 2


def test_overrides_are_typed(tiny_config):
    updated = apply_overrides(tiny_config, {"model.heads": "4", "train.sigma": "0.25", "seed": "11",
                                            "model.positional": "xy", "eval.sigma_list": "[0.5, 1.0]"})
    assert updated.model.heads == 4 and updated.train.sigma == 0.25 and updated.seed == 11
    assert updated.model.positional == "xy" and updated.eval.sigma_list == [0.5, 1.0]
    assert tiny_config.model.heads == 2

    for bad in ({"model.colour": "red"}, {"bogus": "1"}, {"model.heads.x": "1"}, {"train.sigma": "high"}):
        with pytest.raises(ConfigError):
            apply_overrides(tiny_config, bad)


def test_inverted_bottleneck_preset():
    model = ModelConfig.inverted_bottleneck(heads=2)
    assert (model.embed_dim, model.mlp_dim, model.heads) == (64, 256, 2)


def test_config_manager_loads_and_snapshots(tmp_path, tiny_config):
    path = tmp_path / "run.yaml"
    path.write_text(serialize_config(tiny_config), encoding="utf-8")
    manager = ConfigManager(str(path))
    assert manager.run_config == tiny_config
    with pytest.raises(ConfigError):
        ConfigManager(str(tmp_path / "missing.yaml"))
    assert ConfigManager().run_config == RunConfig().validate()
