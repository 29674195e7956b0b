import json

import numpy as np
import pytest

from conftest import tiny_model
from src.common.exceptions import DataFormatError
from src.models.serialization import (
    MAGIC, PARAMS_FILE, SIDECAR_FILE, bytes_to_tensors, load_params, params_to_bytes, save_params,
)
from src.models.update_rule import UpdateRuleParams


def test_container_bytes_are_deterministic(tiny_params):
    payload = params_to_bytes(tiny_params)
    assert payload.startswith(MAGIC)
    assert payload == params_to_bytes(tiny_params.copy())
    tensors = bytes_to_tensors(payload)
    assert list(tensors) == tiny_params.names()
    for name, array in tensors.items():
        np.testing.assert_array_equal(array, tiny_params[name].data)
        assert array.dtype == np.float64


def test_save_and_load_directory(tiny_params, tmp_path):
    save_params(tiny_params, tmp_path)
    sidecar = json.loads((tmp_path / SIDECAR_FILE).read_text(encoding="utf-8"))
    assert sidecar["parameter_count"] == tiny_params.count()
    assert sidecar["model"]["heads"] == 2 and (sidecar["grid_h"], sidecar["grid_w"]) == (4, 4)

    loaded = load_params(tmp_path)
    assert loaded.config == tiny_params.config
    for name in tiny_params.names():
        np.testing.assert_array_equal(loaded[name].data, tiny_params[name].data)
        assert loaded[name].requires_grad


def test_truncation_reports_byte_offset(tiny_params):
    payload = params_to_bytes(tiny_params)
    with pytest.raises(DataFormatError) as info:
        bytes_to_tensors(payload[:-7], "params.bin")
    assert info.value.offset is not None and info.value.offset < len(payload)
    with pytest.raises(DataFormatError) as info:
        bytes_to_tensors(b"NOTMAGIC" + payload[8:])
    assert info.value.offset == 0
    with pytest.raises(DataFormatError):
        bytes_to_tensors(payload + b"\x00")


def test_shape_mismatch_with_sidecar(tiny_params, tmp_path, rng):
    save_params(tiny_params, tmp_path)
    other = UpdateRuleParams.initialize(tiny_model(embed_dim=16), 4, 4, rng, np.float64)
    (tmp_path / PARAMS_FILE).write_bytes(params_to_bytes(other))
    with pytest.raises(DataFormatError):
        load_params(tmp_path)
    with pytest.raises(DataFormatError):
        load_params(tmp_path / "missing")


def test_float32_parameters_round_trip(rng, tmp_path):
    params = UpdateRuleParams.initialize(tiny_model(positional="learned"), 4, 4, rng)
    save_params(params, tmp_path)
    loaded = load_params(tmp_path)
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(loaded["pos_table"].data, params["pos_table"].data)
