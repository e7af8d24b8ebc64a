import struct
from dataclasses import replace

import numpy as np
import pytest

from utils.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from utils.config import Variant
from utils.errors import ValidationError
from utils.tafnet import build_tafnet, forward
from utils.tensor_core import Tensor


@pytest.fixture
def trained_looking_model(small_model_config, rng):
    """A model whose parameters no longer match any fresh build"""
    model = build_tafnet(replace(small_model_config, gate_init=0.25), seed=6)
    for param in model:
        param.data = param.data + rng.normal(scale=1e-3, size=param.shape)
    return model


class TestRoundTrip:
    def test_parameters_bit_exact(self, trained_looking_model, tmp_path):
        path = save_checkpoint(trained_looking_model, tmp_path / "model.ckpt")
        loaded = load_checkpoint(path)
        assert loaded.names() == trained_looking_model.names()
        for name in loaded.names():
            np.testing.assert_array_equal(loaded[name].data, trained_looking_model[name].data)

    def test_config_restored(self, trained_looking_model, tmp_path):
        loaded = load_checkpoint(save_checkpoint(trained_looking_model, tmp_path / "model.ckpt"))
        assert loaded.config == trained_looking_model.config

    @pytest.mark.parametrize("variant", list(Variant))
    def test_every_variant(self, small_model_config, tmp_path, variant):
        model = build_tafnet(replace(small_model_config, variant=variant))
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / f"{variant.value}.ckpt"))
        assert loaded.config.variant is variant
        assert len(loaded) == len(model)

    def test_predictions_identical(self, trained_looking_model, tmp_path, rng):
        loaded = load_checkpoint(save_checkpoint(trained_looking_model, tmp_path / "model.ckpt"))
        rgb, thermal = Tensor(rng.normal(size=(2, 3, 32, 32))), Tensor(rng.normal(size=(2, 1, 32, 32)))
        np.testing.assert_array_equal(
            forward(rgb, thermal, loaded).data, forward(rgb, thermal, trained_looking_model).data
        )

    def test_creates_parent_directories(self, small_model_config, tmp_path):
        path = save_checkpoint(build_tafnet(small_model_config), tmp_path / "runs" / "a" / "best.ckpt")
        assert path.is_file()


class TestCorruptFiles:
    @pytest.fixture
    def payload(self, small_model_config, tmp_path):
        return save_checkpoint(build_tafnet(small_model_config), tmp_path / "model.ckpt").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_wrong_magic(self, payload, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + payload[len(MAGIC):])
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_unsupported_version(self, payload, tmp_path):
        path = tmp_path / "future.ckpt"
        path.write_bytes(MAGIC + struct.pack("<I", 99) + payload[len(MAGIC) + 4:])
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_truncated(self, payload, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_bytes(payload[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, payload, tmp_path):
        path = tmp_path / "long.ckpt"
        path.write_bytes(payload + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_dims_larger_than_file(self, payload, tmp_path):
        # 2**31 in every dim of the first tensor; the element count overflows 64 bits
        text_end = 16 + struct.unpack_from("<I", payload, 12)[0]
        name_length = struct.unpack_from("<I", payload, text_end + 4)[0]
        ndim_at = text_end + 8 + name_length
        ndim = struct.unpack_from("<I", payload, ndim_at)[0]
        dims = struct.pack(f"<{ndim}I", *[2 ** 31] * ndim)
        path = tmp_path / "huge.ckpt"
        path.write_bytes(payload[:ndim_at + 4] + dims + payload[ndim_at + 4 + 4 * ndim:])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_errors_are_validation_errors(self, tmp_path):
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "absent.ckpt")
