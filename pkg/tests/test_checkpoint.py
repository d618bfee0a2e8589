"""Binary checkpoint format: bit-exact round-trips and strict validation."""

import numpy as np
import pytest

from fbdet.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from fbdet.detector import build_model
from fbdet.feedback import IffConfig
from fbdet.tensor import PaddingMode


@pytest.fixture
def model():
    return build_model(17)


class TestRoundTrip:
    def test_bit_exact_parameters(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        cfg = IffConfig(iterations=2, leak=0.07, pad=PaddingMode.CIRCULAR)
        meta = {"seed": 17, "epochs": 3, "final_loss": 0.123456789012345678}
        save_checkpoint(path, model, cfg, meta)
        loaded, cfg2, meta2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert meta2["seed"] == 17
        assert meta2["final_loss"] == meta["final_loss"]
        for name in model.params.names():
            a, b = model.params[name], loaded.params[name]
            assert a.dtype == b.dtype == np.float64
            assert np.array_equal(a, b)
            assert a.tobytes() == b.tobytes()

    def test_save_is_deterministic(self, model, tmp_path):
        cfg = IffConfig()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model, cfg, {"seed": 1})
        save_checkpoint(p2, model, cfg, {"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()


class TestValidation:
    def test_bad_magic_rejected(self, model, tmp_path):
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, model, IffConfig(), {})
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, model, tmp_path):
        path = tmp_path / "v9.ckpt"
        save_checkpoint(path, model, IffConfig(), {})
        raw = bytearray(path.read_bytes())
        raw[len(MAGIC)] = 99  # bump the little-endian version field
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated_rejected(self, model, tmp_path):
        path = tmp_path / "trunc.ckpt"
        save_checkpoint(path, model, IffConfig(), {})
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
