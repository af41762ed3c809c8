import numpy as np
import pytest

from medrec.checkpoint import CheckpointError, MAGIC, load_tensors, save_tensors


class TestCheckpointFormat:
    def test_bit_exact_round_trip(self, rng, tmp_path):
        tensors = {
            "E_d": rng.standard_normal((7, 3)),
            "encoder.layer0.wq": rng.standard_normal((3, 3)) * 1e-17,
            "scalarish": np.array([np.pi]),
        }
        path = tmp_path / "model.ckpt"
        save_tensors(path, tensors, meta={"seed": 3})
        loaded, meta = load_tensors(path)
        assert meta == {"seed": 3}
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert loaded[name].shape == np.asarray(tensors[name]).shape
            assert np.array_equal(loaded[name], tensors[name])  # bit exact

    def test_deterministic_bytes(self, rng, tmp_path):
        tensors = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal(2)}
        p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
        save_tensors(p1, tensors, meta={"k": 1})
        save_tensors(p2, tensors, meta={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_prefix(self, rng, tmp_path):
        path = tmp_path / "m.ckpt"
        save_tensors(path, {"x": np.zeros(1)})
        assert path.read_bytes()[:8] == MAGIC

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "garbage.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError, match="bad magic"):
            load_tensors(path)
