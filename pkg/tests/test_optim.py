import numpy as np
import pytest

from formulanet.autograd import ShapeMismatch
from formulanet.checkpoint import CheckpointError, MAGIC, load_arrays, save_arrays
from formulanet.optim import OptimizerState, rmsprop_step


class TestRMSProp:
    def test_zero_gradient_no_decay(self):
        theta = np.array([1.0, -2.0])
        rmsprop_step({"w": theta}, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0))
        np.testing.assert_array_equal(theta, [1.0, -2.0])

    def test_single_step_closed_form(self):
        # acc = 0.1 * 1**2, so the step is lr / (sqrt(0.1) + eps)
        lr, eps = 1e-3, 1e-8
        theta = np.zeros(3)
        rmsprop_step({"w": theta}, {"w": np.ones(3)}, OptimizerState(lr=lr, eps=eps, weight_decay=0.0))
        np.testing.assert_allclose(theta, -lr / (np.sqrt(0.1) + eps), rtol=1e-14)

    def test_two_steps_by_hand(self):
        lr, rho, eps = 0.01, 0.9, 1e-8
        theta = np.array([0.5])
        state = OptimizerState(lr=lr, rho=rho, eps=eps, weight_decay=0.0)
        g1, g2 = 2.0, -1.0
        rmsprop_step({"w": theta}, {"w": np.array([g1])}, state)
        rmsprop_step({"w": theta}, {"w": np.array([g2])}, state)
        acc1 = (1 - rho) * g1**2
        acc2 = rho * acc1 + (1 - rho) * g2**2
        want = 0.5 - lr * g1 / (np.sqrt(acc1) + eps) - lr * g2 / (np.sqrt(acc2) + eps)
        np.testing.assert_allclose(theta, [want], rtol=1e-14)
        assert state.step == 2

    def test_weight_decay_shrinks(self):
        theta = np.array([3.0, -4.0])
        before = np.abs(theta).copy()
        rmsprop_step({"w": theta}, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.1))
        assert (np.abs(theta) < before).all()

    def test_float32_stays_float32(self):
        theta = np.ones(2, dtype=np.float32)
        rmsprop_step({"w": theta}, {"w": np.ones(2, dtype=np.float32)}, OptimizerState())
        assert theta.dtype == np.float32

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            rmsprop_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState())

    def test_non_positive_lr(self):
        with pytest.raises(ValueError):
            OptimizerState(lr=0.0)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        arrays = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.array([1.5, -2.25]),
            "c": np.array([3, 4], dtype=np.int64),
            "empty": np.zeros((0, 4), dtype=np.float32),
        }
        path = tmp_path / "x.fnet"
        save_arrays(path, arrays, {"note": "hi", "n": 3})
        got, meta = load_arrays(path)
        assert meta["note"] == "hi" and meta["n"] == 3
        assert set(got) == set(arrays)
        for k, v in arrays.items():
            assert got[k].dtype == v.dtype
            np.testing.assert_array_equal(got[k], v)

    def test_starts_with_magic(self, tmp_path):
        path = tmp_path / "x.fnet"
        save_arrays(path, {"a": np.zeros(1)})
        assert path.read_bytes().startswith(MAGIC)

    def test_deterministic_bytes(self, tmp_path):
        arrays = {"b": np.ones(3), "a": np.zeros((2, 2), dtype=np.float32)}
        save_arrays(tmp_path / "1", arrays, {"k": 1})
        save_arrays(tmp_path / "2", arrays, {"k": 1})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_arrays(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.fnet"
        save_arrays(path, {"a": np.ones(100)})
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            load_arrays(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_arrays(tmp_path / "x", {"a": np.ones(2, dtype=np.complex64)})
