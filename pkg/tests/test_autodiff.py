import numpy as np
import pytest

from hgmamba import gradsuite, numeric
from hgmamba.autodiff import (ParamStore, Tape, Tensor, adamw_step, gradcheck, load_checkpoint, lr_schedule,
                              ops, read_checkpoint, save_checkpoint)
from hgmamba.autodiff.checkpoint import CheckpointError
from hgmamba.autodiff.gradcheck import relative_error


def grad_of(fn, *tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [t.grad for t in tensors]


class TestBackward:
    def test_sum_of_squares(self, f64):
        w = Tensor(np.array([1.0, 2.0]))
        (g,) = grad_of(lambda: ops.sum(ops.mul(w, w)), w)
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_unused_parameter_gets_no_gradient(self, f64):
        w, p = Tensor(np.ones(3)), Tensor(np.ones(2))
        gw, gp = grad_of(lambda: ops.sum(w), w, p)
        assert gp is None or np.all(gp == 0)

    def test_non_scalar_loss_is_error(self, f64):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = ops.mul(w, 2.0)
        with pytest.raises(numeric.DimensionError):
            tape.backward(out)

    def test_shared_input_accumulates(self, f64):
        x = Tensor(np.array([3.0]))
        (g,) = grad_of(lambda: ops.sum(ops.add(ops.mul(x, x), ops.mul(x, 4.0))), x)
        np.testing.assert_allclose(g, [10.0])

    def test_broadcast_gradient_reduced(self, f64):
        a, b = Tensor(np.ones((3, 4))), Tensor(np.ones(4))
        _, gb = grad_of(lambda: ops.sum(ops.add(a, b)), a, b)
        np.testing.assert_array_equal(gb, np.full(4, 3.0))

    def test_no_tape_records_nothing(self, f64):
        w = Tensor(np.ones(2), requires_grad=True)
        assert not ops.mul(w, w).requires_grad


class TestGradcheck:
    @pytest.mark.parametrize("name", list(gradsuite.op_cases(0)))
    def test_every_op(self, name, f64):
        fn, tensors = gradsuite.op_cases(0)[name]()
        r = gradcheck(fn, tensors, n_coords=100, seed=0, name=name)
        assert r.passed, r

    def test_detects_wrong_gradient(self, f64):
        from hgmamba.autodiff import make_result

        def bad_square(x):
            return make_result("bad", (x,), x.data ** 2, lambda g: (g * 3 * x.data,))

        x = Tensor(np.array([0.7, -1.2]))
        r = gradcheck(lambda: ops.sum(bad_square(x)), [x], n_coords=2)
        assert not r.passed and r.failures == 2

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
        assert relative_error(1.0, 1.0) == 0.0

    def test_tiny_model_j5(self, f64):
        cfg = gradsuite.ModelConfig(depth=2, dim=8, frames=4, joints=5, seed=0)
        fn, params = gradsuite.model_case(0, cfg, gradsuite.toy_skeleton(), True)
        r = gradcheck(fn, params, n_coords=100, seed=0)
        assert r.passed, r


class TestAdamW:
    def _store(self, value, grad):
        store = ParamStore(np.float64)
        p = store.add("w", np.array([value]))
        p.grad = None if grad is None else np.array([grad])
        return store, p

    def test_zero_grad_zero_decay_unchanged(self):
        store, p = self._store(1.5, 0.0)
        adamw_step(store, 0.1, weight_decay=0.0)
        assert p.data[0] == 1.5 and store.step == 1 and p.grad is None

    def test_first_step_moves_by_lr(self):
        store, p = self._store(1.0, 1.0)
        adamw_step(store, 0.1, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_decoupled_decay(self):
        store, p = self._store(2.0, 0.0)
        adamw_step(store, 0.1, weight_decay=0.01)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.001), rel=1e-12)

    def test_nan_gradient_aborts_and_names_parameter(self):
        store, p = self._store(1.0, np.nan)
        with pytest.raises(numeric.NumericError, match="'w'"):
            adamw_step(store, 0.1)
        assert store.step == 0 and p.data[0] == 1.0

    def test_lr_schedule(self):
        assert lr_schedule(0) == 5e-4
        assert lr_schedule(1) == pytest.approx(4.95e-4, rel=1e-12)
        assert lr_schedule(90) == pytest.approx(5e-4 * 0.99**90, rel=1e-12)
        with pytest.raises(ValueError):
            lr_schedule(-1)


class TestCheckpoint:
    def _store(self):
        rng = np.random.default_rng(0)
        store = ParamStore(np.float32)
        store.add("a", rng.normal(size=(3, 2)))
        store.add("b", rng.normal(size=4))
        bn = store.add_batchnorm("bn", 4)
        bn.mean[:] = 1.5
        for p in store:
            p.grad = rng.normal(size=p.shape)
        adamw_step(store, 0.01)
        return store

    def test_round_trip(self, tmp_path):
        src = self._store()
        save_checkpoint(tmp_path / "c.hgm", src, {"epoch": 3})
        dst = ParamStore(np.float32)
        dst.add("a", np.zeros((3, 2)))
        dst.add("b", np.zeros(4))
        dst.add_batchnorm("bn", 4)
        meta = load_checkpoint(tmp_path / "c.hgm", dst)
        assert meta == {"epoch": 3} and dst.step == 1
        for name in ("a", "b"):
            np.testing.assert_array_equal(dst[name].data, src[name].data)
            np.testing.assert_array_equal(dst[name].m, src[name].m)
            np.testing.assert_array_equal(dst[name].v, src[name].v)
        np.testing.assert_array_equal(dst.bn_stats["bn"].mean, np.full(4, 1.5))
        assert (tmp_path / "c.hgm").read_bytes()[:4] == b"HGM1"

    def test_corrupt_files(self, tmp_path):
        save_checkpoint(tmp_path / "c.hgm", self._store())
        raw = (tmp_path / "c.hgm").read_bytes()
        (tmp_path / "bad.hgm").write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(tmp_path / "bad.hgm")
        (tmp_path / "short.hgm").write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(tmp_path / "short.hgm")

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.hgm", self._store())
        dst = ParamStore(np.float32)
        dst.add("a", np.zeros((2, 3)))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(tmp_path / "c.hgm", dst)
