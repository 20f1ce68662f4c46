import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hgmamba import H36M, numeric
from hgmamba.autodiff import ParamStore, Tensor
from hgmamba.layers import Linear
from hgmamba.model import (PRESETS, TABLE1_PARAMS, HGMamba, HgmBlock, ModelConfig, adaptive_fusion,
                           horizontal_flip, loss, parameter_table, position_loss_terms, preset,
                           shuffle_probability, shuffled_mamba_stream)

TINY = dict(depth=2, dim=8, frames=4, seed=3)


@pytest.fixture
def tiny(f64):
    return HGMamba(ModelConfig(**TINY), dtype=np.float64)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(depth=0), dict(dim=7), dict(dim=6), dict(frames=0), dict(shuffle_p=1.5),
                                     dict(velocity_weight=-1), dict(scan_modes=("xy",))])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_json_round_trip(self):
        cfg = preset("xs", seed=9)
        assert ModelConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"depth": 2, "wings": 3})

    def test_table1_presets(self):
        assert (PRESETS["xs"]["depth"], PRESETS["xs"]["dim"], PRESETS["xs"]["frames"]) == (12, 64, 27)
        assert (PRESETS["s"]["depth"], PRESETS["s"]["dim"], PRESETS["s"]["frames"]) == (26, 64, 81)
        assert (PRESETS["b"]["depth"], PRESETS["b"]["dim"], PRESETS["b"]["frames"]) == (16, 128, 243)
        tiny = preset("tiny")
        assert (tiny.depth, tiny.dim, tiny.frames, tiny.head_dim) == (2, 32, 9, 512)

    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.velocity_weight == 20.0 and cfg.shuffle_p == 0.5 and cfg.expand == 2 and cfg.d_state == 16


class TestShuffle:
    def test_probability(self):
        assert shuffle_probability(8, 8, 0.3) == pytest.approx(0.3)
        assert shuffle_probability(4, 8, 0.3) == pytest.approx(0.15)
        with pytest.raises(ValueError):
            shuffle_probability(0, 8, 0.3)
        with pytest.raises(ValueError):
            shuffle_probability(9, 8, 0.3)

    @given(st.integers(0, 2**32 - 1), st.sampled_from(["st", "ts"]))
    def test_identity_block_round_trip(self, seed, mode):
        r = np.random.default_rng(seed)
        X = r.normal(size=(3, 4, 17, 2))
        out = shuffled_mamba_stream(X, lambda x: x, mode, 1.0, True, r)
        assert np.array_equal(out.data, X)

    def test_block_sees_permuted_joints(self, rng):
        X = rng.normal(size=(2, 3, 17, 2))
        seen = []
        shuffled_mamba_stream(X, lambda x: seen.append(x.data) or x, "st", 1.0, True, rng)
        assert not np.array_equal(seen[0], X.reshape(2, 51, 2))
        np.testing.assert_array_equal(np.sort(seen[0], axis=1), np.sort(X.reshape(2, 51, 2), axis=1))

    def test_scan_orders(self):
        X = np.arange(2 * 3 * 1).reshape(1, 2, 3, 1).astype(float)
        seen = {}
        for mode in ("st", "ts"):
            shuffled_mamba_stream(X, lambda x, m=mode: seen.setdefault(m, x.data) is None or x, mode, 0.0, False,
                                  None)
        np.testing.assert_array_equal(seen["st"][0, :, 0], [0, 1, 2, 3, 4, 5])
        np.testing.assert_array_equal(seen["ts"][0, :, 0], [0, 3, 1, 4, 2, 5])

    def test_inference_equals_untrained_shuffle_zero(self, f64):
        x = np.random.default_rng(0).normal(size=(2, 4, 17, 2)) * 0.3
        m_inf = HGMamba(ModelConfig(**TINY), dtype=np.float64)
        m_p0 = HGMamba(ModelConfig(**{**TINY, "shuffle_p": 0.0}), dtype=np.float64)
        # training mode updates batch-norm statistics but normalizes with batch statistics, so
        # compare the streams the shuffle touches: the Mamba stream of every block
        X = m_inf.embed(x)
        for b_inf, b_p0 in zip(m_inf.blocks, m_p0.blocks):
            a = b_inf.mamba_stream(X, False, None).data
            b = b_p0.mamba_stream(X, True, np.random.default_rng(1)).data
            assert np.array_equal(a, b)


class TestFusion:
    def make(self, rng):
        return Linear(ParamStore(np.float64), "f", 8, 2, rng)

    def test_gates_sum_to_one(self, rng, f64):
        lin = self.make(rng)
        _, alpha = adaptive_fusion(Tensor(rng.normal(size=(2, 3, 5, 4)) * 10), Tensor(rng.normal(size=(2, 3, 5, 4))),
                                   lin)
        assert np.max(np.abs(alpha.data.sum(-1) - 1)) <= 1e-6

    def test_zero_weights_give_mean(self, rng, f64):
        lin = self.make(rng)
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        out, alpha = adaptive_fusion(Tensor(a), Tensor(b), lin)
        np.testing.assert_array_equal(alpha.data, 0.5)
        np.testing.assert_array_equal(out.data, 0.5 * a + 0.5 * b)

    def test_equal_streams(self, rng, f64):
        a = rng.normal(size=(2, 3, 4))
        out, _ = adaptive_fusion(Tensor(a), Tensor(a), self.make(rng))
        np.testing.assert_allclose(out.data, a, rtol=1e-14)


class TestModel:
    def test_embed(self, tiny):
        x = np.zeros((4, 17, 2))
        tiny.pos_embed.data[:] = 0
        tiny.embed_proj.bias.data[:] = 0
        np.testing.assert_array_equal(tiny.embed(x).data, 0)

    def test_embed_distinguishes_positions(self, tiny):
        out = tiny.embed(np.ones((4, 17, 2))).data
        assert out.shape == (4, 17, 8)
        assert not np.array_equal(out[0, 0], out[1, 3])

    def test_embed_errors(self, tiny):
        with pytest.raises(numeric.DimensionError):
            tiny.embed(np.zeros((5, 17, 2)))
        with pytest.raises(numeric.DimensionError):
            tiny.embed(np.zeros((4, 16, 2)))
        with pytest.raises(numeric.NumericError):
            tiny.embed(np.full((4, 17, 2), np.nan))

    def test_shorter_sequence_uses_prefix(self, tiny):
        x = np.random.default_rng(0).normal(size=(1, 3, 17, 2))
        assert tiny.forward(x).shape == (1, 3, 17, 3)

    def test_forward_shape_and_determinism(self, tiny):
        x = np.random.default_rng(0).normal(size=(2, 4, 17, 2)) * 0.3
        a, b = tiny.forward(x).data, tiny.forward(x).data
        assert a.shape == (2, 4, 17, 3) and np.array_equal(a, b)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_block(self, tiny):
        tiny.blocks[1].fusion.weight.data[:] = np.inf
        with pytest.raises(numeric.NumericError, match="block 1"):
            tiny.forward(np.zeros((1, 4, 17, 2)))

    def test_training_shuffle_reproducible_per_step(self, f64):
        m = HGMamba(ModelConfig(**{**TINY, "shuffle_p": 1.0}), dtype=np.float64)
        x = np.random.default_rng(0).normal(size=(2, 4, 17, 2)) * 0.3
        states = [{k: s.mean.copy() for k, s in m.store.bn_stats.items()}]

        def run(step):
            for k, s in m.store.bn_stats.items():
                s.mean, s.var = states[0][k].copy(), np.ones_like(s.var)
            return m.forward(x, training=True, step=step).data

        assert np.array_equal(run(5), run(5))
        assert not np.array_equal(run(5), run(6))

    def test_flip_test_prediction(self, tiny):
        x = np.random.default_rng(0).normal(size=(2, 4, 17, 2)) * 0.3
        plain = tiny.predict(x)
        flipped = tiny.predict(x, flip_test=True)
        manual = 0.5 * (plain + horizontal_flip(tiny.predict(horizontal_flip(x)), H36M))
        np.testing.assert_allclose(flipped, manual, atol=1e-9)
        assert not np.allclose(flipped, plain)

    def test_block_output_shape(self, f64, rng):
        cfg = ModelConfig(**TINY)
        blk = HgmBlock(ParamStore(np.float64), "b", 1, cfg, H36M, rng)
        assert blk(rng.normal(size=(2, 4, 17, 8))).shape == (2, 4, 17, 8)


class TestLoss:
    def test_zero_when_equal(self, rng):
        p = rng.normal(size=(2, 3, 4, 3))
        assert float(loss(Tensor(p), p).data) == 0

    def test_hand_example(self):
        pred = Tensor(np.zeros((1, 1, 3)))
        gt = np.array([[[3.0, 0.0, 4.0]]])
        l3d, lv = position_loss_terms(pred, gt)
        assert float(l3d.data) == 5 and float(lv.data) == 0
        assert float(loss(pred, gt, 20.0).data) == 5

    def test_velocity_offset_invariant(self, rng, f64):
        gt = rng.normal(size=(2, 5, 4, 3))
        pred = gt + rng.normal(size=gt.shape)
        _, lv0 = position_loss_terms(Tensor(pred), gt)
        _, lv1 = position_loss_terms(Tensor(pred + np.array([7.0, -3.0, 2.0])), gt)
        np.testing.assert_allclose(lv1.data, lv0.data, rtol=1e-12)
        _, lv_const = position_loss_terms(Tensor(gt + 5.0), gt)
        np.testing.assert_array_equal(lv_const.data, 0)

    def test_matches_loop_oracle(self, rng, f64):
        gt = rng.normal(size=(3, 4, 5, 3))
        pred = rng.normal(size=gt.shape)
        total = 0.0
        for b in range(3):
            for t in range(4):
                for j in range(5):
                    total += np.linalg.norm(gt[b, t, j] - pred[b, t, j])
                    if t:
                        total += 20 * np.linalg.norm((gt[b, t, j] - gt[b, t - 1, j]) - (pred[b, t, j] - pred[b, t - 1, j]))
        assert float(loss(Tensor(pred), gt, 20.0).data) == pytest.approx(total / 3, rel=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        with numeric.precision("f64"):
            assert float(loss(Tensor(r.normal(size=(2, 3, 4, 3))), r.normal(size=(2, 3, 4, 3))).data) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(numeric.DimensionError):
            loss(Tensor(np.zeros((2, 3, 3))), np.zeros((2, 4, 3)))


class TestFlip:
    def test_involution(self, rng):
        P = rng.normal(size=(3, 17, 2))
        np.testing.assert_allclose(horizontal_flip(horizontal_flip(P)), P, atol=1e-12)

    def test_symmetric_pose_is_fixed_point(self, rng):
        P = np.zeros((17, 3))
        P[:, 1:] = rng.normal(size=(17, 2))
        for a, b in H36M.flip_pairs:
            P[b] = P[a] * [-1, 1, 1]
            P[b, 1:] = P[a, 1:]
        P[[0, 1, 2, 3, 4], 0] = 0
        np.testing.assert_allclose(horizontal_flip(P), P, atol=1e-12)

    def test_mirrors_about_root(self):
        P = np.zeros((17, 2))
        P[0] = [0.3, 0.1]
        P[5] = [0.5, 0.2]
        out = horizontal_flip(P)
        np.testing.assert_allclose(out[8], [0.1, 0.2])

    def test_unpaired_lateral_joint(self):
        from dataclasses import replace
        skel = replace(H36M, flip_pairs=H36M.flip_pairs[1:])
        with pytest.raises(ValueError, match="right_hip"):
            horizontal_flip(np.zeros((17, 2)), skel)


class TestParameters:
    @pytest.mark.parametrize("name", ["xs", "s", "b"])
    def test_within_fifteen_percent(self, name):
        from hgmamba.model import HGMamba as M
        n = M(preset(name), dtype=np.float32).num_parameters()
        assert abs(n / TABLE1_PARAMS[name] - 1) <= 0.15

    def test_table_sums_to_total(self, tiny):
        assert sum(c for _, c in parameter_table(tiny)) == tiny.num_parameters()
