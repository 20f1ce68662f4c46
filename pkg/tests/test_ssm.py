import numpy as np
import pytest
from hypothesis import given, strategies as st

from hgmamba import numeric
from hgmamba.autodiff import ParamStore, Tensor
from hgmamba.ssm import (DiscreteSsm, MambaBlock, SsmParams, conv_lti, discretize, kernel_lti, scan_chunked,
                         scan_recurrent, selective_scan, selective_scan_op)


def random_lti(r, D, N):
    A = -r.uniform(0.1, 2.0, size=(D, N))
    dssm = DiscreteSsm.from_continuous(A, r.normal(size=(D, N)), r.uniform(0.01, 0.5, size=(D, 1)))
    return dssm, r.normal(size=(D, N))


def loop_scan(Abar, Bbar, C, x):
    """Scalar-loop oracle of the recurrence for (L, D, N) parameters."""
    L, D = x.shape
    N = Abar.shape[-1]
    y = np.zeros((L, D))
    for d in range(D):
        h = np.zeros(N)
        for t in range(L):
            for n in range(N):
                h[n] = Abar[t, d, n] * h[n] + Bbar[t, d, n] * x[t, d]
            y[t, d] = sum(C[t, d, n] * h[n] for n in range(N))
    return y


class TestDiscretize:
    def test_closed_form(self):
        Abar, Bbar = discretize(-1.0, 1.0, np.log(2.0))
        assert abs(Abar - 0.5) < 1e-12 and abs(Bbar - 0.5) < 1e-12

    def test_zero_limit(self):
        Abar, Bbar = discretize(np.array([0.0, -1e-12]), np.array([2.0, 3.0]), 0.3)
        np.testing.assert_allclose(Abar, 1.0, atol=1e-9)
        np.testing.assert_allclose(Bbar, [0.6, 0.9], atol=1e-9)

    def test_small_step_limit(self):
        Abar, Bbar = discretize(-2.0, 1.0, 1e-9)
        assert abs(Abar - 1) < 1e-8 and abs(Bbar) < 1e-8

    @pytest.mark.parametrize("delta", [0.0, -0.1])
    def test_nonpositive_delta_is_error(self, delta):
        with pytest.raises(ValueError):
            discretize(-1.0, 1.0, delta)

    @given(st.floats(-50, -1e-3), st.floats(1e-4, 10))
    def test_stable_magnitude(self, a, delta):
        Abar, _ = discretize(a, 1.0, delta)
        assert 0 <= Abar < 1


class TestRecurrentAndConvolution:
    def test_zero_input(self, rng):
        dssm, C = random_lti(rng, 3, 4)
        np.testing.assert_array_equal(scan_recurrent(dssm, C, np.zeros((5, 3))), 0)

    def test_two_step_example(self):
        y = scan_recurrent(DiscreteSsm(np.array(0.5), np.array(1.0)), np.array(1.0), np.array([[1.0], [1.0]]))
        np.testing.assert_allclose(y[:, 0], [1.0, 1.5])

    def test_impulse_response_is_kernel(self, rng):
        dssm, C = random_lti(rng, 2, 4)
        x = np.zeros((12, 2))
        x[0] = 1
        np.testing.assert_allclose(scan_recurrent(dssm, C, x), kernel_lti(dssm.Abar, dssm.Bbar, C, 12), atol=1e-14)

    def test_kernel_examples(self):
        np.testing.assert_allclose(kernel_lti(0.5, 1.0, 1.0, 3), [1, 0.5, 0.25])
        np.testing.assert_array_equal(kernel_lti(np.full(3, 0.7), np.ones(3), np.zeros(3), 4), 0)

    def test_kernel_rejects_selective(self):
        with pytest.raises(ValueError, match="requires LTI"):
            kernel_lti(np.ones((4, 2, 3)), np.ones((4, 2, 3)), np.ones(3), 4)
        sel = DiscreteSsm(np.full((4, 2, 3), 0.5), np.ones((4, 2, 3)))
        with pytest.raises(ValueError, match="requires LTI"):
            conv_lti(sel, np.ones(3), np.ones((4, 2)))

    def test_matches_loop_oracle(self, rng):
        dssm, C = random_lti(rng, 2, 3)
        x = rng.normal(size=(7, 2))
        b = lambda v: np.broadcast_to(v, (7, 2, 3))  # noqa: E731
        np.testing.assert_allclose(scan_recurrent(dssm, C, x), loop_scan(b(dssm.Abar), b(dssm.Bbar), b(C), x),
                                   atol=1e-13)

    @given(st.integers(1, 64), st.sampled_from([1, 4, 16]), st.integers(0, 2**32 - 1))
    def test_recurrent_equals_fft(self, L, N, seed):
        r = np.random.default_rng(seed)
        dssm, C = random_lti(r, 3, N)
        x = r.normal(size=(L, 3))
        assert np.max(np.abs(scan_recurrent(dssm, C, x) - conv_lti(dssm, C, x))) < 1e-10

    @given(st.integers(1, 150), st.integers(1, 70), st.integers(0, 2**32 - 1))
    def test_chunked_equals_unchunked(self, L, chunk, seed):
        r = np.random.default_rng(seed)
        dssm, C = random_lti(r, 2, 4)
        x = r.normal(size=(L, 2))
        assert np.max(np.abs(scan_chunked(dssm, C, x, chunk) - scan_recurrent(dssm, C, x))) < 1e-10

    @given(st.integers(0, 2**32 - 1))
    def test_causality(self, seed):
        r = np.random.default_rng(seed)
        dssm, C = random_lti(r, 2, 4)
        x = r.normal(size=(20, 2))
        t = int(r.integers(1, 20))
        y0 = scan_recurrent(dssm, C, x)
        x[t] += r.normal(size=2)
        np.testing.assert_array_equal(scan_recurrent(dssm, C, x)[:t], y0[:t])

    @given(st.integers(0, 2**32 - 1))
    def test_bounded_state(self, seed):
        r = np.random.default_rng(seed)
        dssm, _ = random_lti(r, 2, 4)
        x = r.uniform(-1, 1, size=(80, 2))
        h = np.zeros((2, 4))
        bound = np.abs(dssm.Bbar) * np.abs(x).max() / (1 - np.abs(dssm.Abar))
        for t in range(80):
            h = dssm.Abar * h + dssm.Bbar * x[t][:, None]
            assert np.all(np.abs(h) <= bound + 1e-12)


def constant_params(r, D, N):
    """Selective parameters whose projections ignore the input (zero weights)."""
    A = -r.uniform(0.5, 2.0, size=(D, N))
    b_B, b_C = r.normal(size=N), r.normal(size=N)
    dt_bias = r.uniform(-2, 0, size=D)
    p = SsmParams.from_arrays(A, np.zeros((D, N)), b_B, np.zeros((D, N)), b_C, np.zeros(D), np.zeros(1), dt_bias,
                              dtype=np.float64)
    delta = np.log1p(np.exp(dt_bias))[:, None]
    return p, DiscreteSsm.from_continuous(A, b_B[None, :], delta), np.broadcast_to(b_C, (D, N))


class TestSelective:
    def test_zero_input_zero_output(self, rng, f64):
        p, _, _ = constant_params(rng, 3, 4)
        np.testing.assert_array_equal(selective_scan(p, np.zeros((6, 3))).data, 0)

    def test_constant_projections_reduce_to_lti(self, rng, f64):
        p, dssm, C = constant_params(rng, 3, 4)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(selective_scan(p, x).data, scan_recurrent(dssm, C, x), atol=1e-12)

    def test_single_step_closed_form(self, rng, f64):
        D, N = 2, 3
        u, delta = rng.normal(size=(1, 1, D)), rng.uniform(0.1, 1, size=(1, 1, D))
        A = -rng.uniform(0.5, 2, size=(D, N))
        Bm, Cm = rng.normal(size=(1, 1, N)), rng.normal(size=(1, 1, N))
        y = selective_scan_op(Tensor(u), Tensor(delta), Tensor(A), Tensor(Bm), Tensor(Cm)).data
        _, Bbar = discretize(A, Bm[0, 0], delta[0, 0][:, None])
        np.testing.assert_allclose(y[0, 0], (Bbar * Cm[0, 0]).sum(-1) * u[0, 0], rtol=1e-12)

    def test_fused_scan_matches_loop_oracle(self, rng, f64):
        B, L, D, N = 2, 9, 3, 4
        u, delta = rng.normal(size=(B, L, D)), rng.uniform(0.01, 0.5, size=(B, L, D))
        A = -rng.uniform(0.5, 3, size=(D, N))
        Bm, Cm = rng.normal(size=(B, L, N)), rng.normal(size=(B, L, N))
        y = selective_scan_op(Tensor(u), Tensor(delta), Tensor(A), Tensor(Bm), Tensor(Cm), chunk=4).data
        for b in range(B):
            Abar, Bbar = discretize(A[None], Bm[b][:, None, :], delta[b][..., None])
            C = np.broadcast_to(Cm[b][:, None, :], (L, D, N))
            np.testing.assert_allclose(y[b], loop_scan(Abar, Bbar, C, u[b]), atol=1e-12)

    def test_selectivity(self, rng, f64):
        """Input-dependent step sizes give responses no single LTI kernel fits."""
        D, N = 1, 4
        A = -np.arange(1.0, N + 1)[None]
        p = SsmParams.from_arrays(A, rng.normal(size=(D, N)), np.ones(N), rng.normal(size=(D, N)), np.ones(N),
                                  np.array([3.0]), np.zeros(1), np.zeros(D), dtype=np.float64)
        L = 24
        x1 = np.zeros((L, 1))
        x1[0] = 1.0
        x2 = 3.0 * x1
        y1, y2 = selective_scan(p, x1).data, selective_scan(p, x2).data
        # any LTI system is linear: y(3x) = 3 y(x)
        assert np.max(np.abs(y2 - 3 * y1)) > 1e-3

    def test_shape_errors(self):
        t = lambda *s: Tensor(np.ones(s))  # noqa: E731
        with pytest.raises(numeric.DimensionError):
            selective_scan_op(t(1, 4, 2), t(1, 4, 3), t(2, 3), t(1, 4, 3), t(1, 4, 3))
        with pytest.raises(numeric.DimensionError):
            selective_scan_op(t(1, 4, 2), t(1, 4, 2), t(2, 3), t(1, 4, 5), t(1, 4, 3))


class TestMambaBlock:
    def make(self, rng, dim=8):
        store = ParamStore(np.float64)
        return store, MambaBlock(store, "m", dim, 2, 4, rng)

    def test_shape(self, rng, f64):
        _, blk = self.make(rng)
        assert blk(rng.normal(size=(2, 11, 8))).shape == (2, 11, 8)

    def test_zero_out_projection_is_identity(self, rng, f64):
        _, blk = self.make(rng)
        blk.W_out.weight.data[:] = 0
        blk.W_out.bias.data[:] = 0
        X = rng.normal(size=(2, 5, 8))
        np.testing.assert_array_equal(blk(X).data, X)

    def test_palindrome_with_tied_directions(self, rng, f64):
        store, blk = self.make(rng)
        for fwd, bwd in (("W_f1", "W_b1"), ("W_f2", "W_b2")):
            for part in ("weight", "bias"):
                getattr(getattr(blk, bwd), part).data[:] = getattr(getattr(blk, fwd), part).data
        for name in ("A_log", "dt_bias"):
            getattr(blk.ssm_b, name).data[:] = getattr(blk.ssm_f, name).data
        for name in ("B_proj", "C_proj", "dt_proj"):
            for part in ("weight", "bias"):
                getattr(getattr(blk.ssm_b, name), part).data[:] = getattr(getattr(blk.ssm_f, name), part).data
        half = rng.normal(size=(1, 4, 8))
        X = np.concatenate([half, half[:, ::-1]], axis=1)
        _, X_f, X_b = blk.pathways(Tensor(X))
        np.testing.assert_allclose(X_f.data, X_b.data[:, ::-1], atol=1e-12)

    def test_causal_forward_pathway(self, rng, f64):
        _, blk = self.make(rng)
        X = rng.normal(size=(1, 10, 8))
        f0 = blk.pathways(Tensor(X))[1].data
        X[0, 6] += 1.0
        f1 = blk.pathways(Tensor(X))[1].data
        np.testing.assert_array_equal(f0[:, :6], f1[:, :6])
        assert not np.allclose(f0[:, 6:], f1[:, 6:])

    def test_wrong_width(self, rng, f64):
        _, blk = self.make(rng)
        with pytest.raises(numeric.DimensionError):
            blk(np.zeros((1, 3, 7)))

    def test_initialization(self, rng, f64):
        _, blk = self.make(rng)
        np.testing.assert_allclose(blk.ssm_f.A.data, -np.tile(np.arange(1.0, 5.0), (16, 1)), rtol=1e-15)
        dt = np.log1p(np.exp(blk.ssm_f.dt_bias.data))
        assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 0.1 + 1e-12))
