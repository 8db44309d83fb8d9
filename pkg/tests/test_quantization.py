import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jetforge import bitlinear as B
from jetforge import model as M
from jetforge import quantization as Q
from jetforge import tensor as T
from jetforge.tensor import Tensor

finite = st.floats(-100, 100, allow_nan=False)


class TestWeightQuant:
    def test_hand_example(self):
        alpha, beta, signs, w = B.weight_quant([[1.0, -2.0], [-1.0, 2.0]])
        assert alpha == 0.0 and beta == 1.5
        np.testing.assert_array_equal(signs, [[1, -1], [-1, 1]])
        np.testing.assert_array_equal(w, [[1.5, -1.5], [-1.5, 1.5]])

    def test_sign_of_zero_is_positive(self):
        _, _, signs, _ = B.weight_quant([[1.0, 1.0], [1.0, 1.0]])
        assert (signs == 1).all()

    def test_beta_uses_uncentred_weights(self):
        alpha, beta, _, _ = B.weight_quant([[3.0, 1.0]])
        assert alpha == 2.0 and beta == 2.0

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_codomain(self, w):
        alpha, beta, signs, deq = B.weight_quant(w)
        assert set(np.unique(signs)) <= {-1, 1}
        np.testing.assert_allclose(np.abs(deq), beta)
        assert beta == pytest.approx(np.abs(w).mean())


class TestAbsmax:
    def test_hand_example(self):
        x_q, x_deq = B.absmax_quant([0.0, 1.0, -2.0])
        np.testing.assert_array_equal(x_q, [0.0, 64.0, -127.0])
        np.testing.assert_allclose(x_deq, np.array([0.0, 64.0, -127.0]) / 63.5)

    def test_zero_tensor(self):
        x_q, x_deq = B.absmax_quant(np.zeros(4))
        assert not x_q.any() and not x_deq.any()

    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
    def test_dequantization_bound(self, x):
        x_q, x_deq = B.absmax_quant(x)
        assert np.abs(x_q).max() <= 127
        np.testing.assert_array_equal(x_q, np.round(x_q))
        peak = np.abs(x).max()
        assert np.abs(x - x_deq).max() <= peak / 254 * (1 + 1e-12) + 1e-300


class TestBitLinear:
    def test_forward_uses_quantized_operands(self, rng):
        w, x = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        out = B.bitlinear_forward(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        _, _, _, w_q = B.weight_quant(w)
        _, x_q = B.absmax_quant(x)
        np.testing.assert_allclose(out.data, x_q @ w_q.T)

    def test_ste_gradient_reaches_latent_weights(self, rng):
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        out = B.bitlinear_forward(x, w)
        T.sum(out).backward()
        _, x_q = B.absmax_quant(x.data)
        _, _, _, w_q = B.weight_quant(w.data)
        np.testing.assert_allclose(w.grad, np.ones((3, 2)) @ x_q)
        np.testing.assert_allclose(x.grad, np.ones((2, 3)) @ w_q)

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
    def test_pack_roundtrip(self, r, c, seed):
        signs = np.where(np.random.default_rng(seed).random((r, c)) < 0.5, -1, 1).astype(np.int8)
        buf = B.pack_signs(signs)
        assert len(buf) == (r * c + 7) // 8
        np.testing.assert_array_equal(B.unpack_signs(buf, (r, c)), signs)

    def test_bit_order_lsb_first(self):
        assert B.pack_signs(np.array([1, -1, -1, -1, -1, -1, -1, -1, -1, 1])) == bytes([0b00000001, 0b00000010])


class TestModelQuantization:
    def test_bitlinear_layers_are_attention_and_ffn(self):
        state = M.build(M.ModelConfig(2, 8, 2, quantized=True))
        names = Q.bitlinear_layers(state)
        assert len(names) == 2 * 6
        assert "embed.weight" not in names and "head.weight" not in names

    @pytest.mark.parametrize("particles", [8, 16, 32])
    def test_packed_size_reduction(self, particles):
        rep = Q.size_report(M.ModelConfig(3, 64, 2, num_particles=particles))
        assert rep["reduction_pct"] >= 80.0

    def test_quantized_forward_is_finite(self, rng):
        state = M.build(M.ModelConfig(2, 8, 2, quantized=True))
        out = M.forward(state, rng.normal(size=(4, 8, 3)))
        assert np.isfinite(out.data).all()

    def test_qat_reduces_loss(self, small_split):
        train, val = small_split
        from dataclasses import replace

        cfg = replace(Q.QAT_CONFIG, epochs=3)
        state, history = Q.quantize_model(M.ModelConfig(1, 8, 2), train, val, 0, cfg)
        assert state.config.quantized
        assert history[-1]["train_loss"] < history[0]["train_loss"]
