import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from waveformer import ops
from waveformer.model import ModelConfig, WaveFormer
from waveformer.quant import (QuantizedTensor, int8_kernel_name, is_quantizable,
                              quantize_activation, quantize_model, quantize_tensor,
                              round_half_away)
from waveformer.tensor import Tensor


def tiny(**kw):
    base = dict(channels=2, window=8, patch=4, embed_dim=8, levels=1, layers=1, heads=2,
                ffn_dim=16, num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


class TestWeightQuantization:
    def test_zero_tensor(self):
        q = quantize_tensor(np.zeros((3, 2)))
        np.testing.assert_array_equal(q.payload, 0)
        assert q.scale == pytest.approx(1e-12)

    def test_hand_example(self):
        q = quantize_tensor(np.array([-1.0, 0.5, 1.0]))
        assert q.scale == pytest.approx(1 / 127, rel=1e-7)
        np.testing.assert_array_equal(q.payload, [-127, 64, 127])
        assert q.payload.dtype == np.int8

    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away(np.array([-2.5, -0.5, 0.5, 1.5, 2.4])),
                                      [-3, -1, 1, 2, 2])

    def test_scale_is_float32_exact(self, rng):
        q = quantize_tensor(rng.standard_normal(10))
        assert float(np.float32(q.scale)) == q.scale

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-100, 100, width=32)))
    def test_roundtrip_error_bound(self, w):
        q = quantize_tensor(w)
        amax = float(np.abs(w).max())
        err = np.abs(q.dequantize().astype(np.float64) - w).max()
        assert err <= amax / 254 + 2 * np.spacing(np.float32(max(amax, 1e-30)))


class TestActivationQuantization:
    def test_zero_is_exact(self, rng):
        x = np.concatenate([rng.uniform(0.3, 2.0, 20), [0.0]])
        q, s, zp = quantize_activation(x)
        assert s * (int(q[-1]) - zp) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, 16, elements=st.floats(-50, 50)))
    def test_error_bound(self, x):
        q, s, zp = quantize_activation(x)
        assert np.abs(s * (q.astype(np.float64) - zp) - x).max() <= s / 2 + 1e-9 * (1 + np.abs(x).max())


class TestInt8Ops:
    def test_exactly_representable_linear_is_exact(self, rng):
        w = rng.integers(-127, 128, (6, 5)).astype(np.float32)
        w[0, 0] = 127
        x = rng.integers(0, 256, (4, 6)).astype(np.float32)
        x[0, 0], x[0, 1] = 0, 255
        b = rng.standard_normal(5).astype(np.float32)
        qw = quantize_tensor(w)
        assert qw.scale == 1.0
        out = ops.linear(Tensor(x), qw, Tensor(b)).data
        ref = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_array_equal(out, ref)

    def test_zero_input_zero_weights_gives_bias(self):
        b = np.arange(3, dtype=np.float32)
        out = ops.linear(Tensor(np.zeros((2, 4), np.float32)), quantize_tensor(np.zeros((4, 3))),
                         Tensor(b)).data
        np.testing.assert_array_equal(out, np.broadcast_to(b, (2, 3)))

    def test_linear_close_to_fp32(self, rng):
        x = rng.standard_normal((32, 64)).astype(np.float32)
        w = rng.standard_normal((64, 16)).astype(np.float32) * 0.1
        out = ops.linear(Tensor(x), quantize_tensor(w)).data
        ref = x @ w
        assert np.abs(out - ref).max() <= 0.03 * np.abs(ref).max()

    def test_dwconv_close_to_fp32(self, rng):
        x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
        k = rng.standard_normal((3, 3, 3)).astype(np.float32)
        out = ops.depthwise_conv2d(Tensor(x), quantize_tensor(k), 1, 1).data
        ref = ops.depthwise_conv2d(Tensor(x), Tensor(k), 1, 1).data
        assert np.abs(out - ref).max() <= 0.03 * np.abs(ref).max()
        y = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
        k2 = rng.standard_normal((3, 2, 2)).astype(np.float32)
        out = ops.depthwise_conv2d_transposed(Tensor(y), quantize_tensor(k2), 2, 0).data
        ref = ops.depthwise_conv2d_transposed(Tensor(y), Tensor(k2), 2, 0).data
        assert np.abs(out - ref).max() <= 0.03 * np.abs(ref).max()

    def test_haar_bank_quantizes_exactly(self):
        from waveformer.wavelet import haar_bank
        q = quantize_tensor(haar_bank(4, np.float32))
        np.testing.assert_array_equal(q.dequantize(), haar_bank(4, np.float32))


class TestModelQuantization:
    def test_which_tensors_quantize(self):
        assert is_quantizable("block0.attn.q.weight")
        assert is_quantizable("wavelet.dec") and is_quantizable("wavelet.level1.refine")
        assert not is_quantizable("block0.attn.q.bias")
        assert not is_quantizable("block0.ln1.gamma")
        assert not is_quantizable("wavelet.level1.scale")
        assert not is_quantizable("cls_token")

    def test_quantized_model_tracks_fp32(self, rng):
        m = WaveFormer(tiny(), seed=2)
        qm = quantize_model(m)
        assert qm.is_quantized and not m.is_quantized
        assert isinstance(qm.params["head.weight"], QuantizedTensor)
        x = rng.standard_normal((16, 2, 8)).astype(np.float32)
        a, b = m.predict_logits(x), qm.predict_logits(x)
        assert np.abs(a - b).max() <= 0.05 * np.abs(a).max() + 1e-3
        assert qm.num_params == m.num_params

    def test_default_model_runs(self, rng):
        m = WaveFormer(ModelConfig(layers=1))
        x = rng.standard_normal((1, 8, 200)).astype(np.float32)
        a = m.predict_logits(x)
        b = quantize_model(m).predict_logits(x)
        assert b.shape == a.shape and np.isfinite(b).all()

    def test_kernel_name(self):
        assert int8_kernel_name() in ("torch._int_mm", "numpy-f64-emulation")


def test_shared_linear_equals_separate_calls(rng):
    from waveformer.quant import int8_linear, int8_linear_shared
    x = rng.standard_normal((2, 5, 16)).astype(np.float32)
    ws = [quantize_tensor(rng.standard_normal((16, n))) for n in (16, 16, 8)]
    bs = [rng.standard_normal(w.shape[1]).astype(np.float32) for w in ws]
    for y, w, b in zip(int8_linear_shared(x, ws, bs), ws, bs):
        np.testing.assert_array_equal(y, int8_linear(x, w, b))


def test_shared_dwt_quantization_equals_per_band(rng):
    from waveformer.quant import int8_dwconv_bank
    from waveformer.wavelet import haar_bank
    x = rng.standard_normal((1, 3, 6, 4)).astype(np.float32)
    bank = quantize_tensor(haar_bank(3, np.float32))
    for s, y in enumerate(int8_dwconv_bank(x, bank, 2, 0, 0)):
        band = QuantizedTensor(bank.payload[s], bank.scale)
        np.testing.assert_array_equal(y, ops.depthwise_conv2d(Tensor(x), band, 2, 0).data)
