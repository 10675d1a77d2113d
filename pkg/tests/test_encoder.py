import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_grads
from waveformer import ops
from waveformer.encoder import (attention_weights, encode, flatten_tokens, rope_attention,
                                rope_frequencies, rope_rotate, unflatten_tokens)
from waveformer.errors import ConfigError
from waveformer.model import AblationConfig, ModelConfig, WaveFormer, init_params
from waveformer.tensor import RngStreams, Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def tiny_cfg(**kw):
    base = dict(channels=2, window=8, patch=4, embed_dim=8, levels=1, layers=1, heads=2,
                ffn_dim=16, num_classes=3, dtype="float64", stochastic_depth=0.0)
    base.update(kw)
    return ModelConfig(**base)


def block_params(rng, D=8, F=16, scale=0.3):
    cfg = tiny_cfg(embed_dim=D, ffn_dim=F)
    p = init_params(cfg, seed=int(rng.integers(1 << 30)))
    for t in p.values():
        t.data = t.data + rng.standard_normal(t.shape) * scale
    return p


class TestTokens:
    def test_sequence_length(self):
        x = T(np.zeros((1, 256, 8, 5)))
        assert flatten_tokens(x, T(np.zeros(256))).shape == (1, 41, 256)
        assert flatten_tokens(T(np.zeros((1, 4, 1, 1))), T(np.zeros(4))).shape == (1, 2, 4)

    def test_channel_major_order_and_roundtrip(self, rng):
        x = rng.standard_normal((2, 4, 3, 5))
        z = flatten_tokens(T(x), T(np.arange(4.0)))
        np.testing.assert_array_equal(z.data[:, 0], np.tile(np.arange(4.0), (2, 1)))
        np.testing.assert_array_equal(z.data[:, 1 + 2 * 5 + 3], x[:, :, 2, 3])
        np.testing.assert_array_equal(unflatten_tokens(z, 3, 5).data, x)

    def test_flatten_grads(self, rng):
        w = rng.standard_normal((2, 7, 3))
        check_grads(lambda x, c: ops.dot(flatten_tokens(x, c), T(w)),
                    [rng.standard_normal((2, 3, 2, 3)), rng.standard_normal(3)])


class TestRope:
    def test_position_zero_is_identity(self, rng):
        v = rng.standard_normal((2, 3, 1, 8))
        np.testing.assert_array_equal(rope_rotate(T(v), np.array([0])).data, v)

    def test_quarter_rotation(self):
        out = rope_rotate(T([[1.0, 0.0]]), np.array([1]), thetas=np.array([math.pi / 2]))
        np.testing.assert_allclose(out.data, [[0.0, 1.0]], atol=1e-15)

    def test_frequencies(self):
        np.testing.assert_allclose(rope_frequencies(8), 10000.0 ** (-np.arange(4) * 2 / 8))
        with pytest.raises(ConfigError):
            rope_frequencies(7)

    def test_pair_norms_preserved(self, rng):
        v = rng.standard_normal((2, 2, 41, 32))
        out = rope_rotate(T(v), np.arange(41)).data
        n0 = np.hypot(v[..., 0::2], v[..., 1::2])
        n1 = np.hypot(out[..., 0::2], out[..., 1::2])
        assert np.max(np.abs(n0 - n1)) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 200), st.integers(0, 200), st.integers(-50, 500), st.integers(0, 2**31))
    def test_relative_position_property(self, m, n, s, seed):
        if m + s < 0 or n + s < 0:
            return
        r = np.random.default_rng(seed)
        q, k = r.standard_normal((1, 16)), r.standard_normal((1, 16))

        def score(a, b):
            qa = rope_rotate(T(q), np.array([a])).data
            kb = rope_rotate(T(k), np.array([b])).data
            return float(np.sum(qa * kb))

        assert abs(score(m, n) - score(m + s, n + s)) <= 1e-6

    def test_rotation_grad_is_inverse_rotation(self, rng):
        w = rng.standard_normal((1, 2, 5, 4))
        check_grads(lambda v: ops.dot(rope_rotate(v, np.arange(5)), T(w)),
                    [rng.standard_normal((1, 2, 5, 4))])


class TestAttention:
    def test_rows_sum_to_one(self, rng):
        p = block_params(rng)
        attn, _ = attention_weights(T(rng.standard_normal((2, 7, 8))), p, "block0.attn", heads=2)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)

    def test_single_token(self, rng):
        p = block_params(rng)
        z = rng.standard_normal((1, 1, 8))
        attn, _ = attention_weights(T(z), p, "block0.attn", heads=2)
        np.testing.assert_array_equal(attn.data, np.ones((1, 2, 1, 1)))
        h = ops.layer_norm(T(z), p["block0.ln1.gamma"], p["block0.ln1.beta"])
        v = ops.linear(h, p["block0.attn.v.weight"], p["block0.attn.v.bias"])
        ref = z + ops.linear(v, p["block0.attn.out.weight"], p["block0.attn.out.bias"]).data
        np.testing.assert_allclose(rope_attention(T(z), p, "block0", 2).data, ref, atol=1e-12)

    def test_zero_value_projection_is_identity(self, rng):
        p = block_params(rng)
        p["block0.attn.v.weight"].data[:] = 0
        p["block0.attn.v.bias"].data[:] = 0
        p["block0.attn.out.bias"].data[:] = 0
        z = rng.standard_normal((2, 5, 8))
        np.testing.assert_array_equal(rope_attention(T(z), p, "block0", 2).data, z)

    def test_dead_branches_give_normalized_class_token(self, rng):
        p = block_params(rng)
        for name in ("block0.attn.out", "block0.ffn.fc2"):
            p[f"{name}.weight"].data[:] = 0
            p[f"{name}.bias"].data[:] = 0
        z = rng.standard_normal((3, 5, 8))
        cls = rng.standard_normal(8)
        z[:, 0] = cls
        out = encode(T(z), p, layers=1, heads=2).data
        ref = ops.layer_norm(T(cls[None]), p["final_ln.gamma"], p["final_ln.beta"]).data
        np.testing.assert_allclose(out, np.repeat(ref, 3, 0), atol=1e-12)

    def _swap(self, z, i, j):
        z = z.copy()
        z[:, [i, j]] = z[:, [j, i]]
        return z

    def test_rope_breaks_permutation_invariance(self, rng):
        p = block_params(rng)
        z = rng.standard_normal((1, 6, 8))
        a = encode(T(z), p, 1, 2, use_rope=True).data
        b = encode(T(self._swap(z, 2, 4)), p, 1, 2, use_rope=True).data
        assert not np.allclose(a, b)

    def test_without_rope_class_embedding_is_permutation_invariant(self, rng):
        p = block_params(rng)
        z = rng.standard_normal((1, 6, 8))
        a = encode(T(z), p, 1, 2, use_rope=False).data
        b = encode(T(self._swap(z, 2, 4)), p, 1, 2, use_rope=False).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_stochastic_depth_gate(self, rng):
        p = block_params(rng)
        z = T(rng.standard_normal((64, 3, 8)))
        out = rope_attention(z, p, "block0", 2, p_sd=0.5, training=True, rng=RngStreams(1)).data
        dropped = np.all(np.isclose(out, z.data), axis=(1, 2))
        assert 0 < dropped.sum() < 64
        ev = rope_attention(z, p, "block0", 2).data
        kept = ~dropped
        np.testing.assert_allclose(out[kept] - z.data[kept], 2 * (ev[kept] - z.data[kept]),
                                   atol=1e-12)

    def test_encoder_shape(self, rng):
        cfg = ModelConfig(embed_dim=256, layers=1, heads=8, ffn_dim=32)
        m = WaveFormer(cfg)
        assert m.embed(rng.standard_normal((2, 8, 200))).shape == (2, 256)


class TestModel:
    def test_forward_shape_and_training_needs_rng(self, rng):
        m = WaveFormer(tiny_cfg())
        x = rng.standard_normal((3, 2, 8))
        assert m.forward(x).shape == (3, 3)
        with pytest.raises(ConfigError):
            m.forward(x, training=True)

    def test_ablation_without_wavelet_has_no_wavelet_params(self):
        m = WaveFormer(tiny_cfg(), AblationConfig(use_waveletconv=False))
        assert not any(k.startswith("wavelet") for k in m.params)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigError):
            WaveFormer(tiny_cfg()).forward(rng.standard_normal((1, 3, 8)))

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            tiny_cfg(heads=3)
        with pytest.raises(ConfigError):
            tiny_cfg(embed_dim=6, heads=2)  # odd head dim
        with pytest.raises(ConfigError):
            tiny_cfg(window=10)

    def test_seed_determinism(self):
        a = WaveFormer(tiny_cfg(), seed=4).state()
        b = WaveFormer(tiny_cfg(), seed=4).state()
        assert all(np.array_equal(a[k], b[k]) for k in a)
