"""
Token sequence, rotary-position attention and the pre-norm transformer encoder.

Tokens are the (C, N) cells of the feature map in channel-major order with
a learnable class token prepended at position 0. Rotary embedding rotates
dimension pair ``(2i, 2i+1)`` of every query and key at position ``m`` by
``m * base**(-2i / head_dim)``; position 0 is therefore untouched.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .quant import QuantizedTensor, int8_linear_shared
from .tensor import RngStreams, Tensor, make_op


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

def flatten_tokens(x: Tensor, class_token: Tensor) -> Tensor:
    """(B, D, C, N) map + (D,) class token -> (B, 1 + C*N, D) sequence.

    Token ``c * N + n + 1`` is ``x[:, :, c, n]``.
    """
    if x.ndim != 4:
        raise DimensionError(f"flatten_tokens expects (B, D, C, N), got {x.shape}")
    B, D, C, N = x.shape
    if class_token.shape != (D,):
        raise DimensionError(f"class token {class_token.shape} vs embed dim {D}")
    seq = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B, C * N, D))
    cls = ops.reshape(class_token, (1, 1, D))
    cls = ops.concat([cls] * B, axis=0) if B > 1 else cls
    return ops.concat([cls, seq], axis=1)


def unflatten_tokens(z: Tensor, channels: int, patches: int) -> Tensor:
    """Inverse of :func:`flatten_tokens` (drops the class token)."""
    B, S, D = z.shape
    if S != 1 + channels * patches:
        raise DimensionError(f"sequence length {S} != 1 + {channels}*{patches}")
    rest = _drop_first(z)
    return ops.transpose(ops.reshape(rest, (B, channels, patches, D)), (0, 3, 1, 2))


def _drop_first(z: Tensor) -> Tensor:
    B, S, D = z.shape

    def bwd(g):
        full = np.zeros((B, S, D), dtype=g.dtype)
        full[:, 1:] = g
        return (full,)

    return make_op("drop_first", np.ascontiguousarray(z.data[:, 1:]), (z,), bwd)


def token_positions(seq_len: int) -> np.ndarray:
    """Position ids 0 (class token), 1..S (patch tokens)."""
    return np.arange(seq_len)


# ---------------------------------------------------------------------------
# Rotary embedding
# ---------------------------------------------------------------------------

def rope_frequencies(head_dim: int, base: float = 10000.0) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {head_dim}")
    return base ** (-2.0 * np.arange(head_dim // 2) / head_dim)


def rope_rotate(v: Tensor, positions: np.ndarray, base: float = 10000.0,
                thetas: np.ndarray | None = None) -> Tensor:
    """Rotate pairs ``(2i, 2i+1)`` of the last axis by ``position * theta_i``.

    ``v`` is (..., S, head_dim) and ``positions`` has length S. ``thetas``
    overrides the default ``base**(-2i/head_dim)`` schedule.
    """
    hd = v.shape[-1]
    if hd % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {hd}")
    if thetas is None:
        thetas = rope_frequencies(hd, base)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * np.asarray(thetas)[None, :]
    cos = np.cos(ang).astype(v.dtype)
    sin = np.sin(ang).astype(v.dtype)

    def rotate(a: np.ndarray, sgn: int) -> np.ndarray:
        ev, od = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = ev * cos - sgn * od * sin
        out[..., 1::2] = sgn * ev * sin + od * cos
        return out

    return make_op("rope", rotate(v.data, 1), (v,), lambda g: (rotate(g, -1),))


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def _gate(branch: Tensor, p_sd: float, training: bool, rng: RngStreams | None, step: int,
          stream: str) -> Tensor:
    """Stochastic depth: per-sample Bernoulli(1 - p) gate with inverted scaling."""
    if not training or p_sd == 0.0:
        return branch
    B = branch.shape[0]
    keep = rng.generator(stream, step).random(B) >= p_sd
    mask = keep.astype(branch.dtype) / branch.dtype.type(1.0 - p_sd)
    return ops.mul_const(branch, mask.reshape((B,) + (1,) * (branch.ndim - 1)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, S, D = x.shape
    return ops.transpose(ops.reshape(x, (B, S, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, S, hd = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, S, H * hd))


def attention_weights(h: Tensor, params, prefix: str, heads: int, use_rope: bool = True,
                      rope_base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Softmax attention matrix (B, heads, S, S) and values for a normalized input."""
    B, S, D = h.shape
    if D % heads:
        raise ConfigError(f"embed dim {D} not divisible by {heads} heads")
    ws = [params[f"{prefix}.{n}.weight"] for n in "qkv"]
    bs = [params[f"{prefix}.{n}.bias"] for n in "qkv"]
    if all(isinstance(w, QuantizedTensor) for w in ws):
        # inference only: one activation quantization and GEMM for all three
        q, k, v = (_split_heads(Tensor(y), heads)
                   for y in int8_linear_shared(h.data, ws, [b.data for b in bs]))
    else:
        q, k, v = (_split_heads(ops.linear(h, w, b), heads) for w, b in zip(ws, bs))
    if use_rope:
        pos = token_positions(S)
        q = rope_rotate(q, pos, rope_base)
        k = rope_rotate(k, pos, rope_base)
    hd = D // heads
    scores = ops.scale(ops.bmm(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    return ops.softmax(scores, axis=-1), v


def rope_attention(z: Tensor, params, prefix: str, heads: int, use_rope: bool = True,
                   rope_base: float = 10000.0, p_sd: float = 0.0, training: bool = False,
                   rng: RngStreams | None = None, step: int = 0) -> Tensor:
    """``Z + gate(out_proj(Attn(LN(Z))))`` with rotary queries and keys."""
    h = ops.layer_norm(z, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    attn, v = attention_weights(h, params, f"{prefix}.attn", heads, use_rope, rope_base)
    mixed = _merge_heads(ops.bmm(attn, v))
    out = ops.linear(mixed, params[f"{prefix}.attn.out.weight"], params[f"{prefix}.attn.out.bias"])
    return ops.add(z, _gate(out, p_sd, training, rng, step, f"{prefix}.attn.sd"))


def feed_forward(z: Tensor, params, prefix: str, p_sd: float = 0.0, training: bool = False,
                 rng: RngStreams | None = None, step: int = 0) -> Tensor:
    """``Z + gate(fc2(GELU(fc1(LN(Z)))))``."""
    h = ops.layer_norm(z, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = ops.gelu(ops.linear(h, params[f"{prefix}.ffn.fc1.weight"], params[f"{prefix}.ffn.fc1.bias"]))
    h = ops.linear(h, params[f"{prefix}.ffn.fc2.weight"], params[f"{prefix}.ffn.fc2.bias"])
    return ops.add(z, _gate(h, p_sd, training, rng, step, f"{prefix}.ffn.sd"))


def transformer_block(z: Tensor, params, prefix: str, heads: int, use_rope: bool = True,
                      rope_base: float = 10000.0, p_sd: float = 0.0, training: bool = False,
                      rng: RngStreams | None = None, step: int = 0) -> Tensor:
    z = rope_attention(z, params, prefix, heads, use_rope, rope_base, p_sd, training, rng, step)
    return feed_forward(z, params, prefix, p_sd, training, rng, step)


def encode(z: Tensor, params, layers: int, heads: int, use_rope: bool = True,
           rope_base: float = 10000.0, p_sd: float = 0.0, training: bool = False,
           rng: RngStreams | None = None, step: int = 0) -> Tensor:
    """Run ``layers`` blocks and return the normalized class token, (B, D)."""
    for i in range(layers):
        z = transformer_block(z, params, f"block{i}", heads, use_rope, rope_base, p_sd,
                              training, rng, step)
    cls = ops.take(z, 0, axis=1)
    return ops.layer_norm(cls, params["final_ln.gamma"], params["final_ln.beta"])


def classify(class_embedding: Tensor, params) -> Tensor:
    return ops.linear(class_embedding, params["head.weight"], params["head.bias"])


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    return ops.cross_entropy(logits, labels)


def predict(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1)
