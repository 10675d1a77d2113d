"""
Post-training INT8 quantization.

Weights of every matmul and convolution are stored symmetric per-tensor
(``w ~= scale * q``, ``q`` in [-127, 127], zero point 0). Activations are
quantized dynamically per tensor at each quantized op (asymmetric, from the
batch min/max), products accumulate in int32, and results are rescaled to
floating point right after the op. Normalization, softmax, RoPE and GELU
stay in floating point.

The int8 x int8 -> int32 GEMM uses ``torch._int_mm`` when PyTorch is
importable (VNNI-backed on x86); otherwise an exact float64 BLAS emulation
is used, which is correct but not faster than FP32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import WaveFormer

try:  # optional fast kernel
    import torch as _torch

    _HAVE_TORCH_INT_MM = hasattr(_torch, "_int_mm")
except ImportError:  # pragma: no cover - exercised only without torch
    _torch = None
    _HAVE_TORCH_INT_MM = False

QMAX = 127
SCALE_EPS = 1e-12


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass
class QuantizedTensor:
    """INT8 payload with a per-tensor scale and zero point."""

    payload: np.ndarray
    scale: float
    zero_point: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape

    @property
    def ndim(self) -> int:
        return self.payload.ndim

    @property
    def size(self) -> int:
        return self.payload.size

    @property
    def nbytes(self) -> int:
        return self.payload.nbytes + 8

    def dequantize(self) -> np.ndarray:
        return (np.float32(self.scale)
                * (self.payload.astype(np.float32) - np.float32(self.zero_point)))


def quantize_tensor(w: np.ndarray) -> QuantizedTensor:
    """Symmetric per-tensor INT8 quantization with ``scale = max|w| / 127``.

    An all-zero tensor gets ``scale = 1e-12`` and a zero payload. Rounding
    is half away from zero, so 0.5 * 127 = 63.5 maps to 64.
    """
    w = np.asarray(w, dtype=np.float64)
    amax = float(np.abs(w).max()) if w.size else 0.0
    if amax == 0.0:
        return QuantizedTensor(np.zeros(w.shape, dtype=np.int8), SCALE_EPS, 0)
    q = round_half_away(w * (QMAX / amax))
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    # float32-representable so checkpoints round-trip exactly
    return QuantizedTensor(q, float(np.float32(amax / QMAX)), 0)


def quantize_activation(x: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Dynamic asymmetric per-tensor INT8 quantization.

    The range is widened to include 0 so that zero padding stays exact.
    Returns ``(q, scale, zero_point)`` with ``x ~= scale * (q - zero_point)``.
    """
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    scale = (hi - lo) / 255.0
    if scale <= 0.0:
        return np.zeros(x.shape, dtype=np.int8), SCALE_EPS, 0
    z = -128.0 - lo / scale
    zp = int(min(max(math.copysign(math.floor(abs(z) + 0.5), z), -128), 127))
    # in-place round-half-away of x / scale in the input precision
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    v = np.divide(x, dt.type(scale), dtype=dt)
    v += np.copysign(dt.type(0.5), v)
    np.trunc(v, out=v)
    v += zp
    np.maximum(v, -128, out=v)
    np.minimum(v, 127, out=v)
    return v.astype(np.int8), scale, zp


def _gemm_i8(a: np.ndarray, w: QuantizedTensor) -> np.ndarray:
    """Exact int32 product of int8 (M, K) and the int8 weight payload (K, N)."""
    if _HAVE_TORCH_INT_MM:
        tw = w._cache.get("torch")
        if tw is None:
            tw = w._cache["torch"] = _torch.from_numpy(np.ascontiguousarray(w.payload))
        return _torch._int_mm(_torch.from_numpy(np.ascontiguousarray(a)), tw).numpy()
    wf = w._cache.get("f64")
    if wf is None:
        wf = w._cache["f64"] = w.payload.astype(np.float64)
    return (a.astype(np.float64) @ wf).astype(np.int32)


def int8_linear(x: np.ndarray, w: QuantizedTensor, b: np.ndarray | None) -> np.ndarray:
    """``x @ w + b`` with dynamic activation quantization and int32 accumulation."""
    K, N = w.shape
    lead = x.shape[:-1]
    q, sx, zp = quantize_activation(x.reshape(-1, K))
    acc = _gemm_i8(q, w)
    if zp:
        colsum = w._cache.get("colsum")
        if colsum is None:
            colsum = w._cache["colsum"] = w.payload.astype(np.int32).sum(axis=0)
        acc = acc - np.int32(zp) * colsum
    y = acc.astype(x.dtype)
    y *= x.dtype.type(sx * w.scale)
    if b is not None:
        y += b
    return y.reshape(lead + (N,))


def int8_linear_shared(x: np.ndarray, ws: Sequence[QuantizedTensor],
                       bs: Sequence[np.ndarray | None]) -> list[np.ndarray]:
    """``[x @ w_i + b_i]`` with one activation quantization and one GEMM.

    Each weight keeps its own per-tensor scale; the payloads are only
    concatenated for execution, so every output equals :func:`int8_linear`.
    """
    K = ws[0].shape[0]
    if any(w.shape[0] != K for w in ws):
        raise ValueError("shared int8 linear needs a common input width")
    key = ("fused",) + tuple(id(w) for w in ws[1:])
    fused = ws[0]._cache.get(key)
    if fused is None:
        fused = ws[0]._cache[key] = QuantizedTensor(
            np.concatenate([w.payload for w in ws], axis=1), 1.0, 0)
    lead = x.shape[:-1]
    q, sx, zp = quantize_activation(x.reshape(-1, K))
    acc = _gemm_i8(q, fused)
    if zp:
        colsum = fused._cache.get("colsum")
        if colsum is None:
            colsum = fused._cache["colsum"] = fused.payload.astype(np.int32).sum(axis=0)
        acc = acc - np.int32(zp) * colsum
    outs, start = [], 0
    for w, b in zip(ws, bs):
        N = w.shape[1]
        y = acc[:, start:start + N].astype(x.dtype)
        y *= x.dtype.type(sx * w.scale)
        if b is not None:
            y += b
        outs.append(y.reshape(lead + (N,)))
        start += N
    return outs


def _centered(x: np.ndarray) -> tuple[np.ndarray, float]:
    q, s, zp = quantize_activation(x)
    return q.astype(np.int32) - np.int32(zp), s


def _payload_i32(k: QuantizedTensor) -> np.ndarray:
    p = k._cache.get("i32")
    if p is None:
        p = k._cache["i32"] = k.payload.astype(np.int32)
    return p


def int8_dwconv(x: np.ndarray, k: QuantizedTensor, stride: int, ph: int, pw: int) -> np.ndarray:
    from .ops import dw_conv_kernel

    xc, sx = _centered(x)
    acc = dw_conv_kernel(xc, _payload_i32(k), stride, ph, pw)
    return acc.astype(x.dtype) * x.dtype.type(sx * k.scale)


def int8_dwconv_bank(x: np.ndarray, bank: QuantizedTensor, stride: int, ph: int, pw: int
                     ) -> list[np.ndarray]:
    """Every (C, kh, kw) slice of a stacked bank applied to one quantized input."""
    from .ops import dw_conv_kernel

    xc, sx = _centered(x)
    p = _payload_i32(bank)
    f = x.dtype.type(sx * bank.scale)
    return [dw_conv_kernel(xc, p[s], stride, ph, pw).astype(x.dtype) * f for s in range(len(p))]


def int8_dwconv_transposed(x: np.ndarray, k: QuantizedTensor, stride: int, ph: int, pw: int,
                           out_hw: tuple[int, int]) -> np.ndarray:
    from .ops import dw_conv_adjoint_kernel

    xc, sx = _centered(x)
    acc = dw_conv_adjoint_kernel(xc, _payload_i32(k), stride, ph, pw, out_hw)
    return np.ascontiguousarray(acc).astype(x.dtype) * x.dtype.type(sx * k.scale)


def is_quantizable(name: str) -> bool:
    """Matmul and convolution weights; biases, norms, scales and tokens stay FP32."""
    return (name.endswith(".weight") or name in ("wavelet.dec", "wavelet.rec")
            or name.endswith(".refine"))


def quantize_params(params: Mapping[str, object]) -> dict[str, object]:
    from .tensor import Tensor

    out: dict[str, object] = {}
    for name, p in params.items():
        if isinstance(p, Tensor) and is_quantizable(name):
            out[name] = quantize_tensor(p.data)
        else:
            out[name] = p
    return out


def quantize_model(model: "WaveFormer") -> "WaveFormer":
    """Return a copy of ``model`` whose matmul/conv weights are INT8."""
    return model.with_params(quantize_params(model.params))


def infer_quantized(model_q: "WaveFormer", batch: np.ndarray) -> np.ndarray:
    """Logits of the quantized model for a (B, C, T) batch."""
    return model_q.predict_logits(batch)


def int8_kernel_name() -> str:
    return "torch._int_mm" if _HAVE_TORCH_INT_MM else "numpy-f64-emulation"
