"""
Patch embedding and the learnable multi-level wavelet convolution.

The patch embedding turns a (B, C, T) window into a (B, D, C, N) feature
map. WaveletConv treats the (C, N) axes of that map as a 2-D grid (rows are
electrode channels, columns are temporal patches) and D as depth:

1. ``levels`` rounds of stride-2 depthwise analysis with four learnable
   2x2 kernels (LL, LH, HL, HH); only LL is decomposed further.
2. Every subband passes through a learnable 3x3 depthwise refinement and a
   per-channel scale. In training, LH/HL/HH get element-wise dropout.
3. Transposed depthwise synthesis rebuilds the map level by level.
4. A 3x3 depthwise base convolution of the input is added back.

Subband orientation: LH is low-pass across channels and high-pass across
time, HL is high-pass across channels and low-pass across time.

Filters start as the orthonormal Haar bank (entries +-1/2, synthesis equal
to analysis), refinements as delta kernels and scales as ones, so at
initialization the wavelet path is exactly the identity in eval mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError, InputError
from .quant import QuantizedTensor, int8_dwconv_bank
from .tensor import RngStreams, Tensor

SUBBANDS = ("LL", "LH", "HL", "HH")
DETAIL_BANDS = (1, 2, 3)


def haar_bank(depth: int, dtype=np.float64) -> np.ndarray:
    """Orthonormal 2-D Haar analysis kernels, shape (4, depth, 2, 2)."""
    lo = np.array([1.0, 1.0])
    hi = np.array([1.0, -1.0])
    # rows = channel axis, columns = time axis; 0.5 = (1/sqrt 2)^2, exact in binary
    kernels = [0.5 * np.outer(a, b) for a, b in ((lo, lo), (lo, hi), (hi, lo), (hi, hi))]
    bank = np.stack(kernels)[:, None, :, :]
    return np.repeat(bank, depth, axis=1).astype(dtype)


def delta_kernel(depth: int, size: int = 3, dtype=np.float64) -> np.ndarray:
    k = np.zeros((depth, size, size), dtype=dtype)
    k[:, size // 2, size // 2] = 1.0
    return k


def feasible_levels(h: int, w: int, levels: int) -> int:
    """Clamp the requested depth to ``floor(log2(min(h, w))) + 1``."""
    if levels < 1:
        raise DimensionError(f"wavelet levels must be >= 1, got {levels}")
    limit = int(math.floor(math.log2(min(h, w)))) + 1
    return min(levels, limit)


def init_wavelet_params(depth: int, levels: int, dtype=np.float32, prefix: str = "wavelet"
                        ) -> dict[str, Tensor]:
    p = {
        f"{prefix}.dec": haar_bank(depth, dtype),
        f"{prefix}.rec": haar_bank(depth, dtype),
    }
    for j in range(1, levels + 1):
        p[f"{prefix}.level{j}.refine"] = np.stack([delta_kernel(depth, 3, dtype)] * 4)
        p[f"{prefix}.level{j}.scale"] = np.ones((4, depth), dtype=dtype)
    p[f"{prefix}.base.weight"] = delta_kernel(depth, 3, dtype)
    p[f"{prefix}.base.bias"] = np.zeros(depth, dtype=dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _band(bank, s: int):
    """Kernel ``s`` of a (4, D, k, k) bank, keeping the graph or the quantized scale."""
    if isinstance(bank, QuantizedTensor):
        return QuantizedTensor(bank.payload[s], bank.scale, bank.zero_point)
    return ops.take(bank, s, axis=0)


def _scale_row(scales: Tensor, s: int) -> Tensor:
    return ops.take(scales, s, axis=0)


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------

def patch_embed(x: Tensor, weight, bias: Tensor, gamma: Tensor, beta: Tensor,
                patch: int) -> Tensor:
    """(B, C, T) -> (B, D, C, N): (1, P) convolution with stride P, LayerNorm, GELU.

    ``weight`` has shape (P, D). LayerNorm runs over the embedding axis.
    """
    if x.ndim != 3:
        raise DimensionError(f"patch_embed expects (B, C, T), got {x.shape}")
    B, C, T = x.shape
    if T < patch:
        raise InputError(f"window length {T} shorter than patch width {patch}")
    if T % patch:
        raise InputError(f"window length {T} is not a multiple of patch width {patch}")
    N = T // patch
    tokens = ops.reshape(x, (B, C, N, patch))
    emb = ops.linear(tokens, weight, bias)                    # (B, C, N, D)
    emb = ops.gelu(ops.layer_norm(emb, gamma, beta))
    return ops.transpose(emb, (0, 3, 1, 2))                  # (B, D, C, N)


# ---------------------------------------------------------------------------
# Single-level analysis / synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PadRecord:
    """Zero padding applied before a level, as (top, bottom, left, right)."""

    top: int
    bottom: int
    left: int
    right: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.top, self.bottom, self.left, self.right)


def dwt_level(x: Tensor, dec) -> tuple[tuple[Tensor, Tensor, Tensor, Tensor], PadRecord]:
    """Split (B, D, H, W) into LL, LH, HL, HH of shape (B, D, ceil(H/2), ceil(W/2)).

    Odd spatial sizes are zero-padded at the bottom/right first; the
    padding is returned so :func:`iwt_level` can crop it away.
    """
    if x.ndim != 4:
        raise DimensionError(f"dwt_level expects (B, D, H, W), got {x.shape}")
    H, W = x.shape[2:]
    pad = PadRecord(0, H % 2, 0, W % 2)
    xp = ops.pad2d_end(x, pad.bottom, pad.right)
    if isinstance(dec, QuantizedTensor):
        if dec.shape[1] != x.shape[1]:
            raise DimensionError(f"filter bank depth {dec.shape[1]} vs input {x.shape}")
        bands = tuple(Tensor(b) for b in int8_dwconv_bank(xp.data, dec, 2, 0, 0))
    else:
        bands = tuple(ops.depthwise_conv2d(xp, _band(dec, s), stride=2, pad=0) for s in range(4))
    return bands, pad


def iwt_level(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor, rec, pad: PadRecord) -> Tensor:
    """Sum of stride-2 transposed depthwise convolutions, cropped per ``pad``."""
    shapes = {ll.shape, lh.shape, hl.shape, hh.shape}
    if len(shapes) != 1:
        raise DimensionError(f"subband shapes differ: {sorted(shapes)}")
    out = None
    for s, band in enumerate((ll, lh, hl, hh)):
        y = ops.depthwise_conv2d_transposed(band, _band(rec, s), stride=2, pad=0)
        out = y if out is None else ops.add(out, y)
    H, W = out.shape[2:]
    return ops.crop2d(out, H - pad.bottom - pad.top, W - pad.right - pad.left)


# ---------------------------------------------------------------------------
# WaveletConv
# ---------------------------------------------------------------------------

def _refine(band: Tensor, params, prefix: str, j: int, s: int) -> Tensor:
    y = ops.depthwise_conv2d(band, _band(params[f"{prefix}.level{j}.refine"], s), stride=1, pad=1)
    return ops.mul_channel(y, _scale_row(params[f"{prefix}.level{j}.scale"], s))


def _hf_dropout(band: Tensor, p: float, training: bool, rng: RngStreams | None, step: int,
                stream: str) -> Tensor:
    if not training or p == 0.0:
        return band
    if p >= 1.0:
        return ops.mul_const(band, np.zeros((), dtype=band.dtype))
    if rng is None:
        raise InputError("training-mode WaveletConv needs an rng")
    return ops.dropout(band, p, True, rng.generator(stream, step))


def wavelet_path(x: Tensor, params, levels: int, hf_dropout: float = 0.1,
                 training: bool = False, rng: RngStreams | None = None, step: int = 0,
                 prefix: str = "wavelet") -> Tensor:
    """Multi-level decomposition, subband refinement and reconstruction (no base path)."""
    H, W = x.shape[2:]
    J = feasible_levels(H, W, levels)
    if J < levels:
        warnings.warn(f"wavelet levels clamped from {levels} to {J} for a {H}x{W} map",
                      stacklevel=2)
    dec, rec = params[f"{prefix}.dec"], params[f"{prefix}.rec"]
    details: list[tuple[Tensor, Tensor, Tensor]] = []
    pads: list[PadRecord] = []
    cur = x
    for j in range(1, J + 1):
        bands, pad = dwt_level(cur, dec)
        refined = [_refine(b, params, prefix, j, s) for s, b in enumerate(bands)]
        for s in DETAIL_BANDS:
            refined[s] = _hf_dropout(refined[s], hf_dropout, training, rng, step,
                                     f"{prefix}.level{j}.{SUBBANDS[s]}")
        details.append((refined[1], refined[2], refined[3]))
        pads.append(pad)
        cur = refined[0]
    for j in range(J, 0, -1):
        lh, hl, hh = details[j - 1]
        cur = iwt_level(cur, lh, hl, hh, rec, pads[j - 1])
    return cur


def waveletconv_forward(x: Tensor, params, levels: int, hf_dropout: float = 0.1,
                        training: bool = False, rng: RngStreams | None = None, step: int = 0,
                        prefix: str = "wavelet") -> Tensor:
    """``Conv_base(x) + X_recon`` for a (B, D, H, W) map."""
    recon = wavelet_path(x, params, levels, hf_dropout, training, rng, step, prefix)
    base = ops.depthwise_conv2d(x, params[f"{prefix}.base.weight"], stride=1, pad=1)
    base = ops.add_channel(base, params[f"{prefix}.base.bias"])
    return ops.add(base, recon)
