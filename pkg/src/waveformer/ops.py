"""
Differentiable primitives.

Every function takes and returns :class:`~waveformer.tensor.Tensor` objects
and registers a backward closure through :func:`~waveformer.tensor.make_op`.

Broadcasting is limited to the following documented rules:

- :func:`add_bias` adds a vector along the last axis.
- :func:`mul_channel` / :func:`add_channel` scale / shift axis 1 of an NCHW
  map by a per-channel vector.
- :func:`mul_const` multiplies by a non-differentiable constant array that
  NumPy can broadcast to the operand shape (masks, gates).

All other elementwise ops require identical shapes.

``linear``, ``depthwise_conv2d`` and ``depthwise_conv2d_transposed`` also
accept a :class:`~waveformer.quant.QuantizedTensor` weight, in which case
they run the integer kernel (inference only, no graph is recorded).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, ParameterError
from .quant import QuantizedTensor, int8_dwconv, int8_dwconv_transposed, int8_linear
from .tensor import Tensor, make_op

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x.shape``."""
    c = np.asarray(c, dtype=x.dtype)
    try:
        np.broadcast_shapes(c.shape, x.shape)
    except ValueError as exc:
        raise DimensionError(f"mul_const: {c.shape} does not broadcast to {x.shape}") from exc
    out = x.data * c
    if out.shape != x.shape:
        raise DimensionError(f"mul_const: {c.shape} would enlarge {x.shape}")
    return make_op("mul_const", out, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``x.shape[-1:]``."""
    if b.shape != x.shape[-1:]:
        raise DimensionError(f"add_bias: bias {b.shape} vs last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return make_op("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def mul_channel(x: Tensor, s: Tensor) -> Tensor:
    """Scale channel ``c`` of an NCHW tensor by ``s[c]``."""
    if x.ndim != 4 or s.shape != (x.shape[1],):
        raise DimensionError(f"mul_channel: scale {s.shape} vs map {x.shape}")
    sv = s.data[None, :, None, None]
    xd = x.data

    def bwd(g):
        return g * sv, (g * xd).sum(axis=(0, 2, 3))

    return make_op("mul_channel", xd * sv, (x, s), bwd)


def add_channel(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b[c]`` to channel ``c`` of an NCHW tensor."""
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_channel: bias {b.shape} vs map {x.shape}")
    return make_op("add_channel", x.data + b.data[None, :, None, None], (x, b),
                   lambda g: (g, g.sum(axis=(0, 2, 3))))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full inner product ``<a, b>`` as a scalar tensor."""
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dims: ``(..., M, K) @ (..., K, N)``."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_op("bmm", ad @ bd, (a, b), bwd)


def linear(x: Tensor, w, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ w + b`` with ``w`` of shape (K, N)."""
    if isinstance(w, QuantizedTensor):
        return Tensor(int8_linear(x.data, w, None if b is None else b.data))
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    y = x2 @ wd
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
        y = y + b.data
    y = y.reshape(lead + (w.shape[1],))

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_op("linear", y, parents, bwd)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc
    return make_op("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_op("concat", out, tuple(xs), bwd)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along ``axis`` (the axis is dropped)."""
    shape = x.shape
    out = np.take(x.data, index, axis=axis)

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_op("take", out, (x,), bwd)


def pad2d_end(x: Tensor, ph: int, pw: int) -> Tensor:
    """Zero-pad the last two axes by ``ph`` rows and ``pw`` columns at the end."""
    if ph == 0 and pw == 0:
        return x
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return make_op("pad2d", np.pad(x.data, widths), (x,), lambda g: (g[..., :H, :W],))


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the leading ``h`` rows and ``w`` columns of the last two axes."""
    H, W = x.shape[-2:]
    if h == H and w == W:
        return x
    if h > H or w > W:
        raise DimensionError(f"crop2d: cannot crop {(H, W)} to {(h, w)}")

    def bwd(g):
        widths = [(0, 0)] * (g.ndim - 2) + [(0, H - h), (0, W - w)]
        return (np.pad(g, widths),)

    return make_op("crop2d", np.ascontiguousarray(x.data[..., :h, :w]), (x,), bwd)


# ---------------------------------------------------------------------------
# Depthwise convolution
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_dw(x_shape, k_shape, stride, ph, pw):
    if len(x_shape) != 4 or len(k_shape) != 3 or k_shape[0] != x_shape[1]:
        raise DimensionError(f"depthwise conv: input {x_shape} vs kernel {k_shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    H, W = x_shape[2:]
    kh, kw = k_shape[1:]
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Symmetric zero padding of the last two axes (cheaper than ``np.pad``)."""
    if not (ph or pw):
        return x
    B, C, H, W = x.shape
    out = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + H, pw:pw + W] = x
    return out


def dw_conv_kernel(x: np.ndarray, k: np.ndarray, stride: int, ph: int, pw: int) -> np.ndarray:
    """Raw depthwise cross-correlation on arrays (any numeric dtype)."""
    B, C, H, W = x.shape
    _, kh, kw = k.shape
    Ho = conv_output_size(H, kh, stride, ph)
    Wo = conv_output_size(W, kw, stride, pw)
    xp = _pad_hw(x, ph, pw)
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x, k))
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += k[None, :, i, j, None, None] * xp[:, :, i:i + he:stride, j:j + we:stride]
    return out


def dw_conv_adjoint_kernel(y: np.ndarray, k: np.ndarray, stride: int, ph: int, pw: int,
                           out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`dw_conv_kernel`: maps an output-shaped map back to ``out_hw``."""
    B, C, Ho, Wo = y.shape
    _, kh, kw = k.shape
    H, W = out_hw
    Hp = max(H + 2 * ph, stride * (Ho - 1) + kh)
    Wp = max(W + 2 * pw, stride * (Wo - 1) + kw)
    xp = np.zeros((B, C, Hp, Wp), dtype=np.result_type(y, k))
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + he:stride, j:j + we:stride] += k[None, :, i, j, None, None] * y
    return xp[:, :, ph:ph + H, pw:pw + W]


def _dw_kernel_grad(g: np.ndarray, xin: np.ndarray, k_shape, stride: int, ph: int, pw: int,
                    ) -> np.ndarray:
    """d<g, conv(xin, k)>/dk for output-shaped ``g`` and input-shaped ``xin``."""
    _, kh, kw = k_shape
    Ho, Wo = g.shape[2:]
    xp = _pad_hw(xin, ph, pw)
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    gk = np.empty(k_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gk[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + he:stride, j:j + we:stride])
    return gk


def depthwise_conv2d(x: Tensor, k, stride: int = 1, pad=0) -> Tensor:
    """Depthwise 2-D cross-correlation with symmetric zero padding.

    ``x`` is (B, C, H, W) and ``k`` is (C, kh, kw): channel ``c`` of the
    output depends only on channel ``c`` of the input. Output spatial size
    is ``floor((H + 2p - kh) / stride) + 1`` (likewise for W).
    """
    ph, pw = _pair(pad)
    _check_dw(x.shape, k.shape, stride, ph, pw)
    if isinstance(k, QuantizedTensor):
        return Tensor(int8_dwconv(x.data, k, stride, ph, pw))
    xd, kd = x.data, k.data

    def bwd(g):
        gx = dw_conv_adjoint_kernel(g, kd, stride, ph, pw, xd.shape[2:])
        return gx, _dw_kernel_grad(g, xd, kd.shape, stride, ph, pw)

    return make_op("depthwise_conv2d", dw_conv_kernel(xd, kd, stride, ph, pw), (x, k), bwd)


def depthwise_conv2d_transposed(x: Tensor, k, stride: int = 1, pad=0,
                                output_size: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of :func:`depthwise_conv2d` for the same ``(k, stride, pad)``.

    The output spatial size defaults to ``(Ho - 1) * stride + kh - 2p``;
    pass ``output_size`` to pick another size consistent with the forward
    shape rule.
    """
    ph, pw = _pair(pad)
    if x.ndim != 4 or k.ndim != 3 or k.shape[0] != x.shape[1]:
        raise DimensionError(f"transposed conv: input {x.shape} vs kernel {k.shape}")
    Ho, Wo = x.shape[2:]
    kh, kw = k.shape[1:]
    if output_size is None:
        output_size = ((Ho - 1) * stride + kh - 2 * ph, (Wo - 1) * stride + kw - 2 * pw)
    H, W = output_size
    if H < 1 or W < 1 or conv_output_size(H, kh, stride, ph) != Ho \
            or conv_output_size(W, kw, stride, pw) != Wo:
        raise DimensionError(
            f"transposed conv: output {output_size} inconsistent with input {(Ho, Wo)}")
    _check_dw((x.shape[0], x.shape[1], H, W), k.shape, stride, ph, pw)
    if isinstance(k, QuantizedTensor):
        return Tensor(int8_dwconv_transposed(x.data, k, stride, ph, pw, (H, W)))
    xd, kd = x.data, k.data

    def bwd(g):
        gx = dw_conv_kernel(g, kd, stride, ph, pw)
        return gx, _dw_kernel_grad(xd, g, kd.shape, stride, ph, pw)

    out = dw_conv_adjoint_kernel(xd, kd, stride, ph, pw, (H, W))
    return make_op("depthwise_conv2d_transposed", np.ascontiguousarray(out), (x, k), bwd)


# ---------------------------------------------------------------------------
# Normalization, activations, regularization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance) then apply ``gamma``, ``beta``."""
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from ``erf``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),

    return make_op("gelu", (xd * cdf).astype(xd.dtype, copy=False), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True))),

    return make_op("softmax", y, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True)),

    return make_op("log_softmax", y, (x,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of ``-ln softmax(logits)[label]``.

    ``logits`` is (B, K); ``labels`` holds integer class ids in ``[0, K)``.
    """
    from .errors import InputError

    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits, axis=-1)
    B = logits.shape[0]
    rows = np.arange(B)
    lp = logp.data
    loss = np.asarray(-lp[rows, labels].sum() / B, dtype=logits.dtype)

    def bwd(g):
        gl = np.zeros_like(lp)
        gl[rows, labels] = -g / B
        return (gl,)

    return make_op("cross_entropy", loss, (logp,), bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None
            ) -> Tensor:
    """Inverted dropout: kept entries are divided by ``1 - p``; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng stream")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))
