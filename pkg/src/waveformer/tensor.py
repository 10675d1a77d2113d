"""
Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous NumPy array. Differentiable ops (see
:mod:`waveformer.ops`) build a graph by attaching to their output the parent
tensors and a closure that maps the output gradient to one gradient per
parent. :func:`backward` walks that graph once in reverse topological order,
accumulating gradients additively across fan-out.

Design notes
------------
- No implicit broadcasting. Elementwise ops require identical shapes; the
  few documented exceptions live in :mod:`waveformer.ops`.
- Gradients accumulate in the dtype of the data (float32 for training,
  float64 for gradient checks).
- Every op output is checked for NaN/Inf; a non-finite result raises
  :class:`~waveformer.errors.NonFiniteError` naming the op.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True
_check_finite = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Temporarily toggle the per-op NaN/Inf check."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values. Integer and boolean input is promoted to float32; float32
        and float64 arrays keep their dtype.
    requires_grad : bool
        Whether :func:`backward` should populate ``grad`` for this tensor.
    name : str, optional
        Label used in diagnostics (parameter names, NaN reports).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self))

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def make_op(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it in the graph.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    if _check_finite and not np.isfinite(data).all():
        names = ", ".join(p.name for p in parents if p.name)
        raise NonFiniteError(op, names or None)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate into any existing ``grad`` (call
    ``zero_grad`` between steps). Intermediate gradients are freed as soon
    as they have been propagated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class RngStreams:
    """Counter-based random streams keyed by (seed, stream name, counter).

    Each stochastic op draws from its own Philox stream, so adding or
    removing unrelated ops never perturbs another op's masks, and a given
    (name, counter) pair always reproduces the same draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str, counter: int = 0) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())], dtype=np.uint64)
        bitgen = np.random.Philox(key=key, counter=np.array([counter, 0, 0, 0], dtype=np.uint64))
        return np.random.Generator(bitgen)
