"""Dense tensors with reverse-mode differentiation.

Storage is a numpy array (float32 for speed runs, float64 for gradient
checks). Every differentiable primitive records its inputs and a backward
rule on the output tensor; ``backward(loss)`` topologically sorts the
recorded graph and accumulates gradients in reverse. The graph is rebuilt
on every forward pass, so repeated forwards over shared read-only
parameters are safe to run concurrently.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive logit penalty for masked attention keys. Large enough that
# exp() underflows to exactly zero after max-subtraction.
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InvalidMaskError(ValueError):
    """A mask leaves a query with no valid key (or an agent with no step)."""


class ContractViolation(ValueError):
    """An operation precondition was violated."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_rule", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_rule: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    grads_needed = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = grads_needed
    if grads_needed:
        out.parents = tuple(parents)
        out.backward_rule = rule
    else:
        out.parents = ()
        out.backward_rule = None
    out.op = op
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise ContractViolation(
                f"mixed dtypes {x.data.dtype} and {like.data.dtype}"
            )
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ----------------------------------------------------------------------
# elementwise primitives
# ----------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), rule, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data - b.data

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), rule, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), rule, "mul")


def neg(a: Tensor) -> Tensor:
    def rule(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _result(-a.data, (a,), rule, "neg")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _result(data, (a,), rule, "exp")


def log(a: Tensor) -> Tensor:
    def rule(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), rule, "log")


def absolute(a: Tensor) -> Tensor:
    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), rule, "abs")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return _result(data, (a,), rule, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GeLU: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * phi

    def rule(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            _accumulate(a, g * (phi + a.data * pdf))

    return _result(data.astype(a.data.dtype, copy=False), (a,), rule, "gelu")


def where(cond: np.ndarray, a: Tensor, b) -> Tensor:
    """Select elementwise by a constant boolean condition."""
    cond = np.asarray(cond, dtype=bool)
    b = _as_tensor(b, a)
    data = np.where(cond, a.data, b.data)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _result(data, (a, b), rule, "where")


# ----------------------------------------------------------------------
# shape primitives
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    old = a.data.shape

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(old))

    return _result(data, (a,), rule, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), rule, "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(index)])

    return _result(data, parts, rule, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    return _result(a.data[index], (a,), rule, "slice")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)

    def rule(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _result(a.data[idx], (a,), rule, "gather_rows")


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    argmax = np.argmax(a.data, axis=axis)

    def rule(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(argmax, axis), g, axis=axis)
        _accumulate(a, full)

    return _result(data, (a,), rule, "max")


# ----------------------------------------------------------------------
# matmul
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``(..., M, K) @ (K, N)`` or ``(..., M, K) @ (..., K, N)``.

    The right operand is either a plain matrix shared across the batch or
    a stack with leading dimensions identical to the left operand's.
    """
    ash, bsh = a.data.shape, b.data.shape
    if a.ndim < 2 or b.ndim < 2 or ash[-1] != bsh[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ash} x {bsh}")
    if b.ndim > 2 and ash[:-2] != bsh[:-2]:
        raise ShapeError(f"matmul: mismatched batch dims {ash} x {bsh}")
    data = a.data @ b.data

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = ash[-1]
                n = bsh[-1]
                ga = a.data.reshape(-1, k)
                gg = g.reshape(-1, n)
                _accumulate(b, ga.T @ gg)
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(data, (a, b), rule, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ----------------------------------------------------------------------
# normalization and softmax
# ----------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if x.data.shape[axis] < 1:
        raise ContractViolation("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(x, (g - inner) * data)

    return _result(data, (x,), rule, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance,
    then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.data.shape}/{bias.data.shape} vs features {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def rule(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gt = g * gain.data
            m1 = gt.mean(axis=-1, keepdims=True)
            m2 = (gt * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (gt - m1 - xhat * m2) * inv)

    return _result(data.astype(x.data.dtype, copy=False), (x, gain, bias), rule, "layer_norm")


# ----------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    hd = d // heads
    x = reshape(x, (*lead, s, heads, hd))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, hd = x.shape
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = transpose(x, axes)
    return reshape(x, (*lead, s, h * hd))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention with masked keys receiving zero weight.

    ``q`` is ``(..., S_q, D)``; ``k``/``v`` are ``(..., S_k, D)`` with the
    same leading dims. ``key_mask`` is boolean ``(..., S_k)``, True = valid.
    Heads are concatenated and passed through the output projection.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    if k.shape != v.shape:
        raise ShapeError(f"key/value shapes differ: {k.shape} vs {v.shape}")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != k.shape[:-1]:
            raise ShapeError(
                f"key_mask shape {key_mask.shape} vs keys {k.shape[:-1]}"
            )
        if not np.all(np.any(key_mask, axis=-1)):
            raise InvalidMaskError("attention received a fully masked key set")

    hd = d // heads
    qh = _split_heads(linear(q, wq, bq), heads)   # (..., H, Sq, hd)
    kh = _split_heads(linear(k, wk, bk), heads)
    vh = _split_heads(linear(v, wv, bv), heads)

    kt = transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))
    scores = mul(matmul(qh, kt), 1.0 / math.sqrt(hd))  # (..., H, Sq, Sk)
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, MASK_FILL).astype(q.data.dtype)
        bias = np.expand_dims(bias, (-3, -2))  # (..., 1, 1, Sk)
        scores = add(scores, Tensor(bias))
    attn = softmax(scores, axis=-1)
    out = _merge_heads(matmul(attn, vh))          # (..., Sq, D)
    return linear(out, wo, bo)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------

class ComputeGraph:
    """Topologically ordered record of the operations reaching a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes)

    def run_backward(self, root: Tensor) -> None:
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.backward_rule is not None and node.grad is not None:
                node.backward_rule(node.grad)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable tensor that
    requires them. Gradient accumulators are reset at the start of the pass."""
    if loss.data.shape != ():
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.data.shape}")
    ComputeGraph.from_root(loss).run_backward(loss)
