"""Dense 4-D tensor engine with reverse-mode automatic differentiation.

Every value is a contiguous (batch, channel, height, width) array of 64-bit
floats. Operations record their inputs and a backward rule on the tensor they
produce, and ``backward`` replays those rules in reverse execution order. The
record is rebuilt on every forward pass, so data-dependent wiring (stochastic
gates, variable batch shapes) needs no special handling.

The op surface is intentionally small: the dilated grouped convolution and
max pooling the network is made of, relu/sigmoid, channel concat/split, a
convex two-tensor mix, and the elementwise arithmetic the losses need. There
is no broadcasting, no views, no striding.

Thread model: a recorded graph and the tensors on it belong to one thread at
a time. Tensors that do not track gradients are never mutated by this module
and are safe to share across threads.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_NODE_IDS = itertools.count()
_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; forwards inside run untracked."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of convolutions run under it."""

    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    """Instrument convolutions: yields a MacCounter tallying kernel MACs.

    Only convolution kernel multiply-accumulates are counted; bias adds and
    activations are not.
    """
    prev = getattr(_STATE, "mac_counter", None)
    counter = MacCounter()
    _STATE.mac_counter = counter
    try:
        yield counter
    finally:
        _STATE.mac_counter = prev


class Tensor:
    """A (N, C, H, W) float64 array with optional gradient tracking.

    ``grad`` is populated only on leaf tensors (those not produced by an
    operation) that have ``requires_grad`` set; repeated backward passes
    accumulate into it additively until ``zero_grads`` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(
                f"tensor data must be 4-D (N, C, H, W), got shape {arr.shape}"
            )
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_NODE_IDS)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    """A 1x1x1x1 tensor holding one number."""
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _op(data: np.ndarray, parents: tuple, backward_rule: Callable) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward_rule
        return out
    return Tensor(data)


# ---------------------------------------------------------------------------
# Recording tape
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TapeEntry:
    input_ids: tuple
    output_id: int
    backward_rule: Callable


class Tape:
    """Execution-ordered record of the operations reachable from a root.

    Node ids increase with creation, and an operation is always created after
    its inputs, so ascending id order is a topological order. Replaying the
    backward rules in reverse id order yields exact reverse-mode gradients.
    """

    def __init__(self, nodes):
        self._nodes = nodes  # op tensors, ascending node_id

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = set()
        ops = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen.add(t.node_id)
            if t._backward is not None:
                ops.append(t)
                stack.extend(t._parents)
        ops.sort(key=lambda t: t.node_id)
        return cls(ops)

    def __len__(self):
        return len(self._nodes)

    @property
    def entries(self) -> list:
        return [
            TapeEntry(tuple(p.node_id for p in t._parents), t.node_id, t._backward)
            for t in self._nodes
        ]

    def replay_backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {root.node_id: seed}
        if root._backward is None:
            _accumulate_leaf(root, seed)
            return
        for t in reversed(self._nodes):
            g = grads.pop(t.node_id, None)
            if g is None:
                continue
            parent_grads = t._backward(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    _accumulate_leaf(p, pg)
                else:
                    acc = grads.get(p.node_id)
                    grads[p.node_id] = pg if acc is None else acc + pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    The loss must be a single-element tensor. Calling backward again without
    zeroing adds the new gradients on top of the old ones.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    Tape.from_root(loss).replay_backward(loss, seed)


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that preserves spatial size at stride 1. Odd kernels only."""
    if kernel % 2 == 0:
        raise ValueError(f"same padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    dilation: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution at stride 1 with square kernels.

    weight has shape (C_out, C_in/groups, k, k); bias, when given, has shape
    (1, C_out, 1, 1). Output spatial size is H + 2*padding - dilation*(k-1).
    """
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.shape
    if weight.data.ndim != 4:
        raise ValueError(f"conv weight must be 4-D, got shape {weight.shape}")
    c_out, c_in_g, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv kernels must be square, got {kh}x{kw}")
    k = kh
    if c % groups != 0:
        raise ValueError(f"input channels {c} not divisible by groups {groups}")
    if c_out % groups != 0:
        raise ValueError(f"output channels {c_out} not divisible by groups {groups}")
    if c // groups != c_in_g:
        raise ValueError(
            f"weight expects {c_in_g} channels per group, input provides {c // groups}"
        )
    span = dilation * (k - 1)
    h_out = h + 2 * padding - span
    w_out = w + 2 * padding - span
    if h_out <= 0 or w_out <= 0:
        raise ValueError(
            f"kernel {k} at dilation {dilation} does not fit a {h}x{w} input "
            f"with padding {padding}"
        )
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ValueError(f"bias must have shape (1, {c_out}, 1, 1), got {bias.shape}")

    counter = getattr(_STATE, "mac_counter", None)
    if counter is not None:
        counter.total += n * c_out * c_in_g * k * k * h_out * w_out

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    xg = xp.reshape(n, groups, c_in_g, hp, wp)

    cols = np.empty((n, groups, c_in_g, k, k, h_out, w_out))
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            cols[:, :, :, i, j] = xg[:, :, :, hi : hi + h_out, wj : wj + w_out]
    cols_m = cols.reshape(n, groups, c_in_g * k * k, h_out * w_out)
    w_g = weight.data.reshape(groups, c_out // groups, c_in_g * k * k)

    out = np.matmul(w_g, cols_m).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out += bias.data

    need_x = x.requires_grad
    need_w = weight.requires_grad
    need_b = bias is not None and bias.requires_grad
    saved_cols = cols_m if need_w else None

    def rule(g: np.ndarray):
        gm = g.reshape(n, groups, c_out // groups, h_out * w_out)
        gx = gw = gb = None
        if need_w:
            gw = (
                np.matmul(gm, saved_cols.transpose(0, 1, 3, 2))
                .sum(axis=0)
                .reshape(weight.shape)
            )
        if need_x:
            gcols = np.matmul(w_g.transpose(0, 2, 1), gm)
            gcols = gcols.reshape(n, groups, c_in_g, k, k, h_out, w_out)
            gxp = np.zeros((n, c, hp, wp))
            gxg = gxp.reshape(n, groups, c_in_g, hp, wp)
            for i in range(k):
                hi = i * dilation
                for j in range(k):
                    wj = j * dilation
                    gxg[:, :, :, hi : hi + h_out, wj : wj + w_out] += gcols[:, :, :, i, j]
            if padding:
                gx = np.ascontiguousarray(
                    gxp[:, :, padding : padding + h, padding : padding + w]
                )
            else:
                gx = gxp
        if need_b:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _op(out, parents, lambda g: rule(g)[:2])
    return _op(out, parents, rule)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Per-window maximum. Gradient routes to the first maximal element in
    row-major window order."""
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be positive")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ValueError(f"pool kernel {kernel} larger than input {h}x{w}")
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1

    windows = np.empty((n, c, h_out, w_out, kernel * kernel))
    idx = 0
    for i in range(kernel):
        for j in range(kernel):
            windows[..., idx] = x.data[
                :, :, i : i + h_out * stride : stride, j : j + w_out * stride : stride
            ]
            idx += 1
    out = windows.max(axis=-1)
    argmax = windows.argmax(axis=-1)

    def rule(g: np.ndarray):
        gi = argmax // kernel
        gj = argmax % kernel
        ni, ci, oh, ow = np.indices((n, c, h_out, w_out), sparse=False)
        hh = oh * stride + gi
        ww = ow * stride + gj
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci, hh, ww), g)
        return (gx,)

    return _op(out, (x,), rule)


# ---------------------------------------------------------------------------
# Pointwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def rule(g):
        return (g * mask,)

    return _op(out, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _op(out, (x,), rule)


def pointwise(x: Tensor, kind: str) -> Tensor:
    """Elementwise non-linearity, kind is "relu" or "sigmoid"."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Channel concat / split and mixing
# ---------------------------------------------------------------------------

def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("channel_concat needs at least one part")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w):
            raise ValueError(
                f"concat parts disagree on (N, H, W): {(n, h, w)} vs {(pn, ph, pw)}"
            )
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _op(out, parts, rule)


def _narrow_channels(x: Tensor, start: int, size: int) -> Tensor:
    data = np.ascontiguousarray(x.data[:, start : start + size])

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[:, start : start + size] = g
        return (gx,)

    return _op(data, (x,), rule)


def channel_split(x: Tensor, sizes: Sequence[int]) -> list:
    """Split along the channel axis; concat of the result is the identity."""
    sizes = list(sizes)
    if any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes must be positive, got {sizes}")
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        outs.append(_narrow_channels(x, start, s))
        start += s
    return outs


def affine_mix(a: Tensor, b: Tensor, gate: float) -> Tensor:
    """gate*a + (1-gate)*b for a scalar gate in [0, 1]."""
    gate = float(gate)
    if not 0.0 <= gate <= 1.0:
        raise ValueError(f"gate must lie in [0, 1], got {gate}")
    if a.shape != b.shape:
        raise ValueError(f"affine_mix shape mismatch: {a.shape} vs {b.shape}")
    out = gate * a.data + (1.0 - gate) * b.data

    def rule(g):
        return (g * gate, g * (1.0 - gate))

    return _op(out, (a, b), rule)


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ValueError(f"{opname} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _op(x.data * s, (x,), lambda g: (g * s,))


def square(x: Tensor) -> Tensor:
    return _op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    return _op(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def rule(g):
        return (g * mask,)

    return _op(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum())

    def rule(g):
        return (np.full(x.shape, g.reshape(())),)

    return _op(out, (x,), rule)
