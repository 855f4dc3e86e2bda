"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine records a tape of :class:`Node` objects as forward operations
execute and walks it backwards on :func:`backward`.  It deliberately supports
only the operation set the toy detector needs, plus a gradient-routing
primitive (:func:`route_view` / :func:`stop_and_route`) used to pass or block
gradients between network branches without touching forward values.

Conventions:

* all values are 64-bit floats, row-major;
* no broadcasting except scalar-with-tensor (detector shapes are explicit);
* gradients accumulate into ``Tensor.grad`` across repeated backward calls;
* convolution lowers to im2col + a single GEMM, adequate at desk scale.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Node",
    "Parameter",
    "ShapeMismatchError",
    "ContractViolationError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "silu",
    "sigmoid",
    "softplus",
    "absolute",
    "reshape",
    "concat",
    "slice_",
    "reduce_sum",
    "reduce_mean",
    "bce_with_logits",
    "detach",
    "route_view",
    "stop_and_route",
    "backward",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class ContractViolationError(ValueError):
    """Raised when an operation is called outside its contract."""


# Recording can be suspended for frozen-parameter evaluation.
_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One recorded operation: op tag, input tensors, output, backward rule.

    ``backward_fn`` maps the gradient at the output to a tuple of gradients,
    one per input (``None`` where no gradient flows).
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.output.grad

    def __repr__(self):
        return f"Node({self.op}, inputs={len(self.inputs)})"


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolationError(
                f"item() on tensor of shape {self.data.shape}"
            )
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; sub/neg compose the primitive set
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named trainable tensor with its momentum buffer.

    The gradient accumulator lives on ``value.grad``; it is zeroed between
    optimizer steps and accumulated into by every backward pass in between.
    """

    __slots__ = ("name", "value", "momentum")

    def __init__(self, name: str, data):
        self.name = name
        self.value = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self.momentum = np.zeros_like(self.value.data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr):
        self.value.data = np.asarray(arr, dtype=np.float64)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording a Node when gradients are on."""
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad or t.node is not None for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), out, backward_fn)
    return out


def _as_scalar(other) -> Optional[float]:
    """Return a python float if ``other`` is scalar-like, else None."""
    if isinstance(other, (int, float, np.floating, np.integer)):
        return float(other)
    if isinstance(other, Tensor) and other.data.ndim == 0:
        return None  # scalar tensor: handled as tensor so it can carry grad
    return None


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(op, f"operand shapes {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a python scalar or a 0-d tensor."""
    s = _as_scalar(b)
    if s is not None:
        out = a.data + s
        return _record("add", (a,), out, lambda g: (g,))
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.data.ndim == 0 and b.data.ndim > 0:
        a, b = b, a
    if b.data.ndim == 0:
        out = a.data + b.data

        def bw_scalar(g):
            return (g, np.asarray(np.sum(g)))

        return _record("add", (a, b), out, bw_scalar)
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    """a - b, composed from add and scalar negate."""
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -float(b))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar or a 0-d tensor."""
    s = _as_scalar(b)
    if s is not None:
        out = a.data * s
        return _record("mul", (a,), out, lambda g: (g * s,))
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.data.ndim == 0 and b.data.ndim > 0:
        a, b = b, a
    if b.data.ndim == 0:
        out = a.data * b.data
        ad, bd = a.data, b.data

        def bw_scalar(g):
            return (g * bd, np.asarray(np.sum(g * ad)))

        return _record("mul", (a, b), out, bw_scalar)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (m,k) @ (k,n)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError("matmul", f"expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError("matmul", f"inner dims {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T, ad.T @ g)

    return _record("matmul", (a, b), ad @ bd, bw)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = _sigmoid(x.data)
    out = x.data * sig
    xd = x.data

    def bw(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _record("silu", (x,), out, bw)


def sigmoid(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)

    def bw(g):
        return (g * sig * (1.0 - sig),)

    return _record("sigmoid", (x,), sig, bw)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) with overflow-safe evaluation."""
    out = np.logaddexp(0.0, x.data)
    sig = _sigmoid(x.data)

    def bw(g):
        return (g * sig,)

    return _record("softplus", (x,), out, bw)


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    xd = x.data

    def bw(g):
        return (g * np.sign(xd),)

    return _record("abs", (x,), np.abs(xd), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeMismatchError("reshape", f"cannot reshape {x.data.shape} to {shape}")
    in_shape = x.data.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (x,), x.data.reshape(shape), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractViolationError("concat of empty sequence")
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeMismatchError("concat", f"rank mismatch {tensors[0].data.shape} vs {t.data.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bw)


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices); gradient scatters back into zeros."""
    out = x.data[key]
    in_shape = x.data.shape

    def bw(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[key] = g
        return (gx,)

    return _record("slice", (x,), np.array(out, copy=True), bw)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    in_shape = x.data.shape
    out = np.asarray(np.sum(x.data, axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g_exp = np.expand_dims(g, axes)
        return (np.broadcast_to(g_exp, in_shape).copy(),)

    return _record("reduce_sum", (x,), out, bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    in_shape = x.data.shape
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([in_shape[a] for a in axes]))
    out = np.asarray(np.mean(x.data, axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, in_shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g_exp = np.expand_dims(g / count, axes)
        return (np.broadcast_to(g_exp, in_shape).copy(),)

    return _record("reduce_mean", (x,), out, bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout, via im2col + GEMM.

    x: (N, Cin, H, W), w: (Cout, Cin, kh, kw), bias: (Cout,) or None.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError("conv2d", f"x {x.data.shape}, w {w.data.shape}; expects 4-D NCHW / OIHW")
    n, cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeMismatchError("conv2d", f"input channels {cin} vs weight channels {cin_w}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeMismatchError("conv2d", f"bias shape {bias.data.shape}, expected ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError("conv2d", f"empty output for input {x.data.shape}, kernel {w.data.shape}, "
                                           f"stride {stride}, padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # im2col: every receptive field flattened to a row, one GEMM total
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # (N, Cin, Ho, Wo, kh, kw)
    patches = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    patches = patches.reshape(n * ho * wo, cin * kh * kw)
    w2d = w.data.reshape(cout, cin * kh * kw)
    out_rows = patches @ w2d.T
    if bias is not None:
        out_rows += bias.data
    out = np.ascontiguousarray(
        out_rows.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    hp, wp = h + 2 * padding, wid + 2 * padding
    # leaf inputs (e.g. the image batch) never receive gradient; skip the scatter
    need_gx = x.requires_grad or x.node is not None

    def bw(g):
        # g: (N, Cout, Ho, Wo)
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = (gl.T @ patches).reshape(cout, cin, kh, kw)
        gx = None
        if need_gx:
            gpatch = (gl @ w2d).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gx_pad = np.zeros((n, cin, hp, wp), dtype=np.float64)
            # scatter patch gradients back; overlapping taps accumulate
            for u in range(kh):
                for v in range(kw):
                    gx_pad[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += \
                        gpatch[:, :, :, :, u, v]
            gx = gx_pad
            if padding:
                gx = np.ascontiguousarray(gx[:, :, padding:hp - padding, padding:wp - padding])
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record("conv2d", inputs, out, bw)


# ---------------------------------------------------------------------------
# losses built from primitives
# ---------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy over every entry, from raw logits.

    Uses the identity  -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - x*y,
    which stays finite for any logit magnitude.
    """
    _check_same_shape("bce_with_logits", logits, targets)
    per_entry = sub(softplus(logits), mul(logits, targets))
    return reduce_mean(per_entry)


# ---------------------------------------------------------------------------
# gradient routing
# ---------------------------------------------------------------------------


def detach(x: Tensor) -> Tensor:
    """A view of ``x`` that shares data but never passes gradient."""
    out = Tensor(x.data)
    return out


def stop_and_route(input_index: int, output_index: int) -> int:
    """Gradient pass coefficient for a branch pair: 1 iff indices match.

    Inputs are the two branch feature maps (0, 1); outputs are the two
    per-branch consumers plus the fusion consumer (0, 1, 2).  Forward values
    are unaffected by the coefficient; only the backward path is gated.
    """
    if input_index not in (0, 1):
        raise ContractViolationError(f"input index {input_index} not in {{0, 1}}")
    if output_index not in (0, 1, 2):
        raise ContractViolationError(f"output index {output_index} not in {{0, 1, 2}}")
    return 1 if input_index == output_index else 0


def route_view(x: Tensor, pass_gradient: int) -> Tensor:
    """Forward-identity view of ``x`` that passes gradient iff the flag is 1."""
    if pass_gradient not in (0, 1):
        raise ContractViolationError(f"pass coefficient {pass_gradient} not in {{0, 1}}")
    if pass_gradient:
        return _record("route", (x,), x.data, lambda g: (g,))
    return detach(x)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Tensors reachable from ``root`` through recorded nodes, children first."""
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, seed: Optional[np.ndarray] = None):
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor.

    ``loss`` must be scalar (size 1) unless an explicit ``seed`` gradient of
    the loss shape is given.  Calling repeatedly without zeroing accumulates,
    so one tape can serve a multi-term objective.
    """
    if seed is None:
        if loss.data.size != 1:
            raise ContractViolationError(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.data.shape:
            raise ShapeMismatchError("backward", f"seed shape {seed.shape} vs loss {loss.data.shape}")

    order = _topo_order(loss)
    grads: dict = {id(loss): seed}

    for t in reversed(order):
        g = grads.get(id(t))
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None:
                continue
            if not (inp.requires_grad or inp.node is not None):
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    return expit(x)
