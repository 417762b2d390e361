"""Dense float32 arrays with reverse-mode automatic differentiation.

Gradients are computed by walking the operation graph backwards. Each
operation's backward rule is itself expressed through the primitives in
this module, so running a backward pass with ``create_graph=True`` records
the gradient computation as new graph nodes; differentiating those nodes
again yields second-order gradients (reverse-over-reverse). Storage and
compute are float32; reductions accumulate in float64 before rounding
back, which keeps finite-difference checks stable.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """The engine was driven outside its contract (e.g. non-scalar backward)."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


class no_grad(contextlib.AbstractContextManager):
    """Suspend graph recording; operations compute values only."""

    def __enter__(self):
        self._prev = _recording()
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


_node_counter = itertools.count()


class Node:
    """One recorded operation: id, input tensors, and its backward rule.

    Nodes are appended in creation order (``seq``), which is a topological
    order by construction; a backward pass may append further nodes, which
    is what makes second-order gradients possible.
    """

    __slots__ = ("op", "inputs", "vjp", "seq")

    def __init__(self, op: str, inputs: tuple["Tensor", ...],
                 vjp: Callable[["Tensor"], tuple]):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.seq = next(_node_counter)


class Tensor:
    """A float32 array, optionally tracked on the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
            vjp: Callable[[Tensor], tuple]) -> Tensor:
    out = Tensor(data)
    if _recording() and any(_tracked(t) for t in inputs):
        out.node = Node(op, inputs, vjp)
        out.requires_grad = True
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} "
                         "do not broadcast") from None


def _sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to `shape` (inverse of broadcasting)."""
    if t.data.shape == tuple(shape):
        return t
    extra = t.data.ndim - len(shape)
    axes = tuple(range(extra))
    axes += tuple(extra + i for i, d in enumerate(shape)
                  if d == 1 and t.data.shape[extra + i] != 1)
    out = reduce_sum(t, axis=axes, keepdims=True) if axes else t
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g: Tensor):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g: Tensor):
        return _sum_to(g, a.data.shape), _sum_to(neg(g), b.data.shape)

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g: Tensor):
        return _sum_to(mul(g, b), a.data.shape), _sum_to(mul(g, a), b.data.shape)

    return _result("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out_holder: list[Tensor] = []

    def vjp(g: Tensor):
        out = out_holder[0]
        ga = _sum_to(div(g, b), a.data.shape)
        gb = _sum_to(neg(div(mul(g, out), b)), b.data.shape)
        return ga, gb

    out = _result("div", a.data / b.data, (a, b), vjp)
    out_holder.append(out)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g: Tensor):
        return (neg(g),)

    return _result("neg", -a.data, (a,), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (no graph edge for the scalar)."""
    a = _as_tensor(a)
    c = float(c)

    def vjp(g: Tensor):
        return (scale(g, c),)

    return _result("scale", a.data * np.float32(c), (a,), vjp)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g: Tensor):
        return (mul(g, scale(a, 2.0)),)

    return _result("square", a.data * a.data, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_holder: list[Tensor] = []

    def vjp(g: Tensor):
        return (scale(div(g, out_holder[0]), 0.5),)

    out = _result("sqrt", np.sqrt(a.data), (a,), vjp)
    out_holder.append(out)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_holder: list[Tensor] = []

    def vjp(g: Tensor):
        return (mul(g, out_holder[0]),)

    out = _result("exp", np.exp(a.data), (a,), vjp)
    out_holder.append(out)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g: Tensor):
        return (div(g, a),)

    return _result("log", np.log(a.data), (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_holder: list[Tensor] = []

    def vjp(g: Tensor):
        y = out_holder[0]
        return (mul(g, mul(y, sub(const(1.0), y))),)

    # 1/(1+e^-x) overflows e^-x for very negative x; clip keeps f32 finite
    out = _result("sigmoid", 1.0 / (1.0 + np.exp(-np.clip(a.data, -80.0, 80.0))),
                  (a,), vjp)
    out_holder.append(out)
    return out


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)

    def vjp(g: Tensor):
        return (reshape(g, a.data.shape),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from None
    return _result("reshape", data, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)

    def vjp(g: Tensor):
        return (_sum_to(g, a.data.shape),)

    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.data.shape} -> {shape}") from None
    return _result("broadcast_to", data, (a,), vjp)


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: rank-{a.data.ndim} input {a.data.shape}")

    def vjp(g: Tensor):
        return (transpose2d(g),)

    return _result("transpose2d", np.ascontiguousarray(a.data.T), (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum with float64 accumulation, rounded back to float32."""
    a = _as_tensor(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    in_shape = a.data.shape

    def vjp(g: Tensor):
        if axis is None:
            kept = (1,) * len(in_shape)
        else:
            norm = tuple(ax % len(in_shape) for ax in axis)
            kept = tuple(1 if i in norm else d for i, d in enumerate(in_shape))
        return (broadcast_to(reshape(g, kept), in_shape),)

    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    return _result("reduce_sum", np.asarray(data, dtype=np.float32), (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def vjp(g: Tensor):
        return matmul(g, transpose2d(b)), matmul(transpose2d(a), g)

    return _result("matmul", a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution: three mutually-referencing primitives so that backward rules
# stay differentiable (conv / its input-transpose / its kernel-accumulation)


def _conv_geometry(h: int, w: int, k: int, stride: int):
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max((out_h - 1) * stride + k - h, 0)
    pad_w = max((out_w - 1) * stride + k - w, 0)
    # asymmetric "same" padding puts the extra pixel on the leading edge
    return out_h, out_w, ((pad_h + 1) // 2, pad_h // 2), ((pad_w + 1) // 2, pad_w // 2)


def _im2col(x: np.ndarray, k: int, stride: int, pads) -> np.ndarray:
    (pt, pb), (pl, pr) = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, oh, ow = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3)  # (N, OH, OW, kh, kw, C)
    return np.ascontiguousarray(cols).reshape(n * oh * ow, -1)


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pads, oh: int, ow: int) -> np.ndarray:
    n, h, w, c = x_shape
    (pt, pb), (pl, pr) = pads
    g6 = gcols.reshape(n, oh, ow, k, k, c)
    gxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=np.float32)
    for kh in range(k):
        for kw in range(k):
            gxp[:, kh:kh + stride * oh:stride, kw:kw + stride * ow:stride, :] += g6[:, :, :, kh, kw, :]
    return gxp[:, pt:pt + h, pl:pl + w, :]


def _check_conv_shapes(x: Tensor, kernel: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NHWC, got {x.data.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[0] != kernel.data.shape[1]:
        raise ShapeError(f"conv2d: kernel must be KKCinCout, got {kernel.data.shape}")
    if kernel.data.shape[0] % 2 != 1:
        raise ShapeError(f"conv2d: kernel extent {kernel.data.shape[0]} must be odd")
    if x.data.shape[3] != kernel.data.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.data.shape[3]} != "
                         f"kernel channels {kernel.data.shape[2]}")


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """NHWC convolution, zero-padded so output extent = ceil(extent/stride)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_conv_shapes(x, kernel)
    if padding != "same":
        raise ShapeError(f"conv2d: unsupported padding {padding!r}")
    n, h, w, _ = x.data.shape
    k, _, cin, cout = kernel.data.shape
    oh, ow, ph, pw = _conv_geometry(h, w, k, stride)
    x_shape = x.data.shape

    def vjp(g: Tensor):
        gx = _conv_input_grad(g, kernel, x_shape, stride)
        gk = _conv_kernel_grad(x, g, kernel.data.shape, stride)
        return gx, gk

    cols = _im2col(x.data, k, stride, (ph, pw))
    y = (cols @ kernel.data.reshape(k * k * cin, cout)).reshape(n, oh, ow, cout)
    return _result("conv2d", y, (x, kernel), vjp)


def _conv_input_grad(gy: Tensor, kernel: Tensor, x_shape, stride: int) -> Tensor:
    gy, kernel = _as_tensor(gy), _as_tensor(kernel)
    n, h, w, cin = x_shape
    k, _, _, cout = kernel.data.shape
    oh, ow, ph, pw = _conv_geometry(h, w, k, stride)

    def vjp(g: Tensor):
        # g has the input's shape; the two rules mirror conv2d's bilinearity
        ggy = conv2d(g, kernel, stride)
        gk = _conv_kernel_grad(g, gy, kernel.data.shape, stride)
        return ggy, gk

    gcols = gy.data.reshape(n * oh * ow, cout) @ kernel.data.reshape(k * k * cin, cout).T
    gx = _col2im(gcols, x_shape, k, stride, (ph, pw), oh, ow)
    return _result("conv2d_input_grad", gx, (gy, kernel), vjp)


def _conv_kernel_grad(x: Tensor, gy: Tensor, kernel_shape, stride: int) -> Tensor:
    x, gy = _as_tensor(x), _as_tensor(gy)
    n, h, w, cin = x.data.shape
    k, _, _, cout = kernel_shape
    oh, ow, ph, pw = _conv_geometry(h, w, k, stride)

    def vjp(g: Tensor):
        gx = _conv_input_grad(gy, g, x.data.shape, stride)
        ggy = conv2d(x, g, stride)
        return gx, ggy

    cols = _im2col(x.data, k, stride, (ph, pw))
    gk = (cols.T @ gy.data.reshape(n * oh * ow, cout)).reshape(kernel_shape)
    return _result("conv2d_kernel_grad", gk, (x, gy), vjp)


# ---------------------------------------------------------------------------
# composites


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    if n == 0:
        raise ShapeError(f"mean over empty extent of {a.data.shape}")
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


NORM_EPS = 1e-12  # under the root: keeps the norm differentiable at 0


def l2_norm_rows(a) -> Tensor:
    """Per-row Euclidean norm of a tensor viewed as (rows, features)."""
    a = _as_tensor(a)
    if a.data.ndim == 0:
        raise ShapeError("l2_norm_rows: scalar input")
    rows = a.data.shape[0]
    flat = reshape(a, (rows, -1)) if a.data.ndim > 1 else reshape(a, (rows, 1))
    return sqrt(add(reduce_sum(square(flat), axis=1), const(NORM_EPS)))


def swish(a) -> Tensor:
    """x * sigmoid(x) (beta fixed to 1)."""
    a = _as_tensor(a)
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# backward passes


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, emit = stack.pop()
        if emit:
            order.append(t)
            continue
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            stack.append((inp, False))
    return order


def _backprop(output: Tensor, create_graph: bool) -> dict[int, Tensor]:
    if output.data.size != 1:
        raise UsageError(f"backward requires a scalar output, got shape {output.data.shape}")
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    order = _topo_order(output)
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            for inp, ig in zip(t.node.inputs, t.node.vjp(g)):
                if ig is None or not _tracked(inp):
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else add(prev, ig)
    return grads


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output w.r.t. each tensor in wrt.

    Does not touch ``.grad``. Tensors not on the path get explicit zeros.
    With ``create_graph`` the returned tensors are differentiable again.
    """
    grads = _backprop(output, create_graph)
    return [grads.get(id(w)) or Tensor(np.zeros_like(w.data)) for w in wrt]


def backward(output: Tensor, create_graph: bool = False) -> None:
    """Accumulate gradients into ``.grad`` of every reachable requires_grad leaf."""
    order = _topo_order(output)
    leaves: dict[int, Tensor] = {}
    if output.node is None and output.requires_grad:
        leaves[id(output)] = output
    for t in order:
        for inp in t.node.inputs:
            if inp.node is None and inp.requires_grad:
                leaves[id(inp)] = inp
    grads = _backprop(output, create_graph)
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g if leaf.grad is None else add(leaf.grad, g)
