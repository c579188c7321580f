"""Dense tensors with reverse-mode automatic differentiation.

The operator set is exactly what the segmentation network needs: 2-D
convolution (strided/dilated), 2x2 max/average pooling, nearest-neighbour
upsampling, channel concatenation, ReLU, sigmoid, per-pixel channel
softmax, and a handful of elementwise/reduction primitives used to
compose losses and the mixed pooling blend.

Every operation is pure: inputs are never mutated and identical inputs
produce bitwise-identical outputs. Gradients flow through an implicit
tape: each output tensor carries a `Node` recording its parents and the
backward rule, and `backward` replays the reachable subgraph once in
reverse topological order, summing gradients over fan-out.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "no_grad",
    "conv2d",
    "conv2d_relu",
    "conv2d_reference",
    "max_pool2",
    "avg_pool2",
    "mixed_pool2",
    "upsample_nearest2",
    "concat_channels",
    "relu",
    "sigmoid",
    "softmax_channels",
    "add",
    "sub",
    "mul",
    "tensor_sum",
    "backward",
    "grad_check",
    "kink_safe_uniform",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    """One recorded operation: parents, output, and its backward rule."""

    __slots__ = ("op_name", "inputs", "output", "backward_fn")

    def __init__(self, op_name: str, inputs: tuple["Tensor", ...],
                 output: "Tensor", backward_fn: Callable):
        self.op_name = op_name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Dense n-d float array with an optional gradient slot.

    4-D data uses (batch, channel, height, width) layout. Values are
    float64 unless float32 data is passed in explicitly; gradient checks
    and training run in float64.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op_name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op_name, inputs, out, backward_fn)
    return out


class Graph:
    """Topologically ordered record of the operations reaching a root."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(order)
        stack: list[tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.inputs:
                if parent.node is not None and id(parent.node) not in seen:
                    stack.append((parent.node, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients are assigned fresh on each call; fan-out within the graph is
    summed. Tensors with requires_grad=False act as detached constants.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    graph = Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        loss.grad = grads[id(loss)]
    for node in reversed(graph.nodes):
        out_grad = grads.get(id(node.output))
        if out_grad is None:
            continue
        input_grads = node.backward_fn(out_grad)
        for parent, g in zip(node.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            parent.grad = grads[key]


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(extent: int, k: int, stride: int, padding: int,
                     dilation: int) -> int:
    return (extent + 2 * padding - ((k - 1) * dilation + 1)) // stride + 1


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor, stride: int,
                     padding: int, dilation: int) -> tuple[int, int]:
    if stride < 1 or dilation < 1:
        raise ValueError(
            f"stride and dilation must be positive, got stride={stride} "
            f"dilation={dilation}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got input shape "
            f"{x.data.shape} and kernel shape {weight.data.shape}")
    n, c_in, h, w = x.data.shape
    c_out, kc, kh, kw = weight.data.shape
    if kc != c_in:
        raise ValueError(
            f"kernel input channels {kc} do not match input channels "
            f"{c_in} (input shape {x.data.shape}, kernel shape "
            f"{weight.data.shape})")
    if bias.data.shape != (c_out,):
        raise ValueError(
            f"bias shape {bias.data.shape} does not match output channels "
            f"({c_out},)")
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    if h + 2 * padding < eff_h or w + 2 * padding < eff_w:
        raise ValueError(
            f"padded input {h + 2 * padding}x{w + 2 * padding} smaller than "
            f"effective kernel {eff_h}x{eff_w}")
    oh = _conv_out_extent(h, kh, stride, padding, dilation)
    ow = _conv_out_extent(w, kw, stride, padding, dilation)
    return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, *, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation (no kernel flip) of an NCHW batch.

    Output extent: floor((H + 2*padding - ((kh-1)*dilation + 1))/stride) + 1.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    oh, ow = _check_conv_args(x, weight, bias, stride, padding, dilation)
    n = x.data.shape[0]
    c_out = weight.data.shape[0]
    out = np.empty((n, c_out, oh, ow), dtype=x.data.dtype)
    _kernels.conv2d_forward(x.data, weight.data, bias.data, stride, padding,
                            dilation, out)

    def backward_fn(g: np.ndarray):
        g = np.ascontiguousarray(g)
        dx = dw = db = None
        if x.requires_grad:
            dx = np.empty_like(x.data)
            _kernels.conv2d_backward_input(g, weight.data, stride, padding,
                                           dilation, dx)
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            _kernels.conv2d_backward_weight(x.data, g, stride, padding,
                                            dilation, dw)
        if bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _record("conv2d", (x, weight, bias), out, backward_fn)


def conv2d_relu(x: Tensor, weight: Tensor, bias: Tensor, *, stride: int = 1,
                padding: int = 0, dilation: int = 1) -> Tensor:
    """relu(conv2d(...)) computed in one kernel pass.

    Bitwise-identical to composing the two operations; exists because the
    network applies ReLU after every convolution and the fused form skips
    a full read/write of the activation map.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    oh, ow = _check_conv_args(x, weight, bias, stride, padding, dilation)
    n = x.data.shape[0]
    c_out = weight.data.shape[0]
    out = np.empty((n, c_out, oh, ow), dtype=x.data.dtype)
    _kernels.conv2d_forward(x.data, weight.data, bias.data, stride, padding,
                            dilation, out, apply_relu=True)

    def backward_fn(g: np.ndarray):
        # conv output > 0 exactly where the pre-activation was > 0;
        # g can be a channel-slice view, so make it contiguous first
        g = np.ascontiguousarray(g)
        gm = np.empty_like(g)
        _kernels.relu_backward(out.reshape(-1), g.reshape(-1),
                               gm.reshape(-1))
        dx = dw = db = None
        if x.requires_grad:
            dx = np.empty_like(x.data)
            _kernels.conv2d_backward_input(gm, weight.data, stride, padding,
                                           dilation, dx)
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            _kernels.conv2d_backward_weight(x.data, gm, stride, padding,
                                            dilation, dw)
        if bias.requires_grad:
            db = gm.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _record("conv2d_relu", (x, weight, bias), out, backward_fn)


def conv2d_reference(x: Tensor, weight: Tensor, bias: Tensor, *,
                     stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> Tensor:
    """Forward-only naive-loop convolution; bitwise twin of conv2d."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check_conv_args(x, weight, bias, stride, padding, dilation)
    out = _kernels.conv2d_reference(x.data, weight.data, bias.data,
                                    stride, padding, dilation)
    return Tensor(out)


# ---------------------------------------------------------------------------
# pooling and resampling


def _check_pool_input(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op} expects 4-D input, got shape {x.data.shape}")
    h, w = x.data.shape[2], x.data.shape[3]
    if h % 2 or w % 2:
        raise ValueError(
            f"{op} requires even spatial extents, got {h}x{w}; pad the "
            f"input explicitly")


def _planes(data: np.ndarray) -> np.ndarray:
    n, c, h, w = data.shape
    return np.ascontiguousarray(data).reshape(n * c, h, w)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first window
    element in row-major order."""
    x = _as_tensor(x)
    _check_pool_input(x, "max_pool2")
    n, c, h, w = x.data.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.data.dtype)
    code = np.empty((n * c, h // 2, w // 2), dtype=np.uint8)
    _kernels.max_pool2_forward(_planes(x.data), _planes(out), code)

    def backward_fn(g: np.ndarray):
        dx = np.empty_like(x.data)
        _kernels.pool2_backward_max(_planes(g), code, _planes(dx))
        return (dx,)

    return _record("max_pool2", (x,), out, backward_fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling; backward spreads gradient/4 uniformly."""
    x = _as_tensor(x)
    _check_pool_input(x, "avg_pool2")
    n, c, h, w = x.data.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.data.dtype)
    _kernels.avg_pool2_forward(_planes(x.data), _planes(out))

    def backward_fn(g: np.ndarray):
        dx = np.empty_like(x.data)
        _kernels.avg_pool2_backward(_planes(g), _planes(dx))
        return (dx,)

    return _record("avg_pool2", (x,), out, backward_fn)


def mixed_pool2(x: Tensor, alpha: Tensor) -> Tensor:
    """Convex blend of max and average 2x2 pooling by scalar weight alpha:
    alpha*max_pool2(x) + (1-alpha)*avg_pool2(x), differentiable in both
    x and alpha. At alpha exactly 0 or 1 the result is bitwise equal to
    the corresponding pure pooling."""
    x, alpha = _as_tensor(x), _as_tensor(alpha)
    _check_pool_input(x, "mixed_pool2")
    if alpha.data.size != 1:
        raise ValueError(
            f"mixed_pool2 blend weight must be scalar, got shape "
            f"{alpha.data.shape}")
    n, c, h, w = x.data.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.data.dtype)
    mx = np.empty_like(out)
    av = np.empty_like(out)
    code = np.empty((n * c, h // 2, w // 2), dtype=np.uint8)
    a_val = float(alpha.data.reshape(()))
    _kernels.mixed_pool2_forward(_planes(x.data), a_val, _planes(out),
                                 _planes(mx), _planes(av), code)

    def backward_fn(g: np.ndarray):
        dx = None
        dalpha = None
        parts = np.empty(n * c, dtype=x.data.dtype)
        buf = np.empty_like(x.data)
        _kernels.mixed_pool2_backward(_planes(g), a_val, _planes(mx),
                                      _planes(av), code, _planes(buf), parts)
        if x.requires_grad:
            dx = buf
        if alpha.requires_grad:
            dalpha = np.asarray(parts.sum()).reshape(alpha.data.shape)
        return (dx, dalpha)

    return _record("mixed_pool2", (x, alpha), out, backward_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate each element into a 2x2 block."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(
            f"upsample_nearest2 expects 4-D input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.data.dtype)
    _kernels.upsample2_forward(_planes(x.data), _planes(out))

    def backward_fn(g: np.ndarray):
        dx = np.empty_like(x.data)
        _kernels.upsample2_backward(_planes(g), _planes(dx))
        return (dx,)

    return _record("upsample_nearest2", (x,), out, backward_fn)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack tensors along the channel axis in argument order."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ts = tuple(_as_tensor(t) for t in tensors)
    first = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != first[0] or s[2:] != first[2:]:
            raise ValueError(
                f"concat_channels requires matching batch/spatial extents, "
                f"got {first} and {s}")
    out = np.concatenate([t.data for t in ts], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in ts])

    def backward_fn(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return _record("concat_channels", ts, out, backward_fn)


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out = np.empty_like(x.data)
    _kernels.relu_forward(flat, out.reshape(-1))

    def backward_fn(g: np.ndarray):
        dx = np.empty_like(x.data)
        _kernels.relu_backward(flat, np.ascontiguousarray(g).reshape(-1),
                               dx.reshape(-1))
        return (dx,)

    return _record("relu", (x,), out, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward_fn(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for
    stability; channel sums are 1 to within 1e-12."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(
            f"softmax_channels expects 4-D input, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: np.ndarray):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax_channels", (x,), out, backward_fn)


def _binary_shapes_ok(a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(
        f"elementwise op requires equal shapes or a scalar operand, got "
        f"{a.data.shape} and {b.data.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)  # scalar operand broadcast


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)
    out = a.data + b.data

    def backward_fn(g: np.ndarray):
        return (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape))

    return _record("add", (a, b), out, backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)
    out = a.data - b.data

    def backward_fn(g: np.ndarray):
        return (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape))

    return _record("sub", (a, b), out, backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a, b)
    out = a.data * b.data

    def backward_fn(g: np.ndarray):
        ga = _reduce_to(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.data.shape) if b.requires_grad else None
        return (ga, gb)

    return _record("mul", (a, b), out, backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record("tensor_sum", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# gradient checking


def kink_safe_uniform(rng: np.random.Generator, shape: Sequence[int],
                      margin: float = 0.15) -> np.ndarray:
    """Random values safe for finite-difference probes through relu/max.

    Coarse quantized base values plus a distinct per-element ramp keep all
    elements pairwise separated (no pooling ties within reach of the
    probe step) and `margin` away from zero (no relu kink crossings).
    """
    base = rng.integers(-5, 6, size=shape).astype(np.float64) * 0.2
    ramp = np.linspace(0.0, 0.1, num=int(np.prod(shape)),
                       endpoint=False).reshape(shape)
    x = base + ramp
    return x + margin * np.where(x >= 0, 1.0, -1.0)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], *,
               tolerance: float = 1e-4, step: float = 1e-5,
               seed: int = 0,
               max_elements_per_input: int | None = None) -> dict:
    """Compare reverse-mode gradients of fn(*inputs) to central finite
    differences.

    The output is scalarized by a fixed random projection (a plain sum is
    degenerate for softmax outputs). Relative error per element is
    |a - n| / max(1, |a|, |n|); the report carries the max per input and
    overall. When `max_elements_per_input` is set, a deterministic evenly
    spaced subsample of each input's elements is probed.
    """
    inputs = [_as_tensor(t) for t in inputs]
    probes = []
    for t in inputs:
        t.requires_grad = True
        t.grad = None
        probes.append(t)

    rng = np.random.default_rng(seed)

    out = fn(*probes)
    if not np.all(np.isfinite(out.data)):
        bad = np.argwhere(~np.isfinite(out.data))[0]
        return {
            "passed": False,
            "tolerance": tolerance,
            "max_rel_err": math.inf,
            "per_input": [],
            "failure": f"non-finite output at index {tuple(int(i) for i in bad)}",
        }
    projection = rng.standard_normal(out.data.shape)

    def scalar_loss() -> float:
        value = fn(*probes)
        return float((value.data * projection).sum())

    loss = tensor_sum(mul(fn(*probes), Tensor(projection)))
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in probes]

    per_input = []
    worst = 0.0
    for t, a in zip(probes, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        n_elems = flat.size
        if max_elements_per_input is None or n_elems <= max_elements_per_input:
            indices = range(n_elems)
        else:
            indices = np.linspace(0, n_elems - 1, max_elements_per_input,
                                  dtype=np.int64)
        max_err = 0.0
        for k in indices:
            original = flat[k]
            flat[k] = original + step
            f_plus = scalar_loss()
            flat[k] = original - step
            f_minus = scalar_loss()
            flat[k] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(aflat[k] - numeric) / max(1.0, abs(aflat[k]),
                                                abs(numeric))
            if err > max_err:
                max_err = err
        per_input.append(max_err)
        worst = max(worst, max_err)

    return {
        "passed": worst < tolerance,
        "tolerance": tolerance,
        "max_rel_err": worst,
        "per_input": per_input,
    }
