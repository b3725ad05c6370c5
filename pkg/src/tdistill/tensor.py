"""Dense tensors with reverse-mode automatic differentiation.

Execution is recorded on a tape (``Graph``) in program order; ``backward``
replays it in reverse. Two precision modes exist: float32 (training
default) and float64 (required by gradient checks). Binary operations
never broadcast; shape mismatches raise immediately.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

_DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.dtype(np.float32)


def set_default_dtype(name):
    """Set the global precision mode ("float32" or "float64")."""
    global _default_dtype
    if isinstance(name, str):
        if name not in _DTYPE_NAMES:
            raise ContractError(f"unsupported dtype {name!r}; use float32 or float64")
        _default_dtype = np.dtype(_DTYPE_NAMES[name])
    else:
        dt = np.dtype(name)
        if dt.name not in _DTYPE_NAMES:
            raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
        _default_dtype = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def precision(name):
    """Temporarily switch the global precision mode."""
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(saved)


class Tensor:
    """A dense n-d array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same storage, outside the graph. Do not mutate the result."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Graph:
    """Topologically ordered record of executed operations."""

    def __init__(self):
        self.nodes = []

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_graph_stack = [Graph()]
_grad_enabled = True


def active_graph() -> Graph:
    return _graph_stack[-1]


@contextmanager
def scoped_graph():
    """Push a fresh graph; recorded operations are dropped on exit."""
    g = Graph()
    _graph_stack.append(g)
    try:
        yield g
    finally:
        _graph_stack.pop()
        g.clear()


@contextmanager
def no_grad():
    """Disable recording; operations inside produce constant tensors."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def _result(data, inputs, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_graph().record(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate adjoints of ``loss`` into ``.grad`` of every reachable
    requires_grad tensor. Repeated calls on the same graph accumulate.
    Never mutates existing grad buffers in place."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = active_graph()
    pending = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(graph.nodes):
        gout = pending.pop(id(node.out), None)
        if gout is None:
            continue
        _deposit(node.out, gout)
        for inp, gin in zip(node.inputs, node.backward_fn(gout)):
            if gin is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gin
            else:
                pending[key] = gin
                holders[key] = inp
    for key, g in pending.items():
        if holders[key].requires_grad:
            _deposit(holders[key], g)


def _deposit(t, g):
    t.grad = g if t.grad is None else t.grad + g


def _check_binary(a, b, opname):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError(f"{opname} expects Tensor operands")
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{opname}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    d = a.data
    mask = d > 0
    return _result(np.where(mask, d, d.dtype.type(0)), (a,), lambda g: (np.where(mask, g, g.dtype.type(0)),))


def abs_(a: Tensor) -> Tensor:
    d = a.data
    sign = np.sign(d)  # 0 at 0: the subgradient choice for |.|
    return _result(np.abs(d), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    d = a.data
    return _result(d * d, (a,), lambda g: (g * (2 * d),))


def sigmoid(a: Tensor) -> Tensor:
    d = a.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1 / (1 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1 + ex)
    return _result(out, (a,), lambda g: (g * (out * (1 - out)),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reductions (fixed accumulation order, see kernels)


def sum_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ContractError("sum_all of an empty tensor")
    d = a.data
    v = np.asarray(kernels.serial_sum(np.ascontiguousarray(d).reshape(-1)), dtype=d.dtype)
    return _result(v, (a,), lambda g: (np.full(d.shape, g[()], dtype=d.dtype),))


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ContractError("mean_all of an empty tensor")
    d = a.data
    n = d.dtype.type(d.size)
    s = np.asarray(kernels.serial_sum(np.ascontiguousarray(d).reshape(-1)), dtype=d.dtype)
    return _result(s / n, (a,), lambda g: (np.full(d.shape, g[()] / n, dtype=d.dtype),))


def sum_channels(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,H,W], summing channels in ascending order."""
    if a.data.ndim != 4:
        raise DimensionError(f"sum_channels needs a [N,C,H,W] tensor, got shape {a.shape}")
    if a.data.size == 0:
        raise ContractError("sum_channels of an empty tensor")
    d = np.ascontiguousarray(a.data)
    c = d.shape[1]
    out = kernels.channel_sum(d)

    def bwd(g):
        return (np.repeat(g[:, None, :, :], c, axis=1),)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), NCHW layout."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >=1 and padding >=0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kernel.shape} exceeds padded input {x.shape} (padding={padding})"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if x.data.dtype != kernel.data.dtype:
        raise ContractError(f"conv2d dtype mismatch {x.data.dtype} vs {kernel.data.dtype}")

    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernel.data)
    out = kernels.conv2d_forward(xd, kd, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, kd, stride, padding, h, w) if x.requires_grad else None
        gk = kernels.conv2d_backward_kernel(g, xd, stride, padding, kh, kw) if kernel.requires_grad else None
        if bias is None:
            return (gx, gk)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, bwd)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping average pooling by an integer factor."""
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2d needs a [N,C,H,W] tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if factor < 1:
        raise ContractError(f"avg_pool2d factor must be >=1, got {factor}")
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d: extent {h}x{w} not divisible by factor {factor}")
    f = factor
    d = x.data
    out = d.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    inv = d.dtype.type(1.0 / (f * f))

    def bwd(g):
        return (np.repeat(np.repeat(g * inv, f, axis=2), f, axis=3),)

    return _result(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool needs a [N,C,H,W] tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    d = x.data
    out = d.mean(axis=(2, 3))
    inv = d.dtype.type(1.0 / (h * w))

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], d.shape).copy(),)

    return _result(out, (x,), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[N,Cin] @ [Cin,Cout] (+ bias[Cout])."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear needs 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: {x.shape} is incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return (gx, gw)
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, bwd)


def normalize_l2_per_sample(x: Tensor) -> Tensor:
    """Divide each sample (leading axis) by its flattened L2 norm.

    Samples with exactly zero norm are left untouched (and pass the
    upstream gradient through unchanged).
    """
    d = x.data
    n = d.shape[0]
    flat = d.reshape(n, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    safe = np.where(norms == 0, norms.dtype.type(1), norms)
    yf = flat / safe[:, None]
    out = yf.reshape(d.shape)

    def bwd(g):
        gf = g.reshape(n, -1)
        dots = (gf * yf).sum(axis=1)
        gx = (gf - yf * dots[:, None]) / safe[:, None]
        return (gx.reshape(d.shape),)

    return _result(out, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of [N,K] logits, max-stabilized."""
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax needs [N,K] logits, got shape {x.shape}")
    d = x.data
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy needs [N,K] logits, got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels out of range [0, {k}): min={labels.min()}, max={labels.max()}")
    d = logits.data
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].sum() / n, dtype=d.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g[()] / d.dtype.type(n)),)

    return _result(loss, (logits,), bwd)
