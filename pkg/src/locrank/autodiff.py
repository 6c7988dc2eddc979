"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable primitive used by the networks and losses lives here.
A :class:`Tensor` wraps a numpy array; operations on tensors that require
gradients record their parents and a backward closure, and
:meth:`Tensor.backward` replays those closures in reverse topological order.

Spatial ops (``conv2d``, ``maxpool2d``) accept a single ``[C, H, W]`` image
or a ``[N, C, H, W]`` batch; ``linear`` and ``concat`` accept ``[D]`` or
``[N, D]``. Apart from those leading batch axes there is no broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NonFiniteError, UsageError

__all__ = [
    "Tensor",
    "Graph",
    "GradCheckReport",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "tsum",
    "reshape",
    "conv2d",
    "maxpool2d",
    "relu",
    "linear",
    "concat",
    "stack",
    "softplus",
    "clip",
    "grad_scale",
    "detach",
    "check_gradient",
    "grad_check",
]


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "kink")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = name or "leaf"
        # discrete state of piecewise ops (relu masks, argmax, floor indices);
        # used to tell whether a finite-difference probe straddled a kink
        self.kink: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor into every reachable leaf."""
        Graph(self).backward(grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _index(self, key)

    # numpy must not try to treat Tensor as an array-like in mixed expressions
    __array_priority__ = 1000


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str, kink=None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.kink = kink
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


class Graph:
    """Topologically ordered view of the computation behind one output."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = _toposort(output)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def zero_grad(self) -> None:
        for n in self.nodes:
            n.grad = None

    def backward(self, grad=None) -> None:
        out = self.output
        if grad is None:
            if out.data.size != 1:
                raise UsageError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(out.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != out.shape:
            raise ConfigurationError(f"seed gradient shape {grad.shape} != output shape {out.shape}")
        if not out.requires_grad:
            return
        for n in self.nodes:
            if not n.is_leaf:
                n.grad = None
        _accum(out, grad)
        for n in reversed(self.nodes):
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)
        for leaf in self.leaves:
            if leaf.grad is not None:
                _check_finite(leaf.grad, "backward")

    def kink_signature(self) -> tuple[bytes, ...]:
        return tuple(np.ascontiguousarray(n.kink).tobytes() for n in self.nodes if n.kink is not None)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- elementwise -----------------------------------------------------------


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        b = as_tensor(b)
        return Tensor(np.full(b.shape, float(a))), b
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        a = as_tensor(a)
        return a, Tensor(np.full(a.shape, float(b)))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    return _node(np.array(a.data.sum()), (a,), lambda g: _accum(a, np.full(a.shape, float(g))), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _node(out.copy(), (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def _index(a: Tensor, key) -> Tensor:
    out = np.array(a.data[key], dtype=np.float64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        _accum(a, ga)

    return _node(out, (a,), backward, "index")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ConfigurationError("stack: need at least one tensor")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ConfigurationError(f"stack: shape mismatch {t.shape} vs {shape}")

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return _node(np.stack([t.data for t in tensors]), tensors, backward, "stack")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask), "relu", kink=mask)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(0.0, x.data)

    def backward(g):
        _accum(x, g * _sigmoid(x.data))

    return _node(out, (x,), backward, "softplus")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: _accum(x, g * inside), "clip", kink=inside)


def grad_scale(x: Tensor, factors) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``factors``.

    ``factors`` must broadcast against ``x`` (e.g. one factor per trailing
    component).
    """
    factors = np.asarray(factors, dtype=np.float64)
    try:
        np.broadcast_shapes(factors.shape, x.shape)
    except ValueError as exc:
        raise ConfigurationError(f"grad_scale: factors {factors.shape} vs input {x.shape}") from exc
    return _node(x.data.copy(), (x,), lambda g: _accum(x, g * factors), "grad_scale")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


# -- layers ----------------------------------------------------------------


def _as_batch(x: Tensor, spatial_rank: int, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == spatial_rank:
        return x.data[None], False
    if x.ndim == spatial_rank + 1:
        return x.data, True
    raise ConfigurationError(f"{op}: expected {spatial_rank}-D or batched input, got shape {x.shape}")


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weights`` (valid, plus optional zero padding)."""
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    xd, batched = _as_batch(x, 3, "conv2d")
    if weights.ndim != 4:
        raise ConfigurationError(f"conv2d: weights must be [C_out, C_in, kH, kW], got {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if xd.shape[1] != c_in:
        raise ConfigurationError(f"conv2d: input has {xd.shape[1]} channels, weights expect C_in={c_in}")
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != (C_out={c_out},)")
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, h, w = xd.shape
    if kh > h or kw > w:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} larger than (padded) input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    # im2col: one row per output position, built once and reused by backward
    cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    w2d = weights.data.reshape(c_out, -1)
    out = (cols @ w2d.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        g2d = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if bias.requires_grad:
            _accum(bias, g2d.sum(axis=0))
        if weights.requires_grad:
            _accum(weights, (g2d.T @ cols).reshape(weights.shape))
        if x.requires_grad:
            dcols = (g2d @ w2d).reshape(n, ho, wo, c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dx = np.zeros((n, c_in, h, w))
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        dcols[:, :, i, j]
                    )
            if padding:
                dx = dx[:, :, padding:-padding, padding:-padding]
            _accum(x, dx if batched else dx[0])

    return _node(np.ascontiguousarray(out), (x, weights, bias), backward, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over k x k windows; ties send the gradient to the first element in row-major order."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ConfigurationError(f"maxpool2d: window and stride must be >= 1 (got {k}, {stride})")
    xd, batched = _as_batch(x, 3, "maxpool2d")
    n, c, h, w = xd.shape
    if k > h or k > w:
        raise ConfigurationError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    # scan window offsets in row-major order; strict '>' keeps the first maximum
    out = None
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        view = xd[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
        if out is None:
            out = view.copy()
            continue
        better = view > out
        out = np.maximum(out, view)
        arg = np.where(better, idx, arg)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
        flat = (base * h + rows) * w + cols
        dx = np.bincount(flat.ravel(), weights=gb.ravel(), minlength=n * c * h * w).reshape(n, c, h, w)
        _accum(x, dx if batched else dx[0])

    return _node(out, (x,), backward, "maxpool2d", kink=arg)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """y = W x + b for a single vector or each row of a batch."""
    if weights.ndim != 2 or x.ndim not in (1, 2):
        raise ConfigurationError(f"linear: bad ranks, input {x.shape}, weights {weights.shape}")
    d_out, d_in = weights.shape
    if x.shape[-1] != d_in:
        raise ConfigurationError(f"linear: input has {x.shape[-1]} features, weights expect D_in={d_in}")
    if bias.shape != (d_out,):
        raise ConfigurationError(f"linear: bias shape {bias.shape} != (D_out={d_out},)")
    out = x.data @ weights.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ weights.data)
        if weights.requires_grad:
            _accum(weights, np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data)
        if bias.requires_grad:
            _accum(bias, g if x.ndim == 1 else g.sum(axis=0))

    return _node(out, (x, weights, bias), backward, "linear")


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (feature) axis."""
    if a.ndim != b.ndim or a.ndim not in (1, 2) or a.shape[:-1] != b.shape[:-1]:
        raise ConfigurationError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    da = a.shape[-1]

    def backward(g):
        _accum(a, g[..., :da])
        _accum(b, g[..., da:])

    return _node(np.concatenate([a.data, b.data], axis=-1), (a, b), backward, "concat")


# -- finite-difference verification -----------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_probed: int
    n_skipped: int


REL_ERROR_FLOOR = 1e-12


def _rel_error(analytic: float, numeric: float, floor: float = REL_ERROR_FLOOR) -> float:
    if analytic == 0.0 and numeric == 0.0:
        return 0.0
    return abs(analytic - numeric) / max(floor, abs(analytic) + abs(numeric))


def check_gradient(
    fn: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
    skip_kinks: bool = True,
    floor: float = REL_ERROR_FLOOR,
) -> GradCheckReport:
    """Compare the analytic gradient of ``fn()`` w.r.t. ``param`` to central differences.

    ``fn`` must rebuild the graph from ``param`` on every call. With
    ``skip_kinks`` a probe is dropped when the discrete state of any
    piecewise op (relu mask, pooling argmax, sampling cell, clamp) differs
    between the +step and -step evaluations, since the central difference
    then spans a non-differentiable point.

    The error per probe is ``|a - n| / max(floor, |a| + |n|)``.
    """
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    if not param.requires_grad:
        raise UsageError("param must be a leaf with requires_grad=True")
    param.grad = None
    out = fn()
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar output, got shape {out.shape}")
    graph = Graph(out)
    graph.backward()
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()

    if indices is None:
        indices = list(np.ndindex(*param.shape))
    worst, probed, skipped = 0.0, 0, 0
    for idx in indices:
        idx = tuple(idx)
        orig = param.data[idx]
        param.data[idx] = orig + step
        up = fn()
        param.data[idx] = orig - step
        down = fn()
        param.data[idx] = orig
        if skip_kinks and Graph(up).kink_signature() != Graph(down).kink_signature():
            skipped += 1
            continue
        numeric = (up.item() - down.item()) / (2.0 * step)
        worst = max(worst, _rel_error(float(analytic[idx]), numeric, floor))
        probed += 1
    return GradCheckReport(worst, probed, skipped)


def grad_check(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return check_gradient(fn, param, step, **kwargs).max_rel_error
