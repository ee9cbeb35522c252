"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy buffers in row-major order. Binary element-wise ops follow
numpy's trailing-dimension broadcasting: shapes are right-aligned, and each
aligned pair of extents must be equal or one of them must be 1; missing
leading extents behave as 1.

Every op that has at least one input with ``requires_grad`` records its
parents and a closure mapping the output gradient to input gradients. The
graph built this way is the tape; :func:`backward` walks it once in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_dtype = np.dtype(np.float32)


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


def get_dtype() -> np.dtype:
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors.

    Training runs in float32; gradient checks run under
    ``precision(np.float64)``.
    """
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _dtype and op == "leaf":
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="leaf")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_dtype), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(_dtype)
    return Tensor(arr, op="const")


def _result(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise ValueError(f"shapes {a} and {b} are not broadcastable")
        out.append(max(x, y) if min(x, y) != 0 else 0)
    return tuple(reversed(out))


# ---------------------------------------------------------------- elementwise

def _coerce(a, b):
    # plain numbers and arrays take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), op="const")
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), op="const")
    return as_tensor(a), as_tensor(b)


def _binary(a, b, fwd, grads, op):
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    out = fwd(a.data, b.data)

    def bw(g):
        ga, gb = grads(g, a.data, b.data, out)
        return (_unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(gb, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: (g, g), "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: (g, -g), "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: (g * y, g * x), "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: (g / y, -g * o / y), "div")


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch a binary element-wise op by name (add, sub, mul, div)."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown element-wise op {kind!r}")
    return ops[kind](a, b)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a: Tensor) -> Tensor:
    # sign(0) = 0 is the subgradient used at the kink
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    """x for x > 0, ``slope * x`` otherwise (the gradient at 0 is ``slope``)."""
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * slope)
    return _result(out, (a,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _result(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        res = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                res.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return tuple(res)

    return _result(out, ts, bw, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes.

    ``(H, W, C) @ (H, C, W) -> (H, W, W)`` is the batch-wise product used by
    the attention layers. A 2-D right operand is shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"batch extents differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


matmul_batched = matmul


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if a.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax input is not finite")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


softmax_lastdim = softmax


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation on ``(..., H, W, Cin)`` inputs.

    ``weight`` is ``(kh, kw, Cin, Cout)`` with odd kh, kw; stride is 1 and the
    border is zero-padded by ``dilation * (k - 1) / 2`` on each side.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw, cin, cout = weight.shape
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    if x.shape[-1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    H, W = x.shape[-3], x.shape[-2]
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    lead = x.ndim - 3
    xd = x.data
    w = weight.data

    if kh == 1 and kw == 1:
        out = np.matmul(xd, w[0, 0])
        taps = None
    else:
        pad = [(0, 0)] * lead + [(ph, ph), (pw, pw), (0, 0)]
        xp = np.pad(xd, pad)
        taps = []
        out = None
        for i in range(kh):
            for j in range(kw):
                oy, ox = i * dilation, j * dilation
                # a tap that only ever reads padding contributes nothing
                if oy + H <= ph or oy >= ph + H or ox + W <= pw or ox >= pw + W:
                    continue
                taps.append((i, j, oy, ox))
                term = np.matmul(xp[..., oy:oy + H, ox:ox + W, :], w[i, j])
                out = term if out is None else out + term
        if out is None:
            out = np.zeros(x.shape[:-1] + (cout,), dtype=xd.dtype)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) + ((bias,) if bias is not None else ())

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if taps is None:
            if x.requires_grad:
                gx = np.matmul(g, w[0, 0].T)
            if weight.requires_grad:
                gw = np.matmul(xd.reshape(-1, cin).T, g2).reshape(1, 1, cin, cout)
        else:
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
            if weight.requires_grad:
                gw = np.zeros(w.shape, dtype=g.dtype)
            for i, j, oy, ox in taps:
                if x.requires_grad:
                    gxp[..., oy:oy + H, ox:ox + W, :] += np.matmul(g, w[i, j].T)
                if weight.requires_grad:
                    win = xp[..., oy:oy + H, ox:ox + W, :].reshape(-1, cin)
                    gw[i, j] = np.matmul(win.T, g2)
            if x.requires_grad:
                gx = gxp[..., ph:ph + H, pw:pw + W, :]
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb)[:len(parents)]

    return _result(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor) -> dict:
    """Back-propagate from a scalar ``root``.

    Fills ``.grad`` on every leaf that requires a gradient and returns a dict
    mapping those leaves to their gradients. Fan-out gradients accumulate.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _toposort(root)
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def finite_diff_check(f: Callable[..., Tensor], inputs, step: float = 1e-4,
                      max_coords: int | None = None, seed: int = 0, floor: float = 1e-6,
                      refine: int = 2) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar tensor. Each input is a Tensor
    (or array); the check runs in the dtype the inputs already carry. When
    ``max_coords`` is set, that many coordinates per input are sampled with a
    seeded generator instead of sweeping all of them.

    The error at a coordinate is ``|a - n| / max(|a|, |n|, floor)``. The
    floor keeps gradients that are exactly zero in theory (for example a
    bias that a softmax cancels) from turning round-off into large ratios.

    A central difference is only trusted once it has converged: the
    estimates at ``h`` and ``h / 2`` must agree. When they do not, a kink
    (leaky ReLU, a thresholded mask) lies inside the stencil and ``h`` is
    cut tenfold, at most ``refine`` times.
    """
    if isinstance(inputs, (Tensor, np.ndarray)):
        inputs = [inputs]
    base = [np.array(t.data if isinstance(t, Tensor) else t) for t in inputs]
    leaves = [Tensor(b, requires_grad=True, op="leaf") for b in base]
    for leaf, b in zip(leaves, base):
        leaf.data = b.copy()
    out = f(*leaves)
    backward(out)
    f0 = out.item()
    again = f(*[Tensor(b.copy(), op="leaf") for b in base]).item()
    if again != f0:
        raise RuntimeError("function is not deterministic")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for n, (leaf, b) in enumerate(zip(leaves, base)):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(b)
        coords = np.arange(b.size)
        if max_coords is not None and b.size > max_coords:
            coords = rng.choice(b.size, size=max_coords, replace=False)
        for c in coords:
            def central(h):
                vals = []
                for sign in (1.0, -1.0):
                    pert = [x.copy() for x in base]
                    pert[n].flat[c] += sign * h
                    vals.append(f(*[Tensor(p, op="leaf") for p in pert]).item())
                return (vals[0] - vals[1]) / (2 * h)

            h = step
            for _ in range(refine + 1):
                coarse, numeric = central(h), central(h / 2)
                if abs(coarse - numeric) <= 1e-5 * max(abs(coarse), abs(numeric), 1e-4):
                    break
                h /= 10
            a = float(analytic.flat[c])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list:
    """Distinct tensors that require gradients, in first-seen order."""
    seen, out = set(), []
    for t in tensors:
        if t.requires_grad and id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out
