"""Small define-by-run tensor engine with reverse-mode differentiation.

Tensors hold float64 numpy arrays. Every op returns a new :class:`Tensor` that
remembers its inputs and a closure mapping the output gradient to input
gradients. :func:`backward` walks the graph in reverse topological order.

Only the ops needed by the pulse model, the spectral loss path and the
self-similarity loss are provided.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "apply",
    "backward",
    "topological_order",
    "finite_diff_check",
    "parameter",
    "constant",
]

_ids = itertools.count()

COS_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when input shapes do not conform to an op."""


class Tensor:
    """A node in the computation graph.

    ``parents`` are the input tensors, ``grad_fn`` maps the gradient of this
    node to a tuple of gradients, one per parent (``None`` for parents that do
    not need one).
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.op = op
        self.grad: np.ndarray | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  grad_fn=grad_fn if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), grad_fn, "div")


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar-mul")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), grad_fn, "sqrt")


def maximum(a, floor: float) -> Tensor:
    """Clamp from below at a constant; the gradient is routed where a > floor."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "maximum")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _make(out, (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,), "mean")


def max_(a) -> Tensor:
    """Global maximum; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    idx = int(np.argmax(a.data))

    def grad_fn(g):
        out = np.zeros(a.data.size)
        out[idx] = g
        return (out.reshape(a.shape),)

    return _make(a.data.reshape(-1)[idx], (a,), grad_fn, "max")


def l2_norm(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        n = out if keepdims or axis is None else np.expand_dims(out, axis)
        g = g if keepdims or axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(n > 0, a.data / n, 0.0)
        return (g * d,)

    return _make(out, (a,), grad_fn, "l2-norm")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: needs two equal-length vectors, got {a.shape} and {b.shape}")
    return _make(np.dot(a.data, b.data), (a, b), lambda g: (g * b.data, g * a.data), "dot")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two equal-shape tensors, taken as flat vectors.

    The denominator is clamped below at ``COS_EPS``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine-similarity: shapes {a.shape} and {b.shape} differ")
    x, y = a.data.reshape(-1), b.data.reshape(-1)
    nx, ny = np.sqrt(x @ x), np.sqrt(y @ y)
    denom = nx * ny
    clamped = denom <= COS_EPS
    denom = max(denom, COS_EPS)
    xy = x @ y
    cos = xy / denom

    def grad_fn(g):
        if clamped:
            ga, gb = y / denom, x / denom
        else:
            ga = y / denom - cos * x / (nx * nx)
            gb = x / denom - cos * y / (ny * ny)
        return (g * ga).reshape(a.shape), (g * gb).reshape(b.shape)

    return _make(cos, (a, b), grad_fn, "cosine-similarity")


def softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out / temperature,)

    return _make(out, (a,), grad_fn, "softmax")


def _pad(a: np.ndarray, widths) -> np.ndarray:
    """Zero padding; np.pad's generality costs more than the copy at these sizes."""
    if not any(lo or hi for lo, hi in widths):
        return a
    out = np.zeros(tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, widths)))
    out[tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, widths))] = a
    return out


def conv1d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 1-D convolution (cross-correlation).

    x: (C_in, L), w: (C_out, C_in, K), b: (C_out,). Output (C_out, L + 2p - K + 1).
    Computed as one small matmul per kernel tap, which beats im2col for the
    narrow channel counts used here.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d: input {x.shape} and kernel {w.shape} do not conform")
    c_out, c_in, k = w.shape
    xp = _pad(x.data, ((0, 0), (padding, padding)))
    n_out = xp.shape[1] - k + 1
    if n_out < 1:
        raise ShapeError(f"conv1d: kernel {w.shape} longer than padded input {xp.shape}")
    taps = [np.ascontiguousarray(w.data[:, :, j]) for j in range(k)]
    out = taps[0] @ xp[:, :n_out]
    for j in range(1, k):
        out += taps[j] @ xp[:, j:j + n_out]
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {b.shape} does not match {c_out} output channels")
        out += b.data[:, None]
        parents.append(b)

    def grad_fn(g):
        gw = np.empty(w.shape)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[:, :, j] = g @ xp[:, j:j + n_out].T
            gxp[:, j:j + n_out] += taps[j].T @ g
        grads = [gxp[:, padding:padding + x.shape[1]], gw]
        if b is not None:
            grads.append(g.sum(axis=1))
        return tuple(grads)

    return _make(out, tuple(parents), grad_fn, "conv1d")


def conv2d(x, w, b=None, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Stride-1 2-D convolution.

    x: (C_in, H, W), w: (C_out, C_in, KH, KW), b: (C_out,).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    c_out, c_in, kh, kw = w.shape
    ph, pw = padding
    xp = _pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    h_out, w_out = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    if w_out == 1:
        return _conv2d_full_width(x, w, b, xp, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C_in, h_out, w_out, KH, KW)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    wm = w.data.reshape(c_out, -1)
    out = (wm @ cols).reshape(c_out, h_out, w_out)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {c_out} output channels")
        out = out + b.data[:, None, None]
        parents.append(b)

    def grad_fn(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        grads = [None, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        if not x.requires_grad:
            return tuple(grads)
        gcols = (wm.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h_out, j:j + w_out] += gcols[:, i, j]
        grads[0] = gxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]]
        return tuple(grads)

    return _make(out, tuple(parents), grad_fn, "conv2d")


def _conv2d_full_width(x: Tensor, w: Tensor, b, xp: np.ndarray, ph: int, pw: int) -> Tensor:
    """conv2d whose kernel covers the whole padded width: one matmul per kernel row."""
    c_out, c_in, kh, kw = w.shape
    h_out = xp.shape[1] - kh + 1
    rows = xp.transpose(1, 0, 2).reshape(xp.shape[1], c_in * kw)       # (H_p, C_in*KW)
    wr = [np.ascontiguousarray(w.data[:, :, i, :].reshape(c_out, c_in * kw)) for i in range(kh)]
    acc = rows[:h_out] @ wr[0].T
    for i in range(1, kh):
        acc += rows[i:i + h_out] @ wr[i].T
    out = acc.T.reshape(c_out, h_out, 1)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {c_out} output channels")
        out = out + b.data[:, None, None]
        parents.append(b)

    def grad_fn(g):
        g2 = g.reshape(c_out, h_out)
        gw = np.empty(w.shape)
        for i in range(kh):
            gw[:, :, i, :] = (g2 @ rows[i:i + h_out]).reshape(c_out, c_in, kw)
        grads = [None, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        if x.requires_grad:
            grows = np.zeros_like(rows)
            for i in range(kh):
                grows[i:i + h_out] += g2.T @ wr[i]
            gxp = grows.reshape(xp.shape[1], c_in, kw).transpose(1, 0, 2)
            grads[0] = gxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]]
        return tuple(grads)

    return _make(out, tuple(parents), grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def take(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = _as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index invalid for shape {a.shape}: {exc}") from None

    flat_index = isinstance(index, np.ndarray) and index.dtype.kind in "iu" and a.ndim == 1

    def grad_fn(g):
        if flat_index:
            return (np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=a.size),)
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), grad_fn, "slice")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), grad_fn, "concat")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "conv2d": conv2d,
    "relu": relu,
    "tanh": tanh,
    "mean": mean,
    "sum": sum_,
    "max": max_,
    "l2-norm": l2_norm,
    "dot": dot,
    "cosine-similarity": cosine_similarity,
    "softmax": softmax,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt,
    "maximum": maximum,
    "slice": take,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
}


def apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("matmul", a, b)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Returns a map from node id to gradient and also stores each gradient on
    ``param.grad``. Parameters the loss does not reach get zeros. The graph
    itself is not modified, so several losses sharing one forward pass can be
    differentiated independently.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.id] = np.ones_like(loss.data)
        for node in reversed(topological_order(loss)):
            g = grads.pop(node.id, None) if node.parents else grads.get(node.id)
            if g is None or node.grad_fn is None:
                if g is not None:
                    grads[node.id] = g
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    if params is None:
        return grads
    out = {}
    for p in params:
        g = grads.get(p.id)
        p.grad = np.zeros_like(p.data) if g is None else g
        out[p.id] = p.grad
    return out


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward gradients and central differences.

    ``fn`` rebuilds the graph from the current parameter values and returns a
    scalar tensor. Parameters are perturbed in place and restored. With
    ``coords`` set, only that many randomly chosen coordinates are probed.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("function value is not finite")
    analytic = backward(loss, params)
    targets = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    if coords is not None and coords < len(targets):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(targets), size=coords, replace=False)
        targets = [targets[i] for i in np.sort(pick)]
    worst = 0.0
    for k, i in targets:
        p = params[k]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn().item()
        flat[i] = orig - step
        f_minus = fn().item()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError("function value is not finite")
        numeric = (f_plus - f_minus) / (2.0 * step)
        exact = analytic[p.id].reshape(-1)[i]
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
