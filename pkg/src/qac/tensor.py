"""Dense float64 tensors with reverse-mode automatic differentiation.

This is the numeric substrate for the whole ranker: a Tensor wraps a numpy
array, remembers which op produced it, and ``backward()`` walks the graph in
reverse topological order accumulating gradients into the leaves. numpy
supplies raw array arithmetic; every differentiable op here registers its own
backward rule.

Design constraints honored throughout:
  * float64 end to end (finite-difference gradient checks need it),
  * masked softmax gives *exactly* zero weight to masked slots,
  * no op produces NaN/Inf from finite inputs (enable_debug_checks() asserts
    this after every forward op),
  * deterministic: no op consumes randomness.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# toggled by enable_debug_checks(); cheap enough to leave on in tests
_debug_checks = False


def enable_debug_checks(on: bool = True) -> None:
    global _debug_checks
    _debug_checks = on


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the op and shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {list(shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype != DEFAULT_DTYPE:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node; accumulates into .grad fields."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape)
            grad = np.ones_like(self.data)
        order = _toposort(self)
        self._accumulate(np.asarray(grad, dtype=DEFAULT_DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # interior activations are one-shot; free their grad eagerly
            if node._backward is not None:
                node.grad = None

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _finite_or_die(op: str, arr: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _finite_or_die(op, data)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), backward)


# -- elementwise ------------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - out * out))

    return _make("tanh", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (x.data > 0.0))

    return _make("relu", out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return _make("exp", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _make("log", out, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / out)

    return _make("sqrt", out, (x,), backward)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward(g):
        x._accumulate(g * 2.0 * x.data)

    return _make("square", out, (x,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    out = np.maximum(x.data, lo)

    def backward(g):
        x._accumulate(g * (x.data > lo))

    return _make("clamp_min", out, (x,), backward)


def clamp_max(x: Tensor, hi: float) -> Tensor:
    out = np.minimum(x.data, hi)

    def backward(g):
        x._accumulate(g * (x.data < hi))

    return _make("clamp_max", out, (x,), backward)


# -- reductions -------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).astype(DEFAULT_DTYPE))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).astype(DEFAULT_DTYPE))

    return _make("sum", np.asarray(out), (x,), backward)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


# -- structural -------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make("reshape", out, (x,), backward)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _make("transpose", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make("concat", out, tensors, backward)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make("getitem", out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (dim,)."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[-1]))
        table._accumulate(full)

    return _make("embedding", out, (table,), backward)


# -- masked ops -------------------------------------------------------------

def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked slots get weight exactly 0.

    ``mask`` is a boolean numpy array broadcastable to ``x.shape`` (True keeps
    a slot). Rows with no valid slot come out all-zero rather than NaN.
    """
    d = x.data
    if mask is None:
        valid = np.ones(d.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    neg = np.where(valid, d, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    ex = np.where(valid, np.exp(d - mx), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    out = ex / np.where(denom == 0.0, 1.0, denom)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        x._accumulate(out * (g - dot))

    return _make("softmax_masked", out, (x,), backward)


def masked_max(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Max over ``axis`` restricted to mask-True slots.

    Slots where the whole axis is masked yield 0 and receive no gradient
    (empty-sequence pooling must stay finite). Gradient goes to the first
    attained maximum, which keeps backward deterministic under ties.
    """
    valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    neg = np.where(valid, x.data, -np.inf)
    mx = neg.max(axis=axis)
    any_valid = valid.any(axis=axis)
    out = np.where(any_valid, mx, 0.0)
    arg = neg.argmax(axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        gsel = np.where(any_valid, g, 0.0)
        np.put_along_axis(
            full, np.expand_dims(arg, axis), np.expand_dims(gsel, axis), axis
        )
        x._accumulate(full)

    return _make("masked_max", out, (x,), backward)


def masked_mean(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Mean over mask-True slots along ``axis``; all-masked rows yield 0."""
    valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape).astype(DEFAULT_DTYPE)
    counts = valid.sum(axis=axis)
    denom = np.where(counts == 0.0, 1.0, counts)
    masked = mul(x, Tensor(valid))
    return mul(sum_(masked, axis=axis), Tensor(1.0 / denom))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with learned gain/bias."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d.shape[-1]).sum(axis=0)
            gain._accumulate(gg)
        if bias.requires_grad:
            gb = g.reshape(-1, d.shape[-1]).sum(axis=0)
            bias._accumulate(gb)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _make("layer_norm", out, (x, gain, bias), backward)


# -- gradient oracle --------------------------------------------------------

def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    refine: bool = True,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``fn`` rebuilds the scalar loss from the current parameter values on every
    call. Returns max over checked entries of
    |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
    The 1e-6 denominator floor turns the metric into an absolute tolerance for
    near-zero gradients: central differences on an O(1) loss carry roundoff
    noise around 1e-11, so entries whose true gradient sits below that cannot
    be resolved in relative terms at all.
    When ``max_entries_per_param`` is given, that many entries are sampled per
    parameter tensor (seeded ``rng`` required for reproducibility); otherwise
    every entry is checked.

    With ``refine`` (default), an entry whose error exceeds 1e-6 is re-probed
    at eps/10 and eps/100 and the smallest error wins. A wrong gradient gives
    an eps-independent mismatch and still gets reported; a probe that merely
    straddled a piecewise-linear boundary (ReLU, max-pool tie) converges to
    the analytic value as the step shrinks, so it stops raising false alarms.
    Probes exactly at such a boundary stay nondifferentiable at every step
    size; random instances hit them with probability zero.
    """
    for p in params:
        p.zero_grad()
    out = fn()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite forward value")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def probe(flat, i, a, step):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data)
        flat[i] = orig - step
        lo = float(fn().data)
        flat[i] = orig
        num = (hi - lo) / (2.0 * step)
        return abs(a - num) / max(1e-6, abs(a) + abs(num))

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                raise ValueError("sampled grad_check needs an rng")
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        aflat = ana.reshape(-1)
        for i in idxs:
            a = float(aflat[i])
            rel = probe(flat, i, a, eps)
            if refine and rel > 1e-6:
                for shrink in (eps / 10.0, eps / 100.0):
                    rel = min(rel, probe(flat, i, a, shrink))
                    if rel <= 1e-6:
                        break
            if rel > worst:
                worst = rel
    return worst
