"""Dense float64 tensor engine with two differentiation modes.

Reverse mode: :class:`Tensor` records a computation graph; :func:`backward`
accumulates d(loss)/d(param) into every reachable parameter tensor.

Forward mode: :class:`DualTensor` carries a (primal, tangent) pair through
the same operations, producing one directional derivative per pass without
storing a graph.

Every op in this module also accepts plain numpy arrays and then evaluates
without any bookkeeping, so a single model implementation can run in raw,
reverse, or forward mode depending on what its inputs are. Mixing Tensor and
DualTensor operands in one op is rejected.

All values are float64. Reductions rely on numpy's fixed evaluation order, so
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import expit

Arrayish = "np.ndarray | float | Tensor | DualTensor"


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operands cannot be combined; carries the op name and the shapes."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(shapes)
        msg = f"{op}: incompatible shapes {' x '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnsupportedOpError(EngineError):
    """An operation outside the supported set was attempted."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"unsupported op {op!r}" + (f": {detail}" if detail else ""))


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Reverse-mode autograd node over a float64 ndarray.

    Leaf tensors created with ``requires_grad=True`` (parameters) receive
    accumulated gradients in ``.grad`` after :func:`backward`. Non-leaf nodes
    propagate but do not retain gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    __array_ufunc__ = None  # force numpy to defer to our dunders

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators route through the module-level dispatch
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class DualTensor:
    """Forward-mode pair (primal, tangent) of equal-shape float64 arrays."""

    __slots__ = ("primal", "tangent")

    __array_ufunc__ = None

    def __init__(self, primal, tangent=None):
        self.primal = _as_f64(primal)
        self.tangent = np.zeros_like(self.primal) if tangent is None else _as_f64(tangent)
        if self.primal.shape != self.tangent.shape:
            raise ShapeError("dual", (self.primal.shape, self.tangent.shape),
                             "primal and tangent must match")

    @property
    def shape(self) -> tuple:
        return self.primal.shape

    def __repr__(self) -> str:
        return f"DualTensor(shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


# ---------------------------------------------------------------------------
# dispatch helpers


def _mode(op: str, args) -> str:
    has_dual = any(isinstance(a, DualTensor) for a in args)
    has_rev = any(isinstance(a, Tensor) for a in args)
    if has_dual and has_rev:
        raise UnsupportedOpError(op, "cannot mix Tensor and DualTensor operands")
    if has_dual:
        return "dual"
    if has_rev:
        return "rev"
    return "raw"


def _raw(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, DualTensor):
        return x.primal
    return _as_f64(x)


def _tan(x) -> np.ndarray | None:
    """Tangent of an operand; None means identically zero (a constant)."""
    return x.tangent if isinstance(x, DualTensor) else None


def _rev_node(data, parents, vjp) -> Tensor:
    live = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, _parents=live, _vjp=vjp)


def _accum(t, g: np.ndarray) -> None:
    if not (isinstance(t, Tensor) and t.requires_grad):
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    mode = _mode("add", (a, b))
    out = _raw(a) + _raw(b)
    if mode == "raw":
        return out
    if mode == "dual":
        ta, tb = _tan(a), _tan(b)
        if ta is None and tb is None:
            tan = np.zeros_like(out)
        elif ta is None:
            tan = np.broadcast_to(tb, out.shape).copy() if tb.shape != out.shape else tb
        elif tb is None:
            tan = np.broadcast_to(ta, out.shape).copy() if ta.shape != out.shape else ta
        else:
            tan = ta + tb
        return DualTensor(out, tan)

    def vjp(g):
        _accum(a, g)
        _accum(b, g)

    return _rev_node(out, (a, b), vjp)


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    mode = _mode("mul", (a, b))
    pa, pb = _raw(a), _raw(b)
    out = pa * pb
    if mode == "raw":
        return out
    if mode == "dual":
        ta, tb = _tan(a), _tan(b)
        tan = np.zeros_like(out)
        if ta is not None:
            tan = tan + ta * pb
        if tb is not None:
            tan = tan + pa * tb
        return DualTensor(out, tan)

    def vjp(g):
        _accum(a, g * pb)
        _accum(b, g * pa)

    return _rev_node(out, (a, b), vjp)


def div(a, b):
    mode = _mode("div", (a, b))
    pa, pb = _raw(a), _raw(b)
    out = pa / pb
    if mode == "raw":
        return out
    if mode == "dual":
        ta, tb = _tan(a), _tan(b)
        tan = np.zeros_like(out)
        if ta is not None:
            tan = tan + ta / pb
        if tb is not None:
            tan = tan - pa * tb / (pb * pb)
        return DualTensor(out, tan)

    def vjp(g):
        _accum(a, g / pb)
        _accum(b, -g * pa / (pb * pb))

    return _rev_node(out, (a, b), vjp)


def matmul(a, b):
    mode = _mode("matmul", (a, b))
    pa, pb = _raw(a), _raw(b)
    if pa.ndim != 2 or pb.ndim != 2 or pa.shape[1] != pb.shape[0]:
        raise ShapeError("matmul", (pa.shape, pb.shape), "expects (n,k) @ (k,m)")
    out = pa @ pb
    if mode == "raw":
        return out
    if mode == "dual":
        ta, tb = _tan(a), _tan(b)
        tan = np.zeros_like(out)
        if ta is not None:
            tan = tan + ta @ pb
        if tb is not None:
            tan = tan + pa @ tb
        return DualTensor(out, tan)

    def vjp(g):
        _accum(a, g @ pb.T)
        _accum(b, pa.T @ g)

    return _rev_node(out, (a, b), vjp)


def _unary(op: str, x, f, dfdx_from):
    """Shared plumbing for elementwise unary ops.

    ``dfdx_from(p, y)`` returns f'(p) given the input p and output y.
    """
    mode = _mode(op, (x,))
    p = _raw(x)
    y = f(p)
    if mode == "raw":
        return y
    if mode == "dual":
        t = _tan(x)
        return DualTensor(y, np.zeros_like(y) if t is None else dfdx_from(p, y) * t)

    def vjp(g):
        _accum(x, g * dfdx_from(p, y))

    return _rev_node(y, (x,), vjp)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda p, y: 1.0 - y * y)


def _sigmoid_raw(p: np.ndarray) -> np.ndarray:
    # scipy's expit is overflow-safe for large |p|
    return expit(p)


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid_raw, lambda p, y: y * (1.0 - y))


def silu(x):
    """x * sigmoid(x), composed from primitives in every mode."""
    return mul(x, sigmoid(x))


def sin(x):
    return _unary("sin", x, np.sin, lambda p, y: np.cos(p))


def cos(x):
    return _unary("cos", x, np.cos, lambda p, y: -np.sin(p))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda p, y: 0.5 / y)


def mean(x, axis: int | None = None, keepdims: bool = False):
    mode = _mode("mean", (x,))
    p = _raw(x)
    if axis not in (None, -1):
        raise UnsupportedOpError("mean", "axis must be None or -1")
    y = p.mean(axis=axis, keepdims=keepdims)
    n = p.size if axis is None else p.shape[-1]
    if mode == "raw":
        return y
    if mode == "dual":
        t = _tan(x)
        return DualTensor(y, np.zeros_like(y) if t is None else t.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, p.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, -1)
            _accum(x, np.broadcast_to(gg / n, p.shape))

    return _rev_node(y, (x,), vjp)


def reduce_sum(x, axis: int | None = None, keepdims: bool = False):
    mode = _mode("sum", (x,))
    p = _raw(x)
    if axis not in (None, -1):
        raise UnsupportedOpError("sum", "axis must be None or -1")
    y = p.sum(axis=axis, keepdims=keepdims)
    if mode == "raw":
        return y
    if mode == "dual":
        t = _tan(x)
        return DualTensor(y, np.zeros_like(y) if t is None else t.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, p.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, -1)
            _accum(x, np.broadcast_to(gg, p.shape))

    return _rev_node(y, (x,), vjp)


def sumsq(x, axis: int | None = None, keepdims: bool = False):
    """Sum of squares, composed as sum(x * x)."""
    return reduce_sum(mul(x, x), axis=axis, keepdims=keepdims)


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)
    mode = _mode("concat", parts)
    raws = [_raw(p) for p in parts]
    if axis != -1:
        raise UnsupportedOpError("concat", "axis must be -1")
    nd = raws[0].ndim
    if any(r.ndim != nd for r in raws):
        raise ShapeError("concat", [r.shape for r in raws], "rank mismatch")
    out = np.concatenate(raws, axis=-1)
    if mode == "raw":
        return out
    sizes = [r.shape[-1] for r in raws]
    if mode == "dual":
        tans = [
            _tan(p) if _tan(p) is not None else np.zeros_like(r)
            for p, r in zip(parts, raws)
        ]
        return DualTensor(out, np.concatenate(tans, axis=-1))

    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(part, g[..., lo:hi])

    return _rev_node(out, tuple(parts), vjp)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    mode = _mode("embedding", (table,))
    p = _raw(table)
    if p.ndim != 2:
        raise ShapeError("embedding", (p.shape,), "table must be 2-D")
    out = p[ids]
    if mode == "raw":
        return out
    if mode == "dual":
        t = _tan(table)
        return DualTensor(out, np.zeros_like(out) if t is None else t[ids])

    def vjp(g):
        if isinstance(table, Tensor) and table.requires_grad:
            full = np.zeros_like(p)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _rev_node(out, (table,), vjp)


def where(mask: np.ndarray, a, b):
    """Elementwise select; `mask` is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    mode = _mode("where", (a, b))
    pa, pb = _raw(a), _raw(b)
    out = np.where(mask, pa, pb)
    if mode == "raw":
        return out
    if mode == "dual":
        ta = _tan(a)
        tb = _tan(b)
        za = np.zeros(pa.shape) if ta is None else ta
        zb = np.zeros(pb.shape) if tb is None else tb
        return DualTensor(out, np.where(mask, za, zb))

    def vjp(g):
        _accum(a, np.where(mask, g, 0.0))
        _accum(b, np.where(mask, 0.0, g))

    return _rev_node(out, (a, b), vjp)


def stop_gradient(x):
    """Identity on values; blocks reverse gradients and zeroes forward tangents."""
    if isinstance(x, DualTensor):
        return DualTensor(x.primal, np.zeros_like(x.primal))
    if isinstance(x, Tensor):
        return Tensor(x.data)
    return _as_f64(x)


def affine(x, w, b):
    """x @ w + b."""
    return add(matmul(x, w), b)


def layer_norm(x, eps: float = 1e-6):
    """Parameter-free normalization over the last axis, built from primitives."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


# names exercised by the op-contract tests; silu is composite but part of the set
FORWARD_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "affine": affine,
    "silu": silu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "sin": sin,
    "cos": cos,
    "sqrt": sqrt,
    "mean": mean,
    "sum": reduce_sum,
    "sumsq": sumsq,
    "concat": concat,
    "layer_norm": layer_norm,
}


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf below `loss`.

    Repeated calls accumulate into leaf .grad; clear with
    ParameterStore.zero_grad(). Interior-node gradients are freed as the
    sweep proceeds.
    """
    if not isinstance(loss, Tensor):
        raise UnsupportedOpError("backward", "loss must be a Tensor")
    if loss.data.shape != ():
        raise ShapeError("backward", (loss.data.shape,), "loss must be scalar")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    if loss.grad is None:
        loss.grad = np.ones(())
    else:
        loss.grad = loss.grad + np.ones(())

    for node in reversed(order):
        if node._vjp is None:
            continue  # leaf: keep accumulated .grad
        g = node.grad
        node.grad = None
        if g is None:
            continue
        node._vjp(g)


def jvp(function: Callable, x, tangent):
    """Evaluate `function` once, returning (f(x), J_f(x) @ tangent).

    `function` must be composed of ops from this module. No Jacobian is ever
    materialized; the tangent rides along the single forward pass.
    """
    px = _raw(x)
    pt = _raw(tangent)
    if px.shape != pt.shape:
        raise ShapeError("jvp", (px.shape, pt.shape), "tangent must match input")
    out = function(DualTensor(px, pt))
    if not isinstance(out, DualTensor):
        raise UnsupportedOpError("jvp", "function must stay within supported ops")
    return out.primal, out.tangent


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Ordered, named parameter tensors with matching gradient slots.

    Iteration order is insertion order and is part of the contract: the
    optimizer, EMA, checksum, and checkpoint layout all rely on it.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values, in iteration order."""
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            arr = _as_f64(v)
            if arr.shape != self._params[k].data.shape:
                raise ShapeError("load_state", (arr.shape, self._params[k].data.shape), k)
            self._params[k].data = arr.copy()

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for k, v in self._params.items():
            dup.add(k, v.data.copy())
        return dup

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def checksum(self) -> str:
        """SHA-256 over names and little-endian float64 bytes, in order."""
        h = hashlib.sha256()
        for k, v in self._params.items():
            h.update(k.encode("utf-8"))
            h.update(v.data.astype("<f8", copy=False).tobytes(order="C"))
        return h.hexdigest()
