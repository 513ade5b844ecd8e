"""Dense numpy tensors with a small reverse-mode autodiff tape.

Every node records its parents and a closure mapping the output adjoint to
one adjoint per parent.  ``Tensor.backward`` walks the graph in reverse
topological order; the walk order only depends on construction order, so two
identical programs produce bitwise-identical gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

NORM_EPS = 1e-12


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DimensionError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_array(data, dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        adjoints: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def make_op(data: np.ndarray, parents: Iterable, backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one adjoint (or None) per parent.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def tensor(x, requires_grad=False, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    return make_op(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; no gradient flows through clamped entries."""
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": lambda x: x,
}


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(np.matmul(a.data, b.data), (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make_op(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic and integer-array indexing; repeated indices accumulate."""
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(x.data[index], (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows: {ids.tolist()}")
    return getitem(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# reductions with routing


def max_over_axis(x: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis``; gradient goes to the first argmax only."""
    if x.shape[axis] == 0:
        raise DimensionError(f"max over empty axis {axis} of shape {x.shape}")
    idx = np.argmax(x.data, axis=axis)  # numpy returns the first occurrence
    values = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(values, (x,), backward), idx


def segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets.

    The forward sum visits each bucket's entries in ascending value order
    (per column), so the result does not depend on the order rows arrive in.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    v = values.data
    out = np.zeros((num_segments,) + v.shape[1:], dtype=v.dtype)
    if len(seg):
        flat = v.reshape(len(seg), -1)
        order = np.lexsort((flat.T, np.broadcast_to(seg, flat.T.shape)), axis=-1) if flat.shape[1] else None
        # lexsort with 2-D keys sorts each column independently along the last axis
        sorted_vals = np.take_along_axis(flat.T, order, axis=-1)
        sorted_seg = np.sort(seg)
        starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
        sums = np.add.reduceat(sorted_vals, starts, axis=-1).T
        out.reshape(num_segments, -1)[sorted_seg[starts]] = sums

    return make_op(out, (values,), lambda g: (g[seg],))


# ---------------------------------------------------------------------------
# normalisation / attention primitives


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Row-max-stabilised softmax; ``mask`` (True = keep) zeroes excluded entries."""
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("softmax input contains non-finite values")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not np.all(mask.any(axis=axis)):
            raise DimensionError("softmax row with every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_op(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("log_softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return make_op(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Unit-normalise the last axis, dividing by max(norm, eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    live = norm > eps

    def backward(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - out * radial) / denom, g / denom),)

    return make_op(out, (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    return tsum(l2_normalize(a) * l2_normalize(b), axis=-1)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits))."""
    lp = log_softmax(logits, axis=-1)
    per_row = -tsum(lp * np.asarray(targets, dtype=logits.dtype), axis=-1)
    return mean(per_row)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckFailure:
    input_index: int
    coordinate: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    failures: list[GradCheckFailure] = field(default_factory=list)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        lines = [f"{status}: max rel err {self.max_rel_error:.3e} over {self.n_checked} coords (tol {self.tolerance:g})"]
        for f in self.failures[:10]:
            lines.append(f"  input {f.input_index} coord {f.coordinate}: analytic {f.analytic:.8e} "
                         f"numeric {f.numeric:.8e} rel {f.rel_error:.3e}")
        return "\n".join(lines)


def check_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-6,
                    tolerance: float = 1e-5, denom_floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, denom_floor)``.
    Inputs are perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise DimensionError(f"check_gradients needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError("function value is not finite")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        with no_grad():
            val = f(*inputs)
        v = float(val.data)
        if not np.isfinite(v):
            raise NumericalError("function value is not finite at a perturbed point")
        return v

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for i, t in enumerate(inputs):
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            coord = it.multi_index
            orig = t.data[coord]
            t.data[coord] = orig + step
            f_plus = evaluate()
            t.data[coord] = orig - step
            f_minus = evaluate()
            t.data[coord] = orig
            num = (f_plus - f_minus) / (2 * step)
            ana = float(analytic[i][coord])
            rel = abs(ana - num) / max(abs(ana), abs(num), denom_floor)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel >= tolerance:
                report.failures.append(GradCheckFailure(i, coord, ana, num, rel))
    for t in inputs:
        t.grad = None
    return report
