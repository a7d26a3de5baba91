"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on tensors that require gradients are appended to the innermost
active :class:`Tape`.  Every vector-Jacobian product is itself written with
tensor operations, so gradients can be recorded (``create_graph=True``) and
differentiated again.  This is what the SDF normal and the eikonal term need.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0].data
    array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value turns NaN or infinite."""


_tape_stack: list["Tape | None"] = []


def _recording_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    out: "Tensor"
    vjp: Callable[["Tensor"], tuple["Tensor | None", ...]]


class Tape:
    """Append-only record of primitive ops, in execution (topological) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def gradient(
        self,
        target: "Tensor",
        sources: Sequence["Tensor"],
        output_grad: "Tensor | np.ndarray | None" = None,
        create_graph: bool = False,
    ) -> list["Tensor"]:
        """Gradients of ``target`` w.r.t. ``sources``.

        Sources that do not influence the target get zero gradients.  With
        ``create_graph`` the backward computation is recorded on this tape so
        that the returned gradients are differentiable.
        """
        if output_grad is None:
            g0 = Tensor(np.ones_like(target.data))
        else:
            g0 = output_grad if isinstance(output_grad, Tensor) else Tensor(output_grad)
            if g0.shape != target.shape:
                raise DimensionError(
                    f"output_grad shape {g0.shape} does not match target shape {target.shape}"
                )
        grads: dict[int, Tensor] = {id(target): g0}
        n_forward = len(self.nodes)
        _tape_stack.append(self if create_graph else None)
        try:
            for node in reversed(self.nodes[:n_forward]):
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                for inp, gi in zip(node.inputs, node.vjp(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
        finally:
            _tape_stack.pop()
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(g if g is not None else Tensor(np.zeros_like(s.data)))
        return out


class no_record:
    """Context manager that suspends tape recording."""

    def __enter__(self) -> None:
        _tape_stack.append(None)

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: "Tensor", shape: tuple[int, ...]) -> "Tensor":
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, op: str, inputs: tuple["Tensor", ...], vjp) -> "Tensor":
    tape = _recording_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.nodes.append(Node(op, inputs, out, vjp))
    return out


class Tensor:
    """Row-major float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data + other.data,
            "add",
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _make(-self.data, "neg", (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data - other.data,
            "sub",
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        return _make(
            a.data * b.data,
            "mul",
            (a, b),
            lambda g: (
                _unbroadcast(g * b, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a, b.shape) if b.requires_grad else None,
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def vjp(g):
            ga = _unbroadcast(g / b, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a / (b * b), b.shape) if b.requires_grad else None
            return ga, gb

        return _make(a.data / b.data, "div", (a, b), vjp)

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self
        if p == 2:
            return a * a
        return _make(a.data**p, f"pow{p}", (a,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"cannot matmul shapes {a.shape} and {b.shape}")
        return _make(
            a.data @ b.data,
            "matmul",
            (a, b),
            lambda g: (
                g @ b.T if a.requires_grad else None,
                a.T @ g if b.requires_grad else None,
            ),
        )

    # -- shape ops -----------------------------------------------------------
    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self, axes: tuple[int, ...] | None = None) -> "Tensor":
        inv = None if axes is None else tuple(np.argsort(axes))
        return _make(
            np.transpose(self.data, axes), "transpose", (self,), lambda g: (g.transpose(inv),)
        )

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _make(self.data.reshape(shape), "reshape", (self,), lambda g: (g.reshape(src),))

    def __getitem__(self, idx) -> "Tensor":
        src = self.shape
        return _make(
            self.data[idx], "getitem", (self,), lambda g: (_scatter(g, idx, src),)
        )

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else axis
                axes = tuple(a % len(src) for a in axes)
                kept = tuple(1 if i in axes else n for i, n in enumerate(src))
                g = g.reshape(kept)
            elif axis is None and not keepdims:
                g = g.reshape((1,) * len(src))
            return (broadcast_to(g, src),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), "sum", (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis: int = -1) -> "Tensor":
        def vjp(g):
            return (g.flip(axis).cumsum(axis).flip(axis),)

        return _make(np.cumsum(self.data, axis=axis), "cumsum", (self,), vjp)

    def cumprod(self, axis: int = -1) -> "Tensor":
        """Inclusive cumulative product; inputs must be nonzero for the gradient."""
        x = self
        out_data = np.cumprod(x.data, axis=axis)

        def vjp(g):
            y = _make(out_data, "cumprod", (x,), vjp)
            return ((g * y).flip(axis).cumsum(axis).flip(axis) / x,)

        return _make(out_data, "cumprod", (x,), vjp)

    def flip(self, axis: int) -> "Tensor":
        return _make(np.flip(self.data, axis), "flip", (self,), lambda g: (g.flip(axis),))

    # -- elementwise functions -----------------------------------------------
    def exp(self) -> "Tensor":
        x = self
        out = np.exp(x.data)
        return _make(out, "exp", (x,), lambda g: (g * x.exp(),))

    def log(self) -> "Tensor":
        x = self
        return _make(np.log(x.data), "log", (x,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        x = self
        return _make(np.sqrt(x.data), "sqrt", (x,), lambda g: (g * 0.5 / x.sqrt(),))

    def sin(self) -> "Tensor":
        x = self
        return _make(np.sin(x.data), "sin", (x,), lambda g: (g * x.cos(),))

    def cos(self) -> "Tensor":
        x = self
        return _make(np.cos(x.data), "cos", (x,), lambda g: (-g * x.sin(),))

    def abs(self) -> "Tensor":
        x = self
        sign = np.sign(x.data)
        return _make(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))

    def sigmoid(self) -> "Tensor":
        return _sigmoid_op(self, _sigmoid(self.data))

    def softplus(self, beta: float = 1.0) -> "Tensor":
        x = self
        z = beta * x.data
        e = np.exp(-np.abs(z))
        out = (np.maximum(z, 0.0) + np.log1p(e)) / beta
        # sigmoid(z) from the same exponential, reused by the backward pass
        s = np.where(z >= 0, 1.0, e) / (1.0 + e)

        def vjp(g):
            return (g * _sigmoid_op(x * beta, s),)

        return _make(out, "softplus", (x,), vjp)

    def relu(self) -> "Tensor":
        x = self
        mask = (x.data > 0).astype(np.float64)
        return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))

    def clamp_min(self, lo: float) -> "Tensor":
        x = self
        mask = (x.data > lo).astype(np.float64)
        return _make(np.maximum(x.data, lo), "clamp_min", (x,), lambda g: (g * mask,))

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self
        mask = ((x.data > lo) & (x.data < hi)).astype(np.float64)
        return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * mask,))

    def norm(self, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> "Tensor":
        return ((self * self).sum(axis=axis, keepdims=keepdims) + eps).sqrt()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _sigmoid_op(z: Tensor, s: np.ndarray) -> Tensor:
    """Sigmoid of ``z`` whose value ``s`` is already known."""

    def vjp(g):
        st = _sigmoid_op(z, s)
        return (g * st * (1.0 - st),)

    return _make(s, "sigmoid", (z,), vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def _scatter(g: Tensor, idx, shape: tuple[int, ...]) -> Tensor:
    out = np.zeros(shape)
    if _is_basic_index(idx):
        out[idx] = g.data
    else:
        np.add.at(out, idx, g.data)
    return _make(out, "scatter", (g,), lambda gg: (gg[idx],))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _make(
        np.broadcast_to(x.data, shape).copy(),
        "broadcast",
        (x,),
        lambda g: (_unbroadcast(g, src),),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * nd
            sl[ax] = slice(int(lo), int(hi))
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    cf = c.astype(np.float64)
    return _make(
        np.where(c, a.data, b.data),
        "where",
        (a, b),
        lambda g: (
            _unbroadcast(g * cf, a.shape) if a.requires_grad else None,
            _unbroadcast(g * (1.0 - cf), b.shape) if b.requires_grad else None,
        ),
    )


def backward(
    tape: Tape,
    output: Tensor,
    params: Sequence[Tensor],
    output_grad: Tensor | np.ndarray | None = None,
) -> list[np.ndarray]:
    """Plain reverse pass returning numpy gradients for ``params``."""
    return [g.data for g in tape.gradient(output, params, output_grad)]
