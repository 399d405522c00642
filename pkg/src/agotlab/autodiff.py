"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Nothing is recorded outside a tape,
so frozen forward passes cost no bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

EPS = 1e-12


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; every recorded node's inputs precede it, so a
    reverse sweep over ``nodes`` is a valid topological order.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def produced(self, t: Tensor) -> bool:
        return any(n.out is t for n in self.nodes)


_ACTIVE: list[Tape] = []


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and bool(_ACTIVE))
    if out.requires_grad:
        _ACTIVE[-1].nodes.append(Node(inputs, out, backward, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Repeated calls accumulate; callers zero gradients between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
                touched[key] = inp
    for key, t in touched.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a size-1 operand scales the other."""
    _check_broadcast(a, b, "mul")
    return _record(
        "mul", (a, b), a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _record("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), out, bw)


def total(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", (a,), out, bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(total(a, axis), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join along ``axis`` (the token axis for prompt sequences)."""
    parts = tuple(parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", parts, out, bw)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        denom = np.expand_dims(out, axis)
        safe = np.where(denom > 0, denom, 1.0)
        return (np.expand_dims(g, axis) * a.data / safe,)

    return _record("l2_norm", (a,), out, bw)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit length; rejects near-zero slices."""
    norms = np.sqrt((a.data * a.data).sum(axis=axis))
    if np.any(norms <= EPS):
        raise DegenerateInputError("cannot normalize a vector with norm <= 1e-12")
    n = l2_norm(a, axis)
    return div(a, reshape(n, n.shape[:axis % a.data.ndim] + (1,) + n.shape[axis % a.data.ndim:]))


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape or u.data.ndim != 1:
        raise DimensionError(f"cosine_similarity: need equal 1-d shapes, got {u.shape} and {v.shape}")
    nu = float(np.sqrt(u.data @ u.data))
    nv = float(np.sqrt(v.data @ v.data))
    if nu <= EPS or nv <= EPS:
        raise DegenerateInputError("cosine_similarity: near-zero norm")
    dot = total(mul(u, v))
    return div(dot, mul(l2_norm(u), l2_norm(v)))


def log_softmax_nll(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"log_softmax_nll: expected [B, K] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    b, k = logits.shape
    if targets.shape != (b,):
        raise DimensionError(f"log_softmax_nll: {b} rows but {targets.shape} targets")
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError(f"target out of range [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    out = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p / b,)

    return _record("log_softmax_nll", (logits,), np.array(out), bw)


# ---------------------------------------------------------------- MLP


@dataclass
class Mlp3Params:
    """Three-layer ReLU perceptron; weights are stored [out, in]."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def __post_init__(self):
        d_hidden, d_in = self.w1.shape
        if self.w2.shape != (d_hidden, d_hidden) or self.w3.shape[1] != d_hidden:
            raise DimensionError(
                f"Mlp3Params: widths do not chain: {self.w1.shape}, {self.w2.shape}, {self.w3.shape}"
            )
        if self.b1.shape != (d_hidden,) or self.b2.shape != (d_hidden,) or self.b3.shape != (self.w3.shape[0],):
            raise DimensionError("Mlp3Params: bias shapes do not match layer widths")

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w3.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
             out_scale: float = 1.0, bias_std: float = 0.1, requires_grad: bool = True) -> "Mlp3Params":
        """Gaussian weights with std 1/sqrt(fan_in); small Gaussian biases.

        Nonzero biases keep a fully dead layer from sitting exactly on a ReLU kink.
        """

        def w(o, i, s=1.0):
            return Tensor(rng.normal(0.0, s / np.sqrt(i), size=(o, i)), requires_grad)

        def b(o):
            return Tensor(rng.normal(0.0, bias_std, size=o), requires_grad)

        return cls(w(d_hidden, d_in), b(d_hidden), w(d_hidden, d_hidden), b(d_hidden),
                   w(d_out, d_hidden, out_scale), b(d_out))

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, d_out: int, requires_grad: bool = True) -> "Mlp3Params":
        z = lambda *s: Tensor(np.zeros(s), requires_grad)  # noqa: E731
        return cls(z(d_hidden, d_in), z(d_hidden), z(d_hidden, d_hidden), z(d_hidden), z(d_out, d_hidden), z(d_out))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, transpose(w)), b)


def mlp3_forward(p: Mlp3Params, x: Tensor) -> Tensor:
    """W3 relu(W2 relu(W1 x + b1) + b2) + b3 over the last axis of ``x``.

    The output layer is linear; callers apply any squashing.
    """
    d_in = p.widths[0]
    if x.shape[-1:] != (d_in,):
        raise DimensionError(f"mlp3_forward: input width {x.shape} does not match d_in={d_in}")
    vec = x.data.ndim == 1
    h = reshape(x, (1, d_in)) if vec else x
    h = relu(linear(h, p.w1, p.b1))
    h = relu(linear(h, p.w2, p.b2))
    h = linear(h, p.w3, p.b3)
    return reshape(h, (p.widths[2],)) if vec else h


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    numeric: np.ndarray
    analytic: np.ndarray
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                            tol: float = 1e-6) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``x.data`` is perturbed in place and restored; ``x.grad`` is left as found.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape() as tape:
            out = f(x)
        if out.size != 1:
            raise ContractError(f"finite_difference_check: f must return a scalar, got {out.shape}")
        backward(out, tape)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        x.requires_grad = False
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad
    err = rel_error(analytic, numeric)
    worst = tuple(int(i) for i in np.unravel_index(np.argmax(err), err.shape)) if err.size else None
    return GradCheckReport(numeric, analytic, float(err.max()) if err.size else 0.0, worst, tol)
