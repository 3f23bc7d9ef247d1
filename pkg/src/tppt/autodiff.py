"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  Nodes whose inputs do not
require gradients are returned detached, so inference through frozen weights
builds no tape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from tppt.errors import ContractError, GraphError, NumericalError


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Dense value array participating in a differentiable computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if seed is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block, even for parameters that require grad."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite differences stay meaningful."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise GraphError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# reductions ------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / np.asarray(out).size

    return _make(np.asarray(out), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s
    res = out if keepdims else np.squeeze(out, axis=axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _make(res, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    res = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (gg * a.data / n,)

    return _make(res, (a,), backward)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    # scale by the max entry first so tiny vectors do not underflow when squared
    m = np.abs(a.data).max(axis=axis, keepdims=True)
    if np.any(m == 0.0):
        raise ContractError("l2_normalize received a zero vector")
    scaled = a.data / m
    s = np.sqrt((scaled * scaled).sum(axis=axis, keepdims=True))
    out = scaled / s

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / m / s,)

    return _make(out, (a,), backward)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise GraphError(f"layer_norm: affine shape {gamma.shape} does not fit {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        ga = ggamma = gbeta = None
        if a.requires_grad:
            dxhat = g * gamma.data
            ga = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, a.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, a.shape[-1]).sum(axis=0)
        return ga, ggamma, gbeta

    return _make(out, (a, gamma, beta), backward)


# shape manipulation ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise GraphError(f"stack: incompatible shapes {[t.shape for t in ts]}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), backward)


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise GraphError(f"index out of range for shape {a.shape}") from exc

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise GraphError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return _make(np.array(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


# graph evaluation ------------------------------------------------------------

@dataclass
class Graph:
    """A differentiable program: ``build`` maps named leaf tensors to named outputs.

    Exactly one output, named by ``loss``, must be a scalar.
    """

    build: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]]
    loss: str = "loss"


def _bind(inputs: Mapping[str, object]) -> dict[str, Tensor]:
    bound = {}
    for name, value in inputs.items():
        t = value if isinstance(value, Tensor) else Tensor(value)
        if t.name is None:
            t.name = name
        bound[name] = t
    return bound


def _forward_loss(graph: Graph, bound: Mapping[str, Tensor]) -> tuple[dict[str, Tensor], Tensor]:
    outputs = dict(graph.build(bound))
    if graph.loss not in outputs:
        raise ContractError(f"graph has no output named {graph.loss!r}")
    loss = outputs[graph.loss]
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss value {loss.item()}")
    return outputs, loss


def evaluate_with_gradients(graph: Graph, inputs: Mapping[str, object]
                            ) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    bound = _bind(inputs)
    for t in bound.values():
        t.zero_grad()
    outputs, loss = _forward_loss(graph, bound)
    loss.backward()
    grads = {}
    for name, t in bound.items():
        if t.requires_grad:
            grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
    return outputs, grads


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    max_relative_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_relative_error.items() if not v <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.abs(np.asarray(analytic)).max(initial=0.0)
    f = np.abs(np.asarray(numeric)).max(initial=0.0)
    diff = np.abs(np.asarray(analytic) - np.asarray(numeric)).max(initial=0.0)
    return float(diff / max(a, f, 1e-8))


def grad_check(graph: Graph, inputs: Mapping[str, object], step: float = 1e-4,
               tolerance: float = 1e-4, max_elements: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    For each parameter tensor the error is ``max|a-f| / max(max|a|, max|f|, 1e-8)``.
    ``max_elements`` limits the probed entries per parameter (sampled by ``rng``).
    """
    if step <= 0 or tolerance <= 0:
        raise ContractError("step and tolerance must be positive")
    bound = _bind(inputs)
    for name, t in bound.items():
        if not np.isfinite(t.data).all():
            raise NumericalError(f"parameter {name!r} is not finite")
    _, grads = evaluate_with_gradients(graph, bound)
    report = GradCheckReport(step=step, tolerance=tolerance)
    rng = rng or np.random.default_rng(0)
    for name, analytic in grads.items():
        t = bound[name]
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + step
                up = _forward_loss(graph, bound)[1].item()
                flat[k] = orig - step
                down = _forward_loss(graph, bound)[1].item()
                flat[k] = orig
                numeric[j] = (up - down) / (2 * step)
        report.max_relative_error[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return report


# optimisation ----------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine-annealed learning rate, from ``base_lr`` at step 0 to 0 at the end."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class OptimizerState:
    momentum: float
    base_lr: float
    total_steps: int
    step: int = 0
    velocity: list[np.ndarray] = field(default_factory=list)
    clip_norm: float | None = None


def make_optimizer(params: Sequence[Tensor], base_lr: float, total_steps: int,
                   momentum: float = 0.9, clip_norm: float | None = None) -> OptimizerState:
    return OptimizerState(momentum=momentum, base_lr=base_lr, total_steps=total_steps,
                          velocity=[np.zeros_like(p.data) for p in params], clip_norm=clip_norm)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
             state: OptimizerState, lr: float | None = None) -> float:
    """Classical momentum: ``v <- mu*v + g``; ``p <- p - lr*v``.  Returns the lr used.

    Parameters are updated in place.  A non-finite gradient aborts the step
    before anything is modified.  ``lr`` overrides the cosine schedule.  With
    ``state.clip_norm`` set, gradients are first rescaled so their global L2
    norm does not exceed it.
    """
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ContractError("params, grads and velocity lists differ in length")
    dense = []
    for p, g, v in zip(params, grads, state.velocity):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or v.shape != p.shape:
            raise GraphError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {p.name!r}")
        dense.append(g)
    if state.clip_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in dense))
        if total > state.clip_norm:
            dense = [g * (state.clip_norm / total) for g in dense]
    if lr is None:
        lr = cosine_lr(min(state.step, state.total_steps), state.total_steps, state.base_lr)
    for p, g, v in zip(params, dense, state.velocity):
        v *= state.momentum
        v += g
        p.data -= lr * v
    state.step += 1
    return lr


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray | None]:
    return [p.grad for p in params]
