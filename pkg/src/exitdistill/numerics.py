"""Dense float64 tensors with reverse-mode autodiff, plus the loss kernels.

The engine is deliberately small: it supports exactly the operations the
exitable classifier needs (affine maps, elementwise arithmetic, tanh, layer
normalization, softmax, floored log, reductions) and nothing else.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class DegenerateInputError(ValueError):
    """An input has no usable direction (zero norm, empty set)."""


class ContractError(ValueError):
    """A caller-supplied function violated the expected contract."""


def _grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction for the current thread."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _acc(t: "Tensor", g) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out the axes numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional float64 array that can record how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = _parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # graph plumbing -------------------------------------------------------

    def _child(self, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, _parents=parents if track else ())
        out.requires_grad = track
        if track:
            out._backward = lambda: backward(out.grad)
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs an explicit seed for shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        # interior nodes start empty on every pass; leaves accumulate
        for node in order:
            if node._parents:
                node.grad = None
        _acc(self, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g, b.shape))

        return self._child(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            _acc(a, -(g))

        return self._child(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g * a.data, b.shape))

        return self._child(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _acc(b, -(_unbroadcast(g * a.data / (b.data * b.data), b.shape)))

        return self._child(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            _acc(a, full)

        return self._child(a.data[index], (a,), backward)

    # elementwise ----------------------------------------------------------

    def tanh(self) -> "Tensor":
        a = self
        y = np.tanh(a.data)

        def backward(g):
            _acc(a, g * (1.0 - y * y))

        return self._child(y, (a,), backward)

    def relu(self) -> "Tensor":
        a = self

        def backward(g):
            _acc(a, g * (a.data > 0))

        return self._child(np.maximum(a.data, 0.0), (a,), backward)

    def exp(self) -> "Tensor":
        a = self
        y = np.exp(a.data)

        def backward(g):
            _acc(a, g * y)

        return self._child(y, (a,), backward)

    def log(self, floor: float = 0.0) -> "Tensor":
        """Natural log of ``max(x, floor)``; zero gradient where the floor binds."""
        a = self
        live = a.data > floor
        safe = np.where(live, a.data, floor if floor > 0 else 1.0)

        def backward(g):
            _acc(a, np.where(live, g / safe, 0.0))

        return self._child(np.log(safe) if floor > 0 else np.log(a.data), (a,), backward)

    def sqrt(self) -> "Tensor":
        a = self
        y = np.sqrt(a.data)

        def backward(g):
            _acc(a, g * 0.5 / y)

        return self._child(y, (a,), backward)

    # reductions -----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.shape))

        return self._child(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (..., m, k) or (k,) operand with a (k, n) matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                _acc(b, np.outer(a.data, g))
            else:
                _acc(b, a.data.T @ g)

    return a._child(a.data @ b.data, (a, b), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an elementwise affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        gh = g * gain.data
        if x.requires_grad:
            _acc(x, inv * (gh - gh.mean(axis=-1, keepdims=True)
                           - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
        if gain.requires_grad:
            _acc(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.shape))

    return x._child(xhat * gain.data + bias.data, (x, gain, bias), backward)


def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``logits / temperature`` (max-subtracted)."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    logits = _as_tensor(logits)
    if logits.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes, got shape {logits.shape}")
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)) / temperature)

    return logits._child(p, (logits,), backward)


def cross_entropy(probs: Tensor, gold) -> Tensor:
    """Mean of ``-ln(max(p[gold], 1e-12))`` over the batch.

    ``probs`` is a single distribution (K,) with an int ``gold`` or a batch
    (B, K) with an int array of length B.
    """
    probs = _as_tensor(probs)
    k = probs.shape[-1]
    gold_arr = np.asarray(gold, dtype=np.int64)
    if np.any(gold_arr < 0) or np.any(gold_arr >= k):
        raise IndexError(f"gold class out of range [0, {k}): {gold}")
    if probs.ndim == 1:
        picked = probs[int(gold_arr)]
    else:
        if gold_arr.shape != (probs.shape[0],):
            raise DimensionError(f"gold labels {gold_arr.shape} do not match batch {probs.shape}")
        picked = probs[np.arange(probs.shape[0]), gold_arr]
    return -(picked.log(PROB_FLOOR).mean())


def kl_divergence(p: Tensor, q) -> Tensor:
    """KL(p || q) = sum_i p_i ln(p_i / q_i), batch-averaged.

    ``q`` is a distillation target: it is detached, so no gradient reaches
    whatever produced it. Both arguments are floored at 1e-12 inside the log.
    """
    p = _as_tensor(p)
    q_data = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q_data.shape[-1]:
        raise DimensionError(f"kl_divergence: class counts differ, {p.shape} vs {q_data.shape}")
    log_q = np.log(np.maximum(q_data, PROB_FLOOR))
    terms = (p * (p.log(PROB_FLOOR) - log_q)).sum(axis=-1)
    return terms.mean() if terms.ndim else terms


def cosine_similarity(a, b) -> float:
    """a.b / (|a| |b|), clipped to [-1, 1]."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity of a zero-norm vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Distribution:
    """A validated probability vector over ``classes`` outcomes."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise DimensionError(f"a distribution needs a 1-d vector of >= 2 classes, got {probs.shape}")
        if np.any(probs < 0) or np.any(probs > 1) or abs(probs.sum() - 1.0) > 1e-9:
            raise ParameterError("probabilities must lie in [0, 1] and sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def classes(self) -> int:
        return self.probs.size

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max elementwise relative error between reverse-mode and central differences.

    The relative error of each entry is ``|analytic - numeric| / max(|analytic|,
    |numeric|, 1e-6)``; the absolute floor keeps vanishing gradients from
    dividing round-off by zero.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    x = Tensor(x.data.copy(), requires_grad=True) if isinstance(x, Tensor) else Tensor(x, True)
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check needs f to return a scalar Tensor")
    out.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def parameters_checksum(params: Iterable[Tensor] | dict) -> str:
    """Hex digest over the raw bytes of a parameter collection."""
    import hashlib

    h = hashlib.sha256()
    items: Sequence = list(params.values()) if isinstance(params, dict) else list(params)
    for t in items:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
