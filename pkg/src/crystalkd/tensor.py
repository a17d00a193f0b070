"""Dense 2-D float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure that pushes the output gradient back into them. ``loss.backward()``
walks that tape in reverse topological order. Gradients into leaf tensors
accumulate (``+=``) until something zeroes them, which :func:`adam_step` does
after each update.

Shapes are always two-dimensional. Elementwise binary ops broadcast a
``1 x m`` row, an ``n x 1`` column or a ``1 x 1`` scalar against an ``n x m``
operand, and the backward pass sums the gradient back down to the smaller
shape.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, StateError
from .rng import rng_stream

Array = np.ndarray


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self._init(arr, requires_grad, (), None)

    def _init(self, arr: Array, requires_grad: bool, parents, backward):
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"tensor dimensions must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite value in tensor of shape {arr.shape}")
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and backward is None else None
        self._parents = parents
        self._backward = backward

    @classmethod
    def _result(cls, arr: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        if any(p.requires_grad for p in parents):
            out._init(arr, True, parents, backward)
        else:
            out._init(arr, False, (), None)
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> Array:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        if self.shape != (1, 1):
            raise DimensionError(f"backward() needs a 1x1 loss, got {self.shape}")
        if not self.requires_grad:
            return
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c: float):
        return mul(self, 1.0 / float(c))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Array, shape: tuple[int, int]) -> Array:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    for d in (0, 1):
        if a.shape[d] != b.shape[d] and 1 not in (a.shape[d], b.shape[d]):
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.value, a.shape))
        b._accumulate(_unbroadcast(g * a.value, b.shape))

    return Tensor._result(a.value * b.value, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(2.0 * x.value * g)

    return Tensor._result(x.value * x.value, (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.value)

    def backward(g):
        x._accumulate(g * y)

    return Tensor._result(y, (x,), backward)


def log(x: Tensor) -> Tensor:
    if (x.value <= 0).any():
        raise NumericalError("log of a non-positive value")

    def backward(g):
        x._accumulate(g / x.value)

    return Tensor._result(np.log(x.value), (x,), backward)


# --------------------------------------------------------------------------
# activations

def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return Tensor._result(y, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    v = x.value
    y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def backward(g):
        e = np.exp(-np.abs(v))
        s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        x._accumulate(g * s)

    return Tensor._result(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._result(np.where(mask, x.value, 0.0), (x,), backward)


_ACTIVATIONS = {"sigmoid": sigmoid, "softplus": softplus, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return Tensor._result(a.value @ b.value, (a, b), backward)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with ``b`` a single row broadcast over the rows of ``x``."""
    if x.cols != W.rows or b.shape != (1, W.cols):
        raise DimensionError(f"affine: x {x.shape}, W {W.shape}, b {b.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ W.value.T)
        if W.requires_grad:
            W._accumulate(x.value.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, keepdims=True))

    return Tensor._result(x.value @ W.value + b.value, (x, W, b), backward)


def transpose(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g.T)

    return Tensor._result(x.value.T.copy(), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._result(np.array([[x.value.sum()]]), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return Tensor._result(np.array([[x.value.mean()]]), (x,), backward)


def row_sums(x: Tensor) -> Tensor:
    """Sum across columns: ``n x m -> n x 1``."""
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._result(x.value.sum(axis=1, keepdims=True), (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accumulate(g[:, lo:hi])

    return Tensor._result(np.concatenate([p.value for p in parts], axis=1), tuple(parts), backward)


# --------------------------------------------------------------------------
# indexing

def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.value)
            np.add.at(acc, index, g)
            x._accumulate(acc)

    return Tensor._result(x.value[index], (x,), backward)


def segment_sum(x: Tensor, segment, num_segments: int) -> Tensor:
    """Row ``s`` of the result is the sum of rows ``i`` of ``x`` with ``segment[i] == s``."""
    segment = np.asarray(segment, dtype=np.int64)
    if segment.shape != (x.rows,):
        raise DimensionError(f"segment_sum: {segment.shape[0]} segment ids for {x.rows} rows")
    out = np.zeros((num_segments, x.cols))
    np.add.at(out, segment, x.value)

    def backward(g):
        x._accumulate(g[segment])

    return Tensor._result(out, (x,), backward)


def take(x: Tensor, rows, cols) -> Tensor:
    """Pick single elements ``x[rows[k], cols[k]]`` into a ``k x 1`` column."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            acc = np.zeros_like(x.value)
            np.add.at(acc, (rows, cols), g[:, 0])
            x._accumulate(acc)

    return Tensor._result(x.value[rows, cols].reshape(-1, 1), (x,), backward)


# --------------------------------------------------------------------------
# fused losses and normalizations

def l2_normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise NumericalError("cannot normalize a zero-norm row")
    u = x.value / norms

    def backward(g):
        x._accumulate((g - u * (g * u).sum(axis=1, keepdims=True)) / norms)

    return Tensor._result(u, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row softmax cross-entropy, ``n x C`` logits -> ``n x 1`` losses."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.rows,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {logits.rows} rows")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(logits.rows)
    loss = -logp[rows, labels].reshape(-1, 1)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits._accumulate(g * p)

    return Tensor._result(loss, (logits,), backward)


# --------------------------------------------------------------------------
# parameters and optimization

class ParamStore:
    """Ordered named parameters plus Adam moments and the step counter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.t = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise StateError(f"duplicate parameter name {name!r}")
        p = Tensor(value, requires_grad=True)
        self._params[name] = p
        self.m[name] = np.zeros_like(p.value)
        self.v[name] = np.zeros_like(p.value)
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name, p in self._params.items():
            new.add(name, p.value)
            new.m[name] = self.m[name].copy()
            new.v[name] = self.v[name].copy()
        new.t = self.t
        return new

    def digest(self) -> str:
        """SHA-256 over names, shapes and little-endian parameter bytes."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode("utf-8"))
            h.update(np.array(p.shape, dtype="<u8").tobytes())
            h.update(p.value.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for key in ("beta1", "beta2"):
            if not 0 < getattr(self, key) < 1:
                raise ConfigError(f"{key} must be in (0, 1), got {getattr(self, key)}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


def adam_step(store: ParamStore, hyper: AdamHyper) -> ParamStore:
    """One bias-corrected Adam update of every parameter; zeroes the gradients."""
    for name, p in store.items():
        if p.grad is None or p.grad.shape != p.value.shape:
            raise StateError(f"parameter {name!r} has no gradient buffer")
    store.t += 1
    t = store.t
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.epsilon)
        p.grad[...] = 0.0
    return store


# --------------------------------------------------------------------------
# finite-difference checking

@dataclass(frozen=True)
class GradSample:
    name: str
    index: tuple[int, int]
    analytic: float
    numeric: float
    rel_error: float
    passed: bool
    resolved: bool = True  # False: both values under the differencing noise floor


@dataclass
class GradCheckReport:
    tolerance: float
    noise_floor: float = 0.0
    samples: list[GradSample] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """Every sample passes and every parameter has at least one resolved sample."""
        return bool(self.samples) and not self.failures() and not self.unresolved_params()

    def worst(self) -> dict[str, float]:
        """Largest relative error per parameter over resolved samples, in parameter order.

        A parameter with no resolved sample reports NaN.
        """
        out: dict[str, float] = {}
        for s in self.samples:
            out.setdefault(s.name, float("nan"))
            if not s.resolved:
                continue
            prev = out[s.name]
            if np.isnan(s.rel_error):
                out[s.name] = float("inf")
            else:
                out[s.name] = s.rel_error if np.isnan(prev) else max(prev, s.rel_error)
        return out

    def failures(self) -> list[GradSample]:
        return [s for s in self.samples if not s.passed]

    def unresolved(self) -> int:
        return sum(not s.resolved for s in self.samples)

    def unresolved_params(self) -> list[str]:
        """Parameters none of whose samples rose above the noise floor."""
        return [name for name, err in self.worst().items() if np.isnan(err)]


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


# ulps of loss noise assumed in one central difference
_NOISE_ULPS = 4.0


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor],
    store: ParamStore,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    samples_per_param: int | None = 5,
    seed: int = 0,
    names: Sequence[str] | None = None,
    noise_floor: float | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Each sample gets ``|a - n| / max(|a|, |n|, 1e-12)`` and passes when that
    is below ``tolerance``. Rounding limits a central difference to an
    absolute accuracy of a few ulps of the loss divided by ``epsilon``; an
    element whose analytic and numeric values are *both* smaller than
    ``noise_floor`` (default: that accuracy divided by ``tolerance``), and not
    both exactly zero, cannot be judged in relative terms. Such elements are recorded as unresolved,
    count as agreeing, and are replaced by another random element of the
    same parameter, up to ``samples_per_param`` extra draws.

    ``samples_per_param=None`` checks every element. Indices come from the
    ``"gradcheck"`` stream of ``seed``. A non-finite loss at a perturbed point
    gives a failed sample with NaN error.
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    rng = rng_stream(seed, "gradcheck")
    store.zero_grad()
    loss = loss_fn(store)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in store.items()}
    store.zero_grad()
    if noise_floor is None:
        ulp = np.finfo(np.float64).eps * max(abs(loss.item()), 1.0)
        noise_floor = _NOISE_ULPS * ulp / epsilon / tolerance

    def evaluate() -> float:
        try:
            return loss_fn(store).item()
        except NumericalError:
            return float("nan")

    report = GradCheckReport(tolerance, noise_floor)
    for name in names if names is not None else store.names():
        p = store[name]
        size = p.value.size
        if samples_per_param is None or samples_per_param >= size:
            order, want, budget = np.arange(size), size, size
        else:
            order = rng.permutation(size)
            want, budget = samples_per_param, min(size, 2 * samples_per_param)
        resolved = 0
        for k in order[:budget]:
            if resolved >= want:
                break
            idx = np.unravel_index(int(k), p.shape)
            orig = p.value[idx]
            p.value[idx] = orig + epsilon
            up = evaluate()
            p.value[idx] = orig - epsilon
            down = evaluate()
            p.value[idx] = orig
            a = float(analytic[name][idx])
            ij = (int(idx[0]), int(idx[1]))
            if not (np.isfinite(up) and np.isfinite(down)):
                report.samples.append(GradSample(name, ij, a, float("nan"), float("nan"), False))
                resolved += 1
                continue
            n = (up - down) / (2.0 * epsilon)
            err = relative_error(a, n)
            if 0 < max(abs(a), abs(n)) < noise_floor:
                report.samples.append(GradSample(name, ij, a, n, err, True, resolved=False))
                continue
            report.samples.append(GradSample(name, ij, a, n, err, err < tolerance))
            resolved += 1
    return report
