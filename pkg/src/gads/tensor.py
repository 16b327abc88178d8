"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op computes its value eagerly with numpy. When a :class:`Tape` is
active and at least one input requires a gradient, the op appends its
output to the tape together with a closure mapping the output gradient to
input gradients. Creation order on the tape is a topological order, so
:func:`backward` is a single reverse sweep.

Ops accept optional leading batch axes where that is natural (``matmul``
with a 2-D right operand, row reductions, softmax, conv2d, avg_pool2); the
only broadcasting supported is a 1-D bias over the last axis.
"""

from __future__ import annotations

import math
import threading
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """An op or backward pass was called outside its contract."""


class Activation(str, Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    GELU = "gelu"
    SIGMOID = "sigmoid"
    TANH = "tanh"

    @classmethod
    def parse(cls, value: "str | Activation") -> "Activation":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"leakyrelu": "leaky_relu", "leaky": "leaky_relu"}
        return cls(aliases.get(key, key))


LEAKY_SLOPE = 0.01


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar, used sparingly by the model code
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Wengert list of non-leaf tensors in creation order.

    Use as a context manager; ops executed inside the block are recorded.
    A tape belongs to one thread and one training step.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = _state.__dict__.setdefault("stack", [])
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.name = None
    out.grad = None
    out._tape = None
    out._index = -1
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._tape = tape
        out._index = len(tape.nodes)
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict:
    """Propagate d(loss)/d(.) back through the tape that recorded ``loss``.

    Gradients accumulate into ``.grad`` of every reachable leaf that requires
    a gradient, so two calls without :meth:`Tensor.zero_grad` double them.
    Returns the accumulated gradients keyed by name (mapping input) or by
    ``id`` (iterable input); parameters the loss does not reach map to zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not None:
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        nodes = loss._tape.nodes
        for i in range(loss._index, -1, -1):
            node = nodes[i]
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg
    elif loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0

    if params is None:
        return {}
    if isinstance(params, Mapping):
        items = params.items()
    else:
        items = ((id(p), p) for p in params)
    out = {}
    for key, p in items:
        out[key] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same_or_bias(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias broadcast over the last axis."""
    _check_same_or_bias(a, b, "add")
    sb = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_bias(a, b, "sub")
    sb = b.shape
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    # np.sign gives 0 at 0, the subgradient we want
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(np.array(a.data.sum() / n), (a,), lambda g: (np.full(shape, g / n),))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.data.ndim
    n = a.shape[axis]
    return _make(
        a.data.sum(axis=axis) / n,
        (a,),
        lambda g: (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across any leading batch axes of ``a``) or has
    the same leading batch axes as ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def grad(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2 and A.ndim > 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make(A @ B, (a, b), grad)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with the bias broadcast over rows."""
    if W.data.ndim != 2 or b.shape != (W.shape[1],):
        raise DimensionError(f"linear: weight {W.shape} and bias {b.shape} do not conform")
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    X, Wd = x.data, W.data

    def grad(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gw = X.reshape(-1, X.shape[-1]).T @ g2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make(X @ Wd + b.data, (x, W, b), grad)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------------------
# activations


def activate(x: Tensor, kind: "Activation | str") -> Tensor:
    kind = Activation.parse(kind)
    X = x.data
    if kind is Activation.RELU:
        mask = X > 0
        return _make(np.where(mask, X, 0.0), (x,), lambda g: (g * mask,))
    if kind is Activation.LEAKY_RELU:
        slope = np.where(X > 0, 1.0, LEAKY_SLOPE)
        return _make(X * slope, (x,), lambda g: (g * slope,))
    if kind is Activation.SIGMOID:
        s = 0.5 * (1.0 + np.tanh(0.5 * X))
        return _make(s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind is Activation.TANH:
        t = np.tanh(X)
        return _make(t, (x,), lambda g: (g * (1.0 - t * t),))
    if kind is Activation.GELU:
        cdf = 0.5 * (1.0 + _erf(X / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * X * X) / math.sqrt(2.0 * math.pi)
        return _make(X * cdf, (x,), lambda g: (g * (cdf + X * pdf),))
    raise ValueError(f"unsupported activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and attention primitives


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), grad)


def _check_set(x: Tensor, op: str) -> None:
    if x.data.ndim < 2:
        raise DimensionError(f"{op} expects a (.., rows, cols) tensor, got {x.shape}")
    if x.shape[-2] < 1:
        raise ContractError(f"{op} of an empty set")


def reduce_max_rows(x: Tensor) -> Tensor:
    """Columnwise max over the row axis; ties route the gradient to the first row."""
    _check_set(x, "reduce_max_rows")
    idx = np.argmax(x.data, axis=-2)[..., None, :]
    out = np.take_along_axis(x.data, idx, axis=-2)[..., 0, :]
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, idx, g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), grad)


def reduce_min_rows(x: Tensor) -> Tensor:
    _check_set(x, "reduce_min_rows")
    idx = np.argmin(x.data, axis=-2)[..., None, :]
    out = np.take_along_axis(x.data, idx, axis=-2)[..., 0, :]
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, idx, g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), grad)


def reduce_sum_rows(x: Tensor) -> Tensor:
    """Columnwise sum over rows, accumulated in sorted order.

    Sorting each column first makes the floating-point result independent
    of row order, so the reduction is bit-exactly permutation invariant.
    """
    _check_set(x, "reduce_sum_rows")
    out = np.sort(x.data, axis=-2).sum(axis=-2)
    shape = x.shape
    return _make(out, (x,), lambda g: (np.broadcast_to(g[..., None, :], shape).copy(),))


def reduce_mean_rows(x: Tensor) -> Tensor:
    _check_set(x, "reduce_mean_rows")
    return scale(reduce_sum_rows(x), 1.0 / x.shape[-2])


REDUCERS = {
    "max": reduce_max_rows,
    "min": reduce_min_rows,
    "sum": reduce_sum_rows,
    "mean": reduce_mean_rows,
}


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty sequence")
    nd = xs[0].data.ndim
    if any(t.data.ndim != nd for t in xs):
        raise DimensionError(f"concat: rank mismatch {[t.shape for t in xs]}")
    ax = axis % nd
    for t in xs[1:]:
        if t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("stack of an empty sequence")
    if any(t.shape != xs[0].shape for t in xs):
        raise DimensionError(f"stack: shapes differ {[t.shape for t in xs]}")
    ax = axis % (xs[0].data.ndim + 1)
    out = np.stack([t.data for t in xs], axis=ax)
    n = len(xs)
    return _make(out, tuple(xs), lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, filters: Tensor, b: Tensor) -> Tensor:
    """Valid stride-1 cross-correlation plus bias.

    ``x`` is (c_in, h, w) or (batch, c_in, h, w); ``filters`` is
    (c_out, c_in, kh, kw).
    """
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or filters.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, filters {filters.shape}")
    X = x.data if batched else x.data[None]
    F = filters.data
    c_out, c_in, kh, kw = F.shape
    n, c, h, w = X.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, filters expect {c_in}")
    if h < kh or w < kw:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {kh}x{kw}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {c_out} filters")
    oh, ow = h - kh + 1, w - kw + 1
    # (n, oh, ow, c*kh*kw)
    cols = sliding_window_view(X, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, -1)
    Fm = F.reshape(c_out, -1)
    out = (cols @ Fm.T + b.data).transpose(0, 3, 1, 2)

    def grad(g):
        g4 = g if batched else g[None]
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gf = (gm.T @ cols.reshape(-1, Fm.shape[1])).reshape(F.shape)
        gb = gm.sum(axis=0)
        gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, -1)
        Fr = F[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
        gx = (gcols @ Fr.T).transpose(0, 3, 1, 2)
        return (gx if batched else gx[0]), gf, gb

    return _make(out if batched else out[0], (x, filters, b), grad)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; a trailing odd row/column is dropped."""
    if x.data.ndim < 2:
        raise DimensionError(f"avg_pool2 expects (.., h, w), got {x.shape}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"avg_pool2 needs h, w >= 2, got {x.shape}")
    h2, w2 = h // 2, w // 2
    lead = x.shape[:-2]
    crop = x.data[..., : 2 * h2, : 2 * w2]
    out = crop.reshape(lead + (h2, 2, w2, 2)).mean(axis=(-3, -1))
    shape = x.shape

    def grad(g):
        up = np.repeat(np.repeat(g * 0.25, 2, axis=-2), 2, axis=-1)
        gx = np.zeros(shape, dtype=DTYPE)
        gx[..., : 2 * h2, : 2 * w2] = up
        return (gx,)

    return _make(out, (x,), grad)


# ---------------------------------------------------------------------------
# regularisation


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))
