"""Dense float64 tensors with a reverse-mode differentiation tape.

Every op takes and returns :class:`Tensor`. While a :class:`Tape` is active
(``with Tape() as tape:``), ops whose inputs require gradients are recorded
in execution order; ``tape.backward(loss)`` replays their adjoints in exact
reverse order. Outside a tape, ops compute values only.

Spatial ops accept any number of leading batch axes, so one call can cover
every frame of every sample in a training batch.
"""

import threading
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rfuda.errors import ConfigError, DimensionError, NumericalError, UsageError

TRAIN = "train"
EVAL = "eval"

LOG_FLOOR = 1e-12
_SOFTPLUS_LINEAR_FROM = 30.0

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
RngArg = Union[np.random.Generator, Sequence[np.random.Generator]]


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: Optional[int] = None):
        return reduce_sum(self, axis)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape (stop-gradient)."""
    return Tensor(x.data, requires_grad=False)


# ----------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op: str, out: Tensor, parents: tuple, backward: BackwardFn):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; confined to the thread that opened it."""

    def __init__(self, check_numerics: bool = False):
        self.check_numerics = check_numerics
        self.nodes: list[_Node] = []
        self._position: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, out: Tensor, parents: tuple, backward: BackwardFn):
        for parent in parents:
            if parent.requires_grad and id(parent) not in self._position:
                self._leaves.setdefault(id(parent), parent)
        self._position[id(out)] = len(self.nodes)
        self.nodes.append(_Node(op, out, parents, backward))

    def op_names(self) -> list[str]:
        return [node.op for node in self.nodes]

    def first_nonfinite(self) -> Optional[str]:
        """Name (``op#index``) of the first recorded op whose output is not finite."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.data)):
                return f"{node.op}#{i}"
        return None

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        end = self._position.get(id(loss))
        if end is None:
            raise UsageError("loss was not produced on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for node in self.nodes[end + 1:]:
            node.out.grad = np.zeros_like(node.out.data)
        for node in reversed(self.nodes[: end + 1]):
            g = pending.pop(id(node.out), None)
            if g is None:
                node.out.grad = np.zeros_like(node.out.data)
                continue
            node.out.grad = g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
        for key, leaf in self._leaves.items():
            g = pending.pop(key, None)
            leaf.grad = g if g is not None else np.zeros_like(leaf.data)

    def reset(self) -> None:
        self.nodes.clear()
        self._position.clear()
        self._leaves.clear()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every tensor that led to ``loss``."""
    tape = tape or current_tape()
    if tape is None:
        raise UsageError("backward() called with no active tape")
    tape.backward(loss)


def _emit(op: str, data: np.ndarray, parents: tuple, backward_fn: BackwardFn) -> Tensor:
    tape = current_tape()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if tape is not None:
        if tape.check_numerics and not np.all(np.isfinite(out.data)):
            raise NumericalError(f"non-finite output after {len(tape.nodes)} recorded ops", op=op)
        if needs_grad:
            tape.record(op, out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------
# Elementwise arithmetic and shape ops
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", x.data.sum(axis=axis), (x,), back)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(
        (isinstance(i, (int, np.integer, slice)) and not isinstance(i, bool)) or i is None or i is Ellipsis
        for i in parts
    )

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            # a basic index addresses each element at most once
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("index", x.data[index], (x,), back)


def stack(rows: Sequence[Tensor]) -> Tensor:
    """Join equally shaped tensors along a new leading axis."""
    rows = tuple(as_tensor(r) for r in rows)
    if not rows:
        raise UsageError("stack needs at least one tensor")
    for r in rows[1:]:
        if r.shape != rows[0].shape:
            raise DimensionError(f"cannot stack {r.shape} onto {rows[0].shape}", axis="rows")
    return _emit("stack", np.stack([r.data for r in rows]), rows, lambda g: tuple(g))


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear input width {x.shape[-1]} does not match weight {weight.shape}", axis="d_in"
        )

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        return g @ weight.data, g2.T @ x2

    return _emit("linear", x.data @ weight.data.T, (x, weight), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"dense input width {x.shape[-1]} does not match weight {weight.shape}", axis="d_in"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"dense bias {bias.shape} does not match weight {weight.shape}", axis="d_out"
        )

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        return g @ weight.data, g2.T @ x2, g2.sum(axis=0)

    return _emit("dense", x.data @ weight.data.T + bias.data, (x, weight, bias), back)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is ``[..., C_in, H, W]``, ``kernels`` is ``[C_out, C_in, k, k]``;
    the result is ``[..., C_out, H-k+1, W-k+1]``.
    """
    if x.ndim < 3:
        raise DimensionError(f"conv2d input must be [..., C_in, H, W], got {x.shape}", axis="C_in")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d kernels must be [C_out, C_in, k, k], got {kernels.shape}", axis="k")
    c_out, c_in, k, _ = kernels.shape
    if x.shape[-3] != c_in:
        raise DimensionError(f"conv2d input has {x.shape[-3]} channels, kernels expect {c_in}", axis="C_in")
    if k > x.shape[-2]:
        raise DimensionError(f"kernel size {k} exceeds input height {x.shape[-2]}", axis="H")
    if k > x.shape[-1]:
        raise DimensionError(f"kernel size {k} exceeds input width {x.shape[-1]}", axis="W")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match {c_out} kernels", axis="C_out")

    windows = sliding_window_view(x.data, (k, k), axis=(-2, -1))
    out = np.tensordot(windows, kernels.data, axes=([-5, -2, -1], [1, 2, 3]))
    out = np.moveaxis(out, -1, -3) + bias.data[:, None, None]

    def back(g):
        h_out, w_out = g.shape[-2:]
        g2 = g.reshape(-1, c_out, h_out, w_out)
        g_bias = g2.sum(axis=(0, 2, 3))
        g_kernels = np.tensordot(
            g2, windows.reshape(-1, c_in, h_out, w_out, k, k), axes=([0, 2, 3], [0, 2, 3])
        )
        g_x = None
        if x.requires_grad:
            pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
            g_windows = sliding_window_view(np.pad(g, pad), (k, k), axis=(-2, -1))
            g_x = np.tensordot(
                g_windows, kernels.data[:, :, ::-1, ::-1], axes=([-5, -2, -1], [0, 2, 3])
            )
            g_x = np.moveaxis(g_x, -1, -3)
        return g_x, g_kernels, g_bias

    return _emit("conv2d", out, (x, kernels, bias), back)


def max_pool2d(x: Tensor, p: int) -> Tensor:
    """Disjoint ``p x p`` max pooling over the last two axes.

    Gradient goes to the first maximum in row-major window order.
    """
    if x.ndim < 2:
        raise DimensionError(f"max_pool2d input must be [..., H, W], got {x.shape}", axis="H")
    h, w = x.shape[-2:]
    if p < 1 or h % p:
        raise DimensionError(f"pool window {p} does not divide height {h}", axis="H")
    if w % p:
        raise DimensionError(f"pool window {p} does not divide width {w}", axis="W")
    lead = x.shape[:-2]
    blocks = np.moveaxis(x.data.reshape(*lead, h // p, p, w // p, p), -3, -2)
    flat = blocks.reshape(*lead, h // p, w // p, p * p)
    argmax = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, argmax, axis=-1)[..., 0]

    def back(g):
        routed = np.zeros_like(flat)
        np.put_along_axis(routed, argmax, g[..., None], axis=-1)
        routed = np.moveaxis(routed.reshape(*lead, h // p, w // p, p, p), -2, -3)
        return (routed.reshape(x.shape),)

    return _emit("max_pool2d", out, (x,), back)


def dropout(x: Tensor, rate: float, rng: Optional[RngArg], mode: str) -> Tensor:
    """Inverted dropout.

    ``rng`` may be a single generator or one generator per entry of the
    leading axis, in which case row ``i`` draws its mask from ``rng[i]``.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if mode != TRAIN:
        raise UsageError(f"unknown mode {mode!r}; expected '{TRAIN}' or '{EVAL}'")
    if rng is None:
        raise UsageError("train-mode dropout needs a random stream")
    if isinstance(rng, np.random.Generator):
        keep = rng.random(x.shape) >= rate
    else:
        if len(rng) != x.shape[0]:
            raise DimensionError(
                f"{len(rng)} random streams for a leading axis of {x.shape[0]}", axis="batch"
            )
        keep = np.stack([r.random(x.shape[1:]) >= rate for r in rng])
    scale = keep / (1.0 - rate)
    return _emit("dropout", x.data * scale, (x,), lambda g: (g * scale,))


# ----------------------------------------------------------------------
# Activations
# ----------------------------------------------------------------------

def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x: Tensor) -> Tensor:
    return _emit("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x: Tensor) -> Tensor:
    """``ln(1 + e^x)``, switching to ``x + ln(1 + e^-x)`` above 30."""
    a = x.data
    big = a > _SOFTPLUS_LINEAR_FROM
    out = np.where(
        big,
        a + np.log1p(np.exp(-np.where(big, a, 0.0))),
        np.log1p(np.exp(np.minimum(a, _SOFTPLUS_LINEAR_FROM))),
    )
    return _emit("softplus", out, (x,), lambda g: (g * _sigmoid(a),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (x,), back)


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the input clamped below at ``floor``."""
    clamped = np.maximum(x.data, floor)
    live = x.data > floor
    return _emit(
        "log", np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),)
    )


# ----------------------------------------------------------------------
# Recurrent cell
# ----------------------------------------------------------------------

GRU_GATES = ("z", "r", "h")


def gru_step(x_t: Tensor, h_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU step.

    ``params`` holds ``w_{z,r,h}`` ``[d_h, d_u]``, ``u_{z,r,h}`` ``[d_h, d_h]``
    and ``b_{z,r,h}`` ``[d_h]``::

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        c = tanh(W_h x + U_h (r * h) + b_h)
        h' = (1 - z) * h + z * c
    """
    d_h = params["u_z"].shape[0]
    if x_t.shape[-1] != params["w_z"].shape[1]:
        raise DimensionError(
            f"GRU input width {x_t.shape[-1]} does not match {params['w_z'].shape[1]}", axis="d_u"
        )
    if h_prev.shape[-1] != d_h:
        raise DimensionError(f"GRU hidden width {h_prev.shape[-1]} does not match {d_h}", axis="d_h")

    z = sigmoid(dense(x_t, params["w_z"], params["b_z"]) + linear(h_prev, params["u_z"]))
    r = sigmoid(dense(x_t, params["w_r"], params["b_r"]) + linear(h_prev, params["u_r"]))
    candidate = tanh(dense(x_t, params["w_h"], params["b_h"]) + linear(r * h_prev, params["u_h"]))
    return (1.0 - z) * h_prev + z * candidate
