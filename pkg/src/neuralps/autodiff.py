"""Reverse-mode automatic differentiation over dense numpy arrays.

A small tape-based engine: ops executed while a tape is active are recorded
together with a backward rule, and `backward` replays the tape in reverse to
populate gradients. Covers exactly the operations needed to train the three
coordinate MLPs, plus the Adam optimizer.
"""

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes invalid for an operation."""

    def __init__(self, kind, *shapes, detail=None):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{kind}: incompatible shapes {' vs '.join(map(str, self.shapes))}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """Dense real tensor with an optional gradient buffer.

    Data is immutable after creation except for `grad` and the in-place
    parameter update done by `adam_step` between iterations.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # light operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    """Trainable leaf tensor (copies its input)."""
    arr = np.array(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=True, name=name)


class Tape:
    """Ordered operation record; recording order is topological by construction."""

    __slots__ = ("ops",)

    def __init__(self):
        self.ops = []  # (output, inputs, backward_fn)


_TAPES = []


def _tape():
    return _TAPES[-1] if _TAPES else None


@contextmanager
def record(tape=None):
    """Activate a tape; ops run inside the block are recorded on it."""
    t = tape if tape is not None else Tape()
    _TAPES.append(t)
    try:
        yield t
    finally:
        _TAPES.pop()


def _make(kind, out_data, inputs, backward_fn):
    tape = _tape()
    track = tape is not None and any(x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.ops.append((out, inputs, backward_fn))
    return out


def backward(tape, loss):
    """Populate `grad` on every requires_grad tensor reachable from `loss`.

    Visits the tape in exact reverse recording order. Tensors on the tape
    that are not reachable from the loss end up with zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape.ops):
        og = out.grad
        if og is None:
            continue
        for x, g in zip(inputs, fn(og)):
            if g is None or not x.requires_grad:
                continue
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g
    for out, inputs, _ in tape.ops:
        for x in (out, *inputs):
            if x.requires_grad and x.grad is None:
                x.grad = np.zeros_like(x.data)


def _unbroadcast(g, shape):
    # inverse of numpy broadcasting: sum g down to `shape`
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operations


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(og):
        return (og @ b.data.T if need_a else None,
                a.data.T @ og if need_b else None)

    return _make("matmul", out, (a, b), bw)


def add(a, b):
    """Elementwise add with numpy broadcasting (covers bias-over-batch)."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bw(og):
        return _unbroadcast(og, a.shape), _unbroadcast(og, b.shape)

    return _make("add", out, (a, b), bw)


def mul(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(og):
        return (_unbroadcast(og * b.data, a.shape) if need_a else None,
                _unbroadcast(og * a.data, b.shape) if need_b else None)

    return _make("mul", out, (a, b), bw)


def relu(x):
    """max(x, 0); subgradient at 0 is 0."""
    out = np.maximum(x.data, 0)

    def bw(og):
        return ((x.data > 0) * og,)

    return _make("relu", out, (x,), bw)


# the rendering equation's max(l.n, 0) clamp is the same function
max_with_zero = relu


def sin(x):
    def bw(og):
        return (np.cos(x.data) * og,)

    return _make("sin", np.sin(x.data), (x,), bw)


def cos(x):
    def bw(og):
        return (-np.sin(x.data) * og,)

    return _make("cos", np.cos(x.data), (x,), bw)


def absolute(x):
    def bw(og):
        return (np.sign(x.data) * og,)

    return _make("abs", np.abs(x.data), (x,), bw)


def square(x):
    def bw(og):
        return (2.0 * x.data * og,)

    return _make("square", x.data * x.data, (x,), bw)


def reciprocal(x):
    out = 1.0 / x.data

    def bw(og):
        return (-og * out * out,)

    return _make("reciprocal", out, (x,), bw)


def scale(x, s):
    s = float(s)

    def bw(og):
        return (s * og,)

    return _make("scale", x.data * s, (x,), bw)


def reduce_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(og):
        if axis is not None and not keepdims:
            og = np.expand_dims(og, axis)
        return (np.broadcast_to(og, x.shape).copy(),)

    return _make("sum", out, (x,), bw)


def reduce_mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.shape[axis]

    def bw(og):
        if axis is not None and not keepdims:
            og = np.expand_dims(og, axis)
        return (np.broadcast_to(og / count, x.shape).copy(),)

    return _make("mean", out, (x,), bw)


def reduce_min(x, axis=None):
    """Min-reduce; on ties the gradient routes to the first minimal element."""
    out = x.data.min(axis=axis)

    def bw(og):
        g = np.zeros_like(x.data)
        if axis is None:
            g.reshape(-1)[np.argmin(x.data)] = og
        else:
            idx = np.expand_dims(np.argmin(x.data, axis=axis), axis)
            np.put_along_axis(g, idx, np.expand_dims(og, axis), axis=axis)
        return (g,)

    return _make("min", out, (x,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(og):
        return tuple(np.split(og, splits, axis=axis))

    return _make("concat", out, tuple(tensors), bw)


def l2_normalize(x, eps=1e-12):
    """Normalize along the last axis."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bw(og):
        return ((og - y * (og * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (x,), bw)


def dot(a, b):
    """Dot product along the last axis, keepdims; broadcasts leading axes."""
    try:
        out = (a.data * b.data).sum(axis=-1, keepdims=True)
    except ValueError:
        raise ShapeError("dot", a.shape, b.shape) from None
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(og):
        return (_unbroadcast(og * b.data, a.shape) if need_a else None,
                _unbroadcast(og * a.data, b.shape) if need_b else None)

    return _make("dot", out, (a, b), bw)


def gather_rows(x, idx):
    """Select rows x[idx]; backward scatter-adds (duplicate indices accumulate)."""
    idx = np.asarray(idx)
    out = x.data[idx]

    def bw(og):
        g = np.zeros_like(x.data)
        np.add.at(g, idx, og)
        return (g,)

    return _make("gather_rows", out, (x,), bw)


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Adam moment buffers and hyperparameters for a fixed parameter list."""

    def __init__(self, params, learning_rate=5e-4, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


def adam_step(params, state):
    """One bias-corrected Adam update; zeroes all gradients afterwards."""
    params = list(params)
    if len(params) != len(state.params):
        raise ValueError(
            f"adam_step: got {len(params)} params, state holds {len(state.params)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name or i} has no gradient")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.grad = np.zeros_like(p.data)
