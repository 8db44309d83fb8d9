"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` carrying a
monotonically increasing id, so sorting reachable nodes by id yields a
valid topological order. :func:`backward` walks that order in reverse,
accumulates gradients into leaves, then releases the recorded graph; a
graph can be differentiated exactly once.

Broadcasting is limited to *leading* batch dimensions: an operand whose
shape is a suffix of the other's shape is replicated over the missing
leading axes (bias vectors, shared weights). Anything else must go through
:func:`expand` explicitly.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_node_ids = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    """One recorded operation: its inputs and how to push gradients to them."""

    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.id}, {self.op!r})"


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, out, inputs, backward_fn):
    _check_finite(out, op)
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires)
    if requires:
        result._node = Node(op, inputs, backward_fn)
    return result


def _sum_to(grad, shape):
    """Reduce ``grad`` over broadcast axes so it matches ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_suffix(a, b, op):
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dimensions")


# ---------------------------------------------------------------------------
# Graph traversal


@dataclass
class Graph:
    """Recorded operations reachable from an output, in construction order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, output):
        seen = {}
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for t in node.inputs:
                if t._node is not None and t._node.id not in seen:
                    stack.append(t._node)
        return cls(sorted(seen.values(), key=lambda n: n.id))


def backward(loss):
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss._node.backward_fn is None:
        raise ContractError("graph has already been consumed by a previous backward")

    graph = Graph.from_output(loss)
    pending = {loss._node.id: seed}
    for node in reversed(graph.nodes):
        g = pending.pop(node.id, None)
        fn, inputs = node.backward_fn, node.inputs
        node.backward_fn, node.inputs = None, ()
        if g is None or fn is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = inp._node.id
                pending[key] = gi if key not in pending else pending[key] + gi


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_sum_to(g, sa), -_sum_to(g, sb)))


def mul(a, b):
    """Elementwise product; ``b`` may be a Python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("scale", a.data * c, (a,), lambda g: (g * c,))
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        "mul", ad * bd, (a, b), lambda g: (_sum_to(g * bd, ad.shape), _sum_to(g * ad, bd.shape))
    )


def relu(x):
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x, p, rng, training=True):
    """Inverted dropout: zero with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    """Batched matrix product ``[..., m, k] @ [..., k, n] -> [..., m, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _sum_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _sum_to(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), grad_fn)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` with weight stored as ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gx = g @ wd
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# Reductions and normalizations


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), grad_fn)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), grad_fn)


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer.

    ``momentum`` follows ``running = (1 - m) * running + m * batch``.
    """

    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, eps=1e-5, momentum=0.1):
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            eps,
            momentum,
        )

    @property
    def channels(self):
        return self.weight.shape[0]


def batchnorm1d(x, state, training):
    """Batch normalization over the last axis of a 2-D or 3-D input.

    In training mode the statistics are taken jointly over every
    non-channel axis and the running estimates are updated in place; in
    inference mode only the stored running statistics are used.
    """
    if x.ndim not in (2, 3) or x.shape[-1] != state.channels:
        raise DimensionError(
            f"batchnorm1d: expected [..., {state.channels}] with 2 or 3 dims, got {x.shape}"
        )
    gamma, beta = state.weight, state.bias
    shape = x.shape
    x2 = x.data.reshape(-1, shape[-1])

    if training:
        n = x2.shape[0]
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mu, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x2 - mu) * inv_std
    out = (xhat * gamma.data + beta.data).reshape(shape)

    def grad_fn(g):
        g2 = g.reshape(-1, shape[-1])
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if training:
            n = g2.shape[0]
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            dx = dxhat * inv_std
        return dx.reshape(shape), dgamma, dbeta

    return _make("batchnorm1d", out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x, shape):
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a, b):
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors, axis):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn)


def narrow(x, axis, start, length):
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[ax]:
        raise IndexError(f"narrow: [{start}, {start + length}) out of range for axis of size {x.shape[ax]}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make("narrow", x.data[index].copy(), (x,), grad_fn)


def take(x, index, axis):
    """Select one position along ``axis``, dropping that axis."""
    ax = axis % x.ndim
    if not -x.shape[ax] <= index < x.shape[ax]:
        raise IndexError(f"take: index {index} out of range for axis of size {x.shape[ax]}")
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return _make("take", np.take(x.data, index, axis=ax).copy(), (x,), grad_fn)


def expand(x, shape):
    """Replicate ``x`` to ``shape`` by adding leading axes or stretching size-1 axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}") from None
    old = x.shape
    return _make("expand", out, (x,), lambda g: (_sum_to(g, old),))


# ---------------------------------------------------------------------------
# Losses and estimators


def nll_loss(log_probs, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``log_probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise DimensionError(f"nll_loss: log_probs {log_probs.shape} vs labels {labels.shape}")
    k = log_probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"nll_loss: labels must lie in [0, {k})")
    n = labels.shape[0]
    rows = np.arange(n)
    out = np.asarray(-log_probs.data[rows, labels].mean())

    def grad_fn(g):
        full = np.zeros(log_probs.shape)
        full[rows, labels] = -g / n
        return (full,)

    return _make("nll_loss", out, (log_probs,), grad_fn)


def ste_wrap(forward_value, proxy):
    """Straight-through estimator.

    Returns ``forward_value`` in the forward pass while routing the upstream
    gradient to ``proxy`` unchanged in the backward pass.
    """
    if forward_value.shape != proxy.shape:
        raise DimensionError(f"ste_wrap: {forward_value.shape} vs {proxy.shape}")
    return _make("ste", forward_value.data.copy(), (proxy,), lambda g: (g,))
