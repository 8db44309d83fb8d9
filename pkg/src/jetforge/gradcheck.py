"""Central finite-difference checks for the autodiff engine."""

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor, no_grad

STEP = 1e-5
MODEL_STEP = 1e-6
# Gradients with a norm below this compare on absolute error: an exactly
# zero gradient (softmax over a width-1 axis) leaves only roundoff.
ATOL = 1e-6


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), ATOL)
    return float(np.linalg.norm(a - b) / scale)


def central(f, h=STEP):
    """Fourth-order central difference of ``f(t)`` at ``t = 0``."""
    return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)


def numeric_grad(f, x, h=STEP):
    """Central differences of the scalar function ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]

        def shifted(t, idx=idx, orig=orig):
            x[idx] = orig + t
            return f(x)

        g[idx] = central(shifted, h)
        x[idx] = orig
    return g


def check_op(fn, arrays, rng, h=STEP):
    """Largest relative error between analytic and numeric gradients of ``fn``.

    The output is contracted with a fixed random tensor so that every
    output element contributes to the scalar being differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    T.sum(out * Tensor(weights)).backward()

    worst = 0.0
    for i, t in enumerate(tensors):

        def scalar(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(x)
            with no_grad():
                return float((fn(*args).data * weights).sum())

        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(analytic, numeric_grad(scalar, arrays[i], h)))
    return worst


def check_model_loss(state, batch, rng, coords=10, directions=3, h=MODEL_STEP, training=True):
    """Relative gradient error of the model loss on sampled coordinates and directions."""
    names = list(state.params)

    def loss_value():
        with no_grad():
            return M.loss(M.forward(state, batch, training=training), batch.labels).item()

    state.zero_grad()
    M.loss(M.forward(state, batch, training=training), batch.labels).backward()
    grads = {n: state.params[n].grad.copy() for n in names}
    state.zero_grad()

    analytic, numeric = [], []
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        p = state.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        orig = p.data[idx]

        def shifted(t, p=p, idx=idx, orig=orig):
            p.data[idx] = orig + t
            return loss_value()

        numeric.append(central(shifted, h))
        p.data[idx] = orig
        analytic.append(grads[name][idx])
    worst = rel_err(analytic, numeric) if coords else 0.0

    for _ in range(directions):
        v = {n: rng.normal(size=state.params[n].shape) for n in names}
        norm = np.sqrt(sum(float((x**2).sum()) for x in v.values()))
        v = {n: x / norm for n, x in v.items()}
        base = {n: state.params[n].data.copy() for n in names}

        def along(t, v=v, base=base):
            for n in names:
                state.params[n].data = base[n] + t * v[n]
            return loss_value()

        numeric_dd = central(along, h)
        for n in names:
            state.params[n].data = base[n]
        dd = sum(float((grads[n] * v[n]).sum()) for n in names)
        worst = max(worst, rel_err(dd, numeric_dd))
    return worst


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def op_cases(rng):
    """Randomized ``(name, fn, arrays)`` cases for every differentiable op.

    Every dimension is drawn from 1..4 (at least 2 where an op needs it).
    """

    def dim(lo=1):
        return int(rng.integers(lo, 5))

    b, m, k, n = dim(), dim(), dim(), dim()
    shape3 = (b, m, n)
    cases = [
        ("add", T.add, [rng.normal(size=shape3), rng.normal(size=(m, n))]),
        ("sub", T.sub, [rng.normal(size=shape3), rng.normal(size=(n,))]),
        ("mul", T.mul, [rng.normal(size=shape3), rng.normal(size=(m, n))]),
        ("scale", lambda x: x * 1.7, [rng.normal(size=shape3)]),
        ("relu", T.relu, [_away_from_zero(rng, shape3)]),
        ("matmul", T.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(k, n))]),
        ("linear", T.linear, [rng.normal(size=(b, m, k)), rng.normal(size=(n, k)), rng.normal(size=(n,))]),
        ("sum", lambda x: T.sum(x, axis=1), [rng.normal(size=shape3)]),
        ("mean", lambda x: T.mean(x, axis=-1, keepdims=True), [rng.normal(size=shape3)]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [rng.normal(size=shape3)]),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), [rng.normal(size=shape3)]),
        ("reshape", lambda x: T.reshape(x, (-1,)), [rng.normal(size=shape3)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [rng.normal(size=shape3)]),
        ("swapaxes", lambda x: T.swapaxes(x, -1, -2), [rng.normal(size=shape3)]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [rng.normal(size=shape3), rng.normal(size=(b, k, n))]),
        ("narrow", lambda x: T.narrow(x, -1, n // 2, n - n // 2), [rng.normal(size=shape3)]),
        ("take", lambda x: T.take(x, m - 1, axis=1), [rng.normal(size=shape3)]),
        ("expand", lambda x: T.expand(x, (b, m, n)), [rng.normal(size=(1, n))]),
    ]
    seed = int(rng.integers(2**31))
    cases.append(
        ("dropout", lambda x: T.dropout(x, 0.3, np.random.default_rng(seed)), [rng.normal(size=shape3)])
    )
    labels = rng.integers(n, size=m)
    cases.append(
        ("nll_loss", lambda x: T.nll_loss(T.log_softmax(x, axis=-1), labels), [rng.normal(size=(m, n))])
    )
    rows = dim(2)
    for training in (True, False):
        bn = T.BatchNormState.create(n)
        bn.running_mean = rng.normal(size=n)
        bn.running_var = rng.uniform(0.5, 2.0, size=n)

        def norm(x, g, beta, bn=bn, training=training):
            bn.weight, bn.bias = g, beta
            return T.batchnorm1d(x, bn, training)

        arrays = [rng.normal(size=(b, rows, n)), rng.normal(size=n), rng.normal(size=n)]
        cases.append((f"batchnorm1d[{'train' if training else 'eval'}]", norm, arrays))
    return cases
