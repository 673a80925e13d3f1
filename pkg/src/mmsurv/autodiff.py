"""Dense float64 tensors with a define-by-run tape and an AdamW optimizer.

Only the operations the survival model needs are provided.  Every op computes
its value eagerly with numpy and, when a :class:`Tape` is active and at least
one input requires a gradient, appends a record holding the backward rule.
``Tape.backward`` walks those records in exact reverse order.

Tensor data is never mutated in place; optimizer steps rebind ``.data``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.is_leaf = True

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    __array_priority__ = 100.0

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    rule: object


@dataclass
class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; ops executed inside are recorded.  Nesting is
    allowed, the innermost tape records.
    """

    records: list = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> dict:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Returns a mapping from ``id(tensor)`` to gradient for all recorded nodes.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.rule(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if t.is_leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            t.grad = grads[key] if t.grad is None else t.grad + grads[key]
        return grads


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _record(out_data, inputs, rule):
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.is_leaf = False
        tape.records.append(_Record(tuple(inputs), out, rule))
    return out


def no_grad_value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x, clamp=None):
    """Natural log; with ``clamp`` the argument is floored first (zero grad below)."""
    x = as_tensor(x)
    xd = x.data
    if clamp is not None:
        safe = np.maximum(xd, clamp)
        mask = xd >= clamp
        return _record(np.log(safe), (x,), lambda g: (np.where(mask, g / safe, 0.0),))
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


# activations

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = as_tensor(x)
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


# reductions and shape ops

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), rule)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x):
    x = as_tensor(x)
    return _record(x.data.T, (x,), lambda g: (g.T,))


def getitem(x, idx):
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), rule)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# fused ops with hand-written backward rules

def softmax_last(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), rule)


def layer_norm(x, gamma=None, beta=None, eps=LN_EPS):
    """Normalize over the last dimension, then apply ``gamma * xhat + beta``."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    # zero-variance slices with eps=0 map to 0
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv

    def norm_rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _record(xhat, (x,), norm_rule)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def l2_normalize_rows(x):
    """Rows scaled to unit L2 norm; all-zero rows stay zero."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    inv = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)
    out = xd * inv

    def rule(g):
        return (inv * (g - out * (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), rule)


def dropout(x, p, rng, training):
    """Inverted dropout.  Identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def gather_rows(x, index):
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def rule(g):
        full = np.zeros((n,) + g.shape[1:])
        np.add.at(full, index, g)
        return (full,)

    return _record(x.data[index], (x,), rule)


def _check_segments(segment_ids, num_segments):
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    return ids


def segment_sum(values, segment_ids, num_segments):
    values = as_tensor(values)
    ids = _check_segments(segment_ids, num_segments)
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, ids, values.data)
    return _record(out, (values,), lambda g: (g[ids],))


def segment_mean(values, segment_ids, num_segments):
    """Row-wise mean per segment; empty segments give zero rows."""
    values = as_tensor(values)
    ids = _check_segments(segment_ids, num_segments)
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    scale = scale.reshape((-1,) + (1,) * (values.ndim - 1))
    out = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(out, ids, values.data)
    out *= scale
    return _record(out, (values,), lambda g: ((g * scale)[ids],))


def segment_softmax(scores, segment_ids, num_segments):
    """Softmax of ``scores`` (E x H) within each segment, per column."""
    scores = as_tensor(scores)
    ids = _check_segments(segment_ids, num_segments)
    sd = scores.data
    seg_max = np.full((num_segments,) + sd.shape[1:], -np.inf)
    np.maximum.at(seg_max, ids, sd)
    e = np.exp(sd - seg_max[ids])
    denom = np.zeros((num_segments,) + sd.shape[1:])
    np.add.at(denom, ids, e)
    out = e / denom[ids]

    def rule(g):
        dot = np.zeros((num_segments,) + sd.shape[1:])
        np.add.at(dot, ids, g * out)
        return (out * (g - dot[ids]),)

    return _record(out, (scores,), rule)


def backward(tape: Tape, loss: Tensor, params=None):
    """Run the tape backwards; return gradients for ``params`` (zeros if unused)."""
    grads = tape.backward(loss)
    if params is None:
        return grads
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# optimizer

@dataclass
class AdamWState:
    lr: float
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamWState):
    """One decoupled-weight-decay Adam update; rebinds each ``param.data``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ShapeError("params and grads differ in length")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        decayed = p.data * (1.0 - state.lr * state.weight_decay)
        p.data = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class AdamW:
    def __init__(self, params, lr, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads):
        adamw_step(self.params, grads, self.state)
