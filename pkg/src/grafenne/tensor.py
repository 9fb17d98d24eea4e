"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run tape: every op links the output tensor to its parents and
attaches a gradient closure. backward() runs one reverse topological sweep
and accumulates gradients additively, so several backward calls can reuse
one forward tape (zero grads in between).
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def detach(self):
        return Tensor(self.values.copy())

    def backward(self):
        backward(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, values, name):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _attach(out, parents, backward_fn):
    """Wire the tape edge if any parent needs gradients."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values + b.values)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _attach(out, (a, b), _bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values - b.values)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _attach(out, (a, b), _bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values * b.values)

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.values, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.values, b.shape)

    return _attach(out, (a, b), _bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim not in (1, 2) or b.values.ndim not in (1, 2):
        raise ValueError(f"matmul expects 1-D or 2-D operands, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = Tensor(av @ bv)

    def _bw():
        g = out.grad
        if a.values.ndim == 2 and b.values.ndim == 2:
            if a.requires_grad:
                a.grad += g @ bv.T
            if b.requires_grad:
                b.grad += av.T @ g
        elif a.values.ndim == 2:  # (m,k) @ (k,) -> (m,)
            if a.requires_grad:
                a.grad += g[:, None] * bv[None, :]
            if b.requires_grad:
                b.grad += av.T @ g
        elif b.values.ndim == 2:  # (k,) @ (k,n) -> (n,)
            if a.requires_grad:
                a.grad += bv @ g
            if b.requires_grad:
                b.grad += av[:, None] * g[None, :]
        else:  # dot product -> scalar
            if a.requires_grad:
                a.grad += g * bv
            if b.requires_grad:
                b.grad += g * av

    return _attach(out, (a, b), _bw)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.values.reshape(shape))

    def _bw():
        x.grad += out.grad.reshape(x.shape)

    return _attach(out, (x,), _bw)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.grad += g[tuple(idx)]

    return _attach(out, tuple(parts), _bw)


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.values >= 0  # subgradient at 0 takes the positive branch
    out = Tensor(np.where(pos, x.values, slope * x.values))

    def _bw():
        x.grad += out.grad * np.where(pos, 1.0, slope)

    return _attach(out, (x,), _bw)


def relu(x):
    x = as_tensor(x)
    pos = x.values >= 0
    out = Tensor(np.where(pos, x.values, 0.0))

    def _bw():
        x.grad += out.grad * pos

    return _attach(out, (x,), _bw)


def sigmoid(x):
    x = as_tensor(x)
    out = Tensor(_sigmoid_values(x.values))
    sv = out.values

    def _bw():
        x.grad += out.grad * sv * (1.0 - sv)

    return _attach(out, (x,), _bw)


def _sigmoid_values(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def gather_rows(x, index):
    """out[i] = x[index[i]]; scatter-add on the way back."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(x.values[index])

    def _bw():
        np.add.at(x.grad, index, out.grad)

    return _attach(out, (x,), _bw)


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of x into num_segments buckets."""
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    vals = np.zeros((num_segments,) + x.values.shape[1:])
    np.add.at(vals, segment_ids, x.values)
    out = Tensor(vals)

    def _bw():
        x.grad += out.grad[segment_ids]

    return _attach(out, (x,), _bw)


def _segment_ids_of(segments, n):
    """Accept either a 1-D id array or a list of index groups."""
    if isinstance(segments, (list, tuple)) and segments and not np.isscalar(segments[0]):
        ids = np.full(n, -1, dtype=np.int64)
        for k, group in enumerate(segments):
            ids[np.asarray(list(group), dtype=np.int64)] = k
        if (ids < 0).any():
            raise ValueError("segments do not partition the score vector")
        return ids, len(segments)
    ids = np.asarray(segments, dtype=np.int64)
    if ids.shape != (n,):
        raise ValueError(f"segment ids shape {ids.shape} != ({n},)")
    return ids, int(ids.max()) + 1 if n else 0


def segment_softmax(scores, segments, num_segments=None):
    """Softmax within each segment, stabilized by the segment max.

    Empty segments are simply never referenced, so they produce no NaNs.
    """
    scores = as_tensor(scores)
    if scores.values.ndim != 1:
        raise ValueError(f"segment_softmax expects 1-D scores, got {scores.shape}")
    n = scores.values.shape[0]
    ids, inferred = _segment_ids_of(segments, n)
    num = num_segments if num_segments is not None else inferred

    smax = np.full(num, -np.inf)
    np.maximum.at(smax, ids, scores.values)
    e = np.exp(scores.values - smax[ids])
    denom = np.zeros(num)
    np.add.at(denom, ids, e)
    p = e / denom[ids]
    out = Tensor(p)

    def _bw():
        g = out.grad
        dot = np.zeros(num)
        np.add.at(dot, ids, p * g)
        scores.grad += p * (g - dot[ids])

    return _attach(out, (scores,), _bw)


def stack_rows(rows):
    """Stack equal-length 1-D tensors into a matrix."""
    rows = [as_tensor(r) for r in rows]
    out = Tensor(np.stack([r.values for r in rows]))

    def _bw():
        g = out.grad
        for i, r in enumerate(rows):
            if r.requires_grad:
                r.grad += g[i]

    return _attach(out, tuple(rows), _bw)


def sum_all(x):
    x = as_tensor(x)
    out = Tensor(x.values.sum())

    def _bw():
        x.grad += out.grad

    return _attach(out, (x,), _bw)


def mean_all(x):
    x = as_tensor(x)
    out = Tensor(x.values.mean())
    inv = 1.0 / x.values.size

    def _bw():
        x.grad += out.grad * inv

    return _attach(out, (x,), _bw)


def mlp(x, weights, activation=leaky_relu):
    """Affine stack: weights is a flat [W0, b0, W1, b1, ...] list.

    Activation after every layer but the last; None means identity.
    """
    if len(weights) % 2 != 0:
        raise ValueError("mlp expects alternating weight/bias parameters")
    h = x
    n_layers = len(weights) // 2
    for i in range(n_layers):
        w, b = weights[2 * i], weights[2 * i + 1]
        h = add(matmul(h, w), b)
        if activation is not None and i < n_layers - 1:
            h = activation(h)
    return h


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.values.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0,{c})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = Tensor((lse - z[np.arange(n), labels]).mean())

    def _bw():
        soft = np.exp(z - lse[:, None])
        soft[np.arange(n), labels] -= 1.0
        logits.grad += out.grad * soft / n

    return _attach(out, (logits,), _bw)


def bce_with_logits(scores, targets):
    """Mean binary cross entropy, log-sum-exp stabilized."""
    scores = as_tensor(scores)
    t = np.asarray(targets, dtype=np.float64)
    s = scores.values
    if t.shape != s.shape:
        raise ValueError(f"targets shape {t.shape} != scores shape {s.shape}")
    loss = np.maximum(s, 0.0) - s * t + np.log1p(np.exp(-np.abs(s)))
    out = Tensor(loss.mean())
    n = s.size

    def _bw():
        scores.grad += out.grad * (_sigmoid_values(s) - t) / n

    return _attach(out, (scores,), _bw)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse sweep from a scalar loss; accumulates into .grad."""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = _topo_order(loss)
    for node in order:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.values)
    loss.grad = loss.grad + np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
