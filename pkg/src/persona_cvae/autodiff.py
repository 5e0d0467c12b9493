"""Minimal dense-tensor library with reverse-mode automatic differentiation.

All forward math runs at 64-bit precision so analytic gradients can be
validated against central differences. Graphs are built eagerly through
closures; there is no global state, so independent graphs are safe to
evaluate on separate threads.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidSupportError, ShapeError


class Tensor:
    """N-d array of float64 plus an optional gradient and graph edge."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # graph construction helpers -------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.data.shape}")
        # iterative topo sort: graphs can be thousands of nodes deep
        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen and p._backward is not None:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise / linear algebra -----------------------------------------------


def add(a, b):
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def sub(a, b):
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b):
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._result(data, (a, b), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._result(data, tensors, backward)


def tanh(a):
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return Tensor._result(data, (a,), backward)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return Tensor._result(data, (a,), backward)


def log(a):
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._result(data, (a,), backward)


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to positions where mask is true.

    Off-support probabilities are exactly zero; on-support values are
    stabilized by max-subtraction. mask must broadcast to logits.shape.
    """
    logits = _as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, logits.data.shape)
    except ValueError:
        raise ShapeError(
            f"mask shape {mask.shape} does not broadcast to logits shape {logits.data.shape}"
        ) from None
    if not mask.any(axis=-1).all():
        raise InvalidSupportError("masked_softmax: a row has an all-false mask")

    neg = np.where(mask, logits.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    e = np.where(mask, e, 0.0)
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            inner = (g * probs).sum(axis=-1, keepdims=True)
            logits._accumulate(probs * (g - inner))

    return Tensor._result(probs, (logits,), backward)


def softmax(logits):
    l = _as_tensor(logits)
    return masked_softmax(l, np.ones(l.data.shape, dtype=bool))


# indexing --------------------------------------------------------------------


def gather(table, ids):
    """Look up rows of a (V, E) table by an integer index array.

    Output shape is ids.shape + (E,). Gradients scatter-add, so duplicate
    indices accumulate.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather expects a 2-d table, got {table.data.shape}")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate(gt)

    return Tensor._result(data, (table,), backward)


def pick(t, ids):
    """Select one entry along the last axis per leading position."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != t.data.shape[:-1]:
        raise ShapeError(f"pick index shape {ids.shape} != leading shape {t.data.shape[:-1]}")
    flat = t.data.reshape(-1, t.data.shape[-1])
    rows = np.arange(flat.shape[0])
    data = flat[rows, ids.reshape(-1)].reshape(ids.shape)

    def backward(g):
        if t.requires_grad:
            gt = np.zeros_like(flat)
            np.add.at(gt, (rows, ids.reshape(-1)), g.reshape(-1))
            t._accumulate(gt.reshape(t.data.shape))

    return Tensor._result(data, (t,), backward)


# reductions / shape -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return Tensor._result(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return Tensor._result(data, (a,), backward)


def slice_last(a, start, stop):
    """Contiguous slice along the last axis (used to split fused gate matrices)."""
    data = a.data[..., start:stop]

    def backward(g):
        if a.requires_grad:
            gt = np.zeros_like(a.data)
            gt[..., start:stop] = g
            a._accumulate(gt)

    return Tensor._result(data, (a,), backward)


def slice_rows(a, start, stop):
    """Contiguous slice along the first axis."""
    data = a.data[start:stop]

    def backward(g):
        if a.requires_grad:
            gt = np.zeros_like(a.data)
            gt[start:stop] = g
            a._accumulate(gt)

    return Tensor._result(data, (a,), backward)


def cross_entropy(probs, targets, weights=None):
    """Negative log-likelihood of integer targets under a probability tensor.

    probs has support on its last axis; weights (same shape as targets)
    zero out ignored positions and keep the log finite there.
    """
    picked = pick(probs, targets)
    if weights is not None:
        w = Tensor(np.asarray(weights, dtype=np.float64))
        # off-mask entries become log(1) = 0 and carry no gradient
        picked = add(mul(picked, w), Tensor(1.0 - w.data))
    return -tsum(log(picked))


# gradient checking ------------------------------------------------------------


def grad_check(op, inputs, eps=1e-5):
    """Max relative error between analytic gradients and central differences.

    op must map the given tensors to a scalar Tensor and be deterministic
    under repeated evaluation. Error is |analytic - fd| / max(1, |fd|),
    maximized over every element of every input.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        # perturbation below writes through a flat view
        t.data = np.ascontiguousarray(t.data)
    out = op(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued op")
    for t in inputs:
        t.grad = None
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = op(*inputs).data.item()
            flat[i] = orig - eps
            f_minus = op(*inputs).data.item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ga_flat[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst


# randomness -------------------------------------------------------------------


class SeededSampler:
    """Deterministic random source; identical seeds replay identical streams."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self, shape):
        return self._rng.standard_normal(size=shape).astype(np.float64)

    def uniform(self, low, high, shape):
        return self._rng.uniform(low, high, size=shape).astype(np.float64)

    def permutation(self, n):
        return self._rng.permutation(n)

    def integers(self, low, high):
        return int(self._rng.integers(low, high))

    def child(self, index):
        """Stream split: child samplers are a pure function of (seed, index)."""
        key = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(index),))
        return SeededSampler(int(key.generate_state(1, np.uint64)[0]))


def sample_standard_normal(sampler, n):
    """n i.i.d. draws from N(0, 1) as a flat float64 vector."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return sampler.standard_normal(int(n))
