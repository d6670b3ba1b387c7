"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the primitives the ViT pipeline needs are provided. A graph is recorded
only when at least one input requires a gradient, so a frozen encoder fed with
constant images allocates no graph and no gradient buffers at all.

Broadcasting is restricted to a single rule: an operand whose shape is a
trailing suffix of the other operand's shape is repeated along the missing
leading dimensions. Anything else raises :class:`ShapeMismatch`.
"""

import math

import numpy as np
from scipy.special import erf

from .exceptions import EmptyMask, IndexOutOfRange, InvalidSchedule, ShapeMismatch

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An n-d float64 array with an optional gradient buffer.

    ``data`` is never mutated by an op; ``grad`` is allocated lazily during
    :meth:`backward` and only for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` defaults to ones, which for a scalar loss is the usual seed.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        out = Tensor(data, True, tuple(parents), op)
        out._backward = backward
        return out
    return Tensor(data, False, (), op)


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long_) or tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def elementwise(a, b, kind):
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


# linear algebra and layout

def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix shared across ``a``'s leading (batch) axes, or
    carry the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # single GEMM over flattened batch for the common weight case
        m, k = a.shape[-2], a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


# nonlinearities and normalisation

def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layernorm(x, gamma, beta, eps=1e-6):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "layernorm")


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward, "gelu")


# token bookkeeping

def gather_tokens(x, idx):
    """Select rows ``idx`` along the token axis (second to last).

    ``x`` is ``[..., T, d]``; ``idx`` is an integer array ``[..., k]`` with the
    same leading shape as ``x`` (or 1-d, shared by every leading index).
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    T = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= T):
        raise IndexOutOfRange(f"token index outside [0, {T})")
    if idx.ndim == 1:
        out = x.data[..., idx, :]

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (..., idx, slice(None)), g)
            return (gx,)

        return _result(out, (x,), backward, "gather_tokens")
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeMismatch(f"gather index leading shape {idx.shape[:-1]} != {x.shape[:-2]}")
    take = idx[..., None]
    out = np.take_along_axis(x.data, take, axis=-2)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, take, g, axis=-2)  # indices are unique per row
        return (gx,)

    return _result(out, (x,), backward, "gather_tokens")


def scatter_tokens(x, idx, num_tokens, fill):
    """Inverse of :func:`gather_tokens`: place rows of ``x`` at ``idx`` in a
    length-``num_tokens`` sequence, filling every other position with ``fill``.

    ``x`` is ``[..., k, d]``, ``idx`` ``[..., k]`` with unique entries per row and
    ``fill`` a ``[d]`` vector shared by all filled positions.
    """
    x, fill = as_tensor(x), as_tensor(fill)
    idx = np.asarray(idx, dtype=np.intp)
    d = x.shape[-1]
    if fill.shape != (d,):
        raise ShapeMismatch(f"fill vector must have shape ({d},), got {fill.shape}")
    if idx.shape != x.shape[:-1]:
        raise ShapeMismatch(f"scatter index shape {idx.shape} != {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_tokens):
        raise IndexOutOfRange(f"token index outside [0, {num_tokens})")
    lead = x.shape[:-2]
    placed = np.zeros(lead + (num_tokens,), dtype=bool)
    np.put_along_axis(placed, idx, True, axis=-1)
    out = np.broadcast_to(fill.data, lead + (num_tokens, d)).copy()
    take = idx[..., None]
    np.put_along_axis(out, take, x.data, axis=-2)

    def backward(g):
        gx = np.take_along_axis(g, take, axis=-2) if x.requires_grad else None
        gfill = g[~placed].sum(axis=0) if fill.requires_grad else None
        return gx, gfill

    return _result(out, (x, fill), backward, "scatter_tokens")


def mean_pool(x, axis=-2):
    """Average over the token axis."""
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward, "mean_pool")


# losses

def mse(a, b, element_mask):
    """Mean squared difference over the TRUE entries of ``element_mask``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(element_mask, dtype=bool)
    if a.shape != b.shape or mask.shape != a.shape:
        raise ShapeMismatch(f"mse operands/mask must share a shape: {a.shape}, {b.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("mse mask selects no elements")
    diff = np.where(mask, a.data - b.data, 0.0)

    def backward(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _result(np.asarray((diff * diff).sum() / n), (a, b), backward, "mse")


def cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy expects [B, C] logits and [B] labels, got {logits.shape}, {labels.shape}")
    B = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(B), labels].mean()

    def backward(g):
        probs = np.exp(log_p)
        probs[np.arange(B), labels] -= 1.0
        return (g * probs / B,)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


# optimisation

def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` and ``grads`` are sequences of arrays; ``state`` is a dict with
    ``"step"`` and per-parameter ``"m"``/``"v"`` lists (see :func:`adamw_init`).
    ``weight_decay`` may be a scalar or a per-parameter sequence.
    """
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    if np.ndim(weight_decay) == 0:
        weight_decay = [weight_decay] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state["m"][i], state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay[i]:
            p -= lr * weight_decay[i] * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def adamw_init(params):
    return {
        "step": 0,
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


class AdamW:
    """AdamW over a dict of named leaf tensors.

    Weight decay is skipped for vectors (biases, layernorm affines, the mask
    token), which is the usual transformer convention.
    """

    def __init__(self, params, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05):
        self.names = sorted(params)
        self.tensors = [params[n] for n in self.names]
        self.betas = betas
        self.eps = eps
        self.decay = [weight_decay if t.ndim >= 2 else 0.0 for t in self.tensors]
        self.state = adamw_init([t.data for t in self.tensors])

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self, lr):
        datas = [t.data for t in self.tensors]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        adamw_step(datas, grads, self.state, lr, self.betas[0], self.betas[1], self.eps, self.decay)


def lr_schedule(step, warmup_epochs, total_epochs, steps_per_epoch, base_lr):
    """Linear warmup to ``base_lr`` then half-cosine decay to zero.

    ``step`` counts optimizer updates; ``step == total_epochs*steps_per_epoch``
    is the end of training where the rate is exactly zero.
    """
    if not 0 <= warmup_epochs < total_epochs:
        raise InvalidSchedule(f"need 0 <= warmup ({warmup_epochs}) < total ({total_epochs})")
    if steps_per_epoch <= 0:
        raise InvalidSchedule("steps_per_epoch must be positive")
    epoch = step / steps_per_epoch
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    progress = min((epoch - warmup_epochs) / (total_epochs - warmup_epochs), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
