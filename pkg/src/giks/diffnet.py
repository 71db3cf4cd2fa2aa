"""Small dense reverse-mode engine and AdamW.

Only the operations the dose-response model needs are supported: affine
maps, ReLU, elementwise arithmetic, reductions, squares, the spline-basis
contraction used by varying-coefficient layers and a softmax cross-entropy
for the propensity classifier. Every op records its parents and a closed
form vector-Jacobian product; :func:`backward` walks the recorded graph.

All arrays are float64. Gradients accumulate into ``ParamBlock.grad`` until
:func:`zero_grads` is called.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, TrainingError


@dataclass
class ParamBlock:
    """A trainable 2-D parameter with its gradient and AdamW moments."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    moment1: np.ndarray = field(init=False)
    moment2: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, ndmin=2)
        if self.value.ndim != 2:
            raise DimensionError(f"{self.name}: parameter blocks are 2-D, got {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.moment1 = np.zeros_like(self.value)
        self.moment2 = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def zero_grads(params):
    for p in params:
        p.grad.fill(0.0)


def optimizer_step(params, config: OptimizerConfig):
    """One AdamW update with bias correction and decoupled weight decay."""
    steps = {p.step_count for p in params}
    if len(steps) > 1:
        raise ContractError(f"inconsistent step counts across blocks: {sorted(steps)}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in block {p.name!r}", block=p.name)
    b1, b2 = config.beta1, config.beta2
    for p in params:
        p.step_count += 1
        g = p.grad
        p.moment1 *= b1
        p.moment1 += (1.0 - b1) * g
        p.moment2 *= b2
        p.moment2 += (1.0 - b2) * g * g
        m_hat = p.moment1 / (1.0 - b1 ** p.step_count)
        v_hat = p.moment2 / (1.0 - b2 ** p.step_count)
        if config.weight_decay:
            p.value *= 1.0 - config.learning_rate * config.weight_decay
        p.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return params


class AdamW:
    """Thin stateful wrapper so callers can hold params and config together."""

    def __init__(self, params, config: OptimizerConfig | None = None):
        self.params = list(params)
        self.config = config or OptimizerConfig()

    def zero_grad(self):
        zero_grads(self.params)

    def step(self):
        optimizer_step(self.params, self.config)


# --------------------------------------------------------------------------
# recorded computation


class Node:
    """A value in a recorded computation.

    ``vjp`` maps the upstream gradient to one gradient per parent (or ``None``
    for parents that need none).
    """

    __slots__ = ("value", "grad", "parents", "vjp", "block")

    def __init__(self, value, parents=(), vjp=None, block=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.block = block

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(shape={self.shape})"


def param(block: ParamBlock) -> Node:
    return Node(block.value, block=block)


def const(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def _as_node(x):
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def forward_affine(x, weights, bias) -> Node:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    x = _as_node(x)
    W = weights if isinstance(weights, Node) else param(weights)
    b = bias if isinstance(bias, Node) else param(bias)
    xv, Wv, bv = x.value, W.value, b.value
    if xv.ndim != 2 or Wv.ndim != 2:
        raise DimensionError("affine expects 2-D input and weights")
    if xv.shape[1] != Wv.shape[0]:
        raise DimensionError(f"input has {xv.shape[1]} columns, weights have {Wv.shape[0]} rows")
    if bv.size != Wv.shape[1]:
        raise DimensionError(f"bias length {bv.size} != weight columns {Wv.shape[1]}")
    out = xv @ Wv + bv.reshape(1, -1)

    def vjp(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0).reshape(bv.shape)

    return Node(out, (x, W, b), vjp)


affine = forward_affine


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def square(x: Node) -> Node:
    xv = x.value
    return Node(xv * xv, (x,), lambda g: (2.0 * xv * g,))


def sum_all(x: Node) -> Node:
    shape = x.shape
    return Node(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Node) -> Node:
    shape = x.shape
    n = max(int(np.prod(shape)), 1)
    return Node(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def column(x: Node, j: int = 0) -> Node:
    """Select column ``j`` of a 2-D node as a vector."""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return Node(x.value[:, j].copy(), (x,), vjp)


def spline_contract(z, basis_values: np.ndarray, bank) -> Node:
    """Varying-coefficient layer.

    Row ``i`` is mapped through the weight matrix ``sum_k bank_k * B[i, k]``
    applied to ``[z_i, 1]``. ``bank`` is stored 2-D with shape
    ``((in + 1) * dim, out)``, row index ``j * dim + k``.
    """
    z = _as_node(z)
    bank = bank if isinstance(bank, Node) else param(bank)
    zv, Bv, Wv = z.value, np.asarray(basis_values, dtype=np.float64), bank.value
    n, d_in = zv.shape
    if Bv.ndim != 2 or Bv.shape[0] != n:
        raise DimensionError("basis values need one row per input row")
    dim = Bv.shape[1]
    if Wv.shape[0] != (d_in + 1) * dim:
        raise DimensionError(f"bank has {Wv.shape[0]} rows, expected {(d_in + 1) * dim}")
    zaug = np.concatenate([zv, np.ones((n, 1))], axis=1)
    feats = (zaug[:, :, None] * Bv[:, None, :]).reshape(n, -1)
    out = feats @ Wv

    def vjp(g):
        d_feats = (g @ Wv.T).reshape(n, d_in + 1, dim)
        dz = np.einsum("ijk,ik->ij", d_feats[:, :d_in, :], Bv)
        return dz, feats.T @ g

    return Node(out, (z, bank), vjp)


def softmax_xent(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of integer ``labels`` under row-softmax of ``logits``."""
    lv = logits.value
    shifted = lv - lv.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = lv.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return Node(np.asarray(loss), (logits,), vjp)


def _topo_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node):
    """Accumulate d(loss)/d(param) into every reachable ``ParamBlock.grad``."""
    if np.size(loss.value) != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(np.asarray(loss.value, dtype=np.float64))
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.block is not None:
            node.block.grad += g.reshape(node.block.grad.shape)
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad = parent.grad + pg
