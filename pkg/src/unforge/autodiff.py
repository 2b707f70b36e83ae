"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: every op returns a :class:`Node` holding the
forward value plus a vector-Jacobian closure.  When *none* of an op's
inputs is a Node the op computes with plain numpy and returns a plain
array, so the same forward code serves both training (graph mode) and
inference (raw mode) without duplication.

The supported op set is exactly what the tiny transformer and its losses
need: matmul, add/sub/mul, elementwise nonlinearities, softmax and
log-softmax, log/exp, layer normalization, embedding lookup, gather along
the last axis, log-sigmoid, and sum/mean reductions.  Anything else is a
:class:`~unforge.errors.CapabilityError`.

Backward is deterministic: nodes carry a creation counter and gradients
are accumulated in strictly descending counter order, which is a valid
reverse topological order because parents always precede children.
"""

from __future__ import annotations

import itertools
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CapabilityError
from .store import GradStore, ParamStore

_ids = itertools.count()


class Node:
    """One value in a computation graph."""

    __slots__ = ("value", "parents", "vjp", "nid", "name")

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.nid = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

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

    def __repr__(self):
        return f"Node(shape={self.value.shape}, nid={self.nid})"


def is_node(x) -> bool:
    return isinstance(x, Node)


def val(x) -> np.ndarray:
    """Forward value of a node, or the input itself when already raw."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def leaf(value: np.ndarray, name: str | None = None) -> Node:
    return Node(value, name=name)


def param_nodes(store: ParamStore) -> dict[str, Node]:
    """Graph leaves for every entry of a parameter store."""
    return {name: leaf(arr, name=name) for name, arr in store}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, vjp_a, vjp_b):
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return fwd(val(a), val(b))
    av, bv = val(a), val(b)
    out = fwd(av, bv)
    parents, pulls = [], []
    if isinstance(a, Node):
        parents.append(a)
        pulls.append(lambda g: _unbroadcast(vjp_a(g, av, bv), av.shape))
    if isinstance(b, Node):
        parents.append(b)
        pulls.append(lambda g: _unbroadcast(vjp_b(g, av, bv), bv.shape))
    return Node(out, tuple(parents), lambda g: tuple(p(g) for p in pulls))


def _unary(x, fwd, vjp):
    if not isinstance(x, Node):
        return fwd(val(x))
    xv = x.value
    out = fwd(xv)
    return Node(out, (x,), lambda g, xv=xv, out=out: (vjp(g, xv, out),))


# -- arithmetic ---------------------------------------------------------


def add(a, b):
    return _binary(a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def matmul(a, b):
    def vjp_a(g, av, bv):
        return np.matmul(g, np.swapaxes(bv, -1, -2))

    def vjp_b(g, av, bv):
        return np.matmul(np.swapaxes(av, -1, -2), g)

    return _binary(a, b, np.matmul, vjp_a, vjp_b)


def log(x):
    return _unary(x, np.log, lambda g, xv, out: g / xv)


def exp(x):
    return _unary(x, np.exp, lambda g, xv, out: g * out)


# -- shape ops ----------------------------------------------------------


def reshape(x, shape):
    if not isinstance(x, Node):
        return np.reshape(x, shape)
    orig = x.value.shape
    return Node(np.reshape(x.value, shape), (x,), lambda g: (np.reshape(g, orig),))


def transpose(x, axes):
    if not isinstance(x, Node):
        return np.transpose(x, axes)
    inv = np.argsort(axes)
    return Node(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def embedding(table, ids):
    """Row lookup table[ids]; ids is a plain integer array."""
    ids = np.asarray(ids)
    if not isinstance(table, Node):
        return val(table)[ids]

    def vjp(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, ids, g)
        return (dt,)

    return Node(table.value[ids], (table,), vjp)


def take_last_axis(x, idx):
    """out[...] = x[..., idx[...]]; idx shape == x.shape[:-1]."""
    idx = np.asarray(idx)
    if not isinstance(x, Node):
        return np.take_along_axis(val(x), idx[..., None], axis=-1)[..., 0]
    out = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]

    def vjp(g, shape=x.value.shape):
        dx = np.zeros(shape)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx,)

    return Node(out, (x,), vjp)


# -- reductions ---------------------------------------------------------


def sum_(x, axis=None):
    if not isinstance(x, Node):
        return np.sum(val(x), axis=axis)
    xv = x.value
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return Node(out, (x,), vjp)


def mean_(x, axis=None):
    xv = val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


# -- nonlinearities ------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh-approximation GELU; the backward reuses the forward's tanh."""
    xv = val(x)
    t = np.tanh(_GELU_C * (xv + 0.044715 * xv**3))
    out = 0.5 * xv * (1.0 + t)
    if not isinstance(x, Node):
        return out

    def vjp(g):
        grad = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * xv**2)
        return (g * grad,)

    return Node(out, (x,), vjp)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_sigmoid(x):
    """log(sigmoid(x)), computed as -log1p(exp(-|x|)) + min(x, 0)."""

    def fwd(xv):
        return np.minimum(xv, 0.0) - np.log1p(np.exp(-np.abs(xv)))

    return _unary(x, fwd, lambda g, xv, out: g * _sigmoid(-xv))


def softmax(x):
    """Numerically stable softmax over the last axis (max subtraction)."""

    def fwd(xv):
        z = xv - xv.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    if not isinstance(x, Node):
        return fwd(val(x))
    out = fwd(x.value)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Node(out, (x,), vjp)


def log_softmax(x):
    def fwd(xv):
        z = xv - xv.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    if not isinstance(x, Node):
        return fwd(val(x))
    out = fwd(x.value)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Node(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift."""
    xv, gv, bv = val(x), val(gain), val(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gv + bv
    if not (isinstance(x, Node) or isinstance(gain, Node) or isinstance(bias, Node)):
        return out

    n = xv.shape[-1]
    parents, pulls = [], []
    if isinstance(x, Node):

        def pull_x(g):
            dxhat = g * gv
            # d/dx of (x - mu) * inv with mu, inv functions of x
            return inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )

        parents.append(x)
        pulls.append(pull_x)
    if isinstance(gain, Node):
        parents.append(gain)
        pulls.append(lambda g: _unbroadcast(g * xhat, gv.shape))
    if isinstance(bias, Node):
        parents.append(bias)
        pulls.append(lambda g: _unbroadcast(g, bv.shape))
    del n
    return Node(out, tuple(parents), lambda g: tuple(p(g) for p in pulls))


# -- op registry / gateway ----------------------------------------------

SUPPORTED_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "log": log,
    "exp": exp,
    "reshape": reshape,
    "transpose": transpose,
    "embedding": embedding,
    "take_last_axis": take_last_axis,
    "sum": sum_,
    "mean": mean_,
    "gelu": gelu,
    "log_sigmoid": log_sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
}


def graph_op(name: str, *args, **kwargs):
    """Apply a supported op by name; unknown names are a capability error."""
    try:
        fn = SUPPORTED_OPS[name]
    except KeyError:
        raise CapabilityError(f"unsupported graph op: {name!r}") from None
    return fn(*args, **kwargs)


# -- backward ------------------------------------------------------------


def backward(loss: Node, params: Mapping[str, Node]) -> GradStore:
    """Reverse-mode gradients of a scalar loss for every parameter leaf.

    Parameters not reachable from the loss get zero gradients.  Two calls
    on the same graph produce bit-identical results.
    """
    if not isinstance(loss, Node):
        raise CapabilityError("backward requires a graph Node, got a raw value")
    if loss.value.ndim != 0:
        raise CapabilityError(f"loss must be scalar, got shape {loss.value.shape}")

    # Reachable subgraph via iterative DFS.
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.nid in seen:
            continue
        seen[node.nid] = node
        if node.parents and node.vjp is None:
            raise CapabilityError("graph node with parents but no backward rule")
        stack.extend(node.parents)

    grads: dict[int, np.ndarray] = {loss.nid: np.ones(())}
    # Descending creation order is a reverse topological order.
    for nid in sorted(seen, reverse=True):
        node = seen[nid]
        g = grads.get(nid)
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            acc = grads.get(parent.nid)
            grads[parent.nid] = pg if acc is None else acc + pg
        if node.name is None:
            del grads[nid]  # free interior gradients; keep named leaves

    out = []
    for name, node in params.items():
        g = grads.get(node.nid)
        out.append((name, np.zeros_like(node.value) if g is None else g))
    return GradStore(out)


def finite_diff_grad(
    f: Callable[[ParamStore], float], theta: ParamStore, eps: float = 1e-5
) -> GradStore:
    """Central-difference gradient oracle: (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps).

    Independent of :func:`backward`; intended as its test oracle on small
    models (cost is two evaluations of `f` per coordinate).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    names = list(theta.names)
    work = {name: arr.copy() for name, arr in theta}

    def eval_at() -> float:
        return float(f(ParamStore((n, work[n]) for n in names)))

    grads = []
    for name in names:
        arr = work[name]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = eval_at()
            flat[i] = orig - eps
            lo = eval_at()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append((name, g))
    return GradStore(grads)


def grad_check(
    f: Callable[[ParamStore], float],
    build: Callable[[Mapping[str, Node]], Node],
    theta: ParamStore,
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> tuple[bool, float]:
    """Compare backward against the finite-difference oracle.

    A coordinate passes when |analytic - numeric| <= abs_floor + rel_tol *
    |numeric|; the floor absorbs the oracle's own cancellation noise on
    near-zero gradients.  Returns (ok, worst scaled error) where the scaled
    error divides by max(|numeric|, abs_floor / rel_tol).
    """
    leaves = param_nodes(theta)
    analytic = backward(build(leaves), leaves)
    numeric = finite_diff_grad(f, theta, eps)
    worst = 0.0
    for (_, ga), (_, gn) in zip(analytic, numeric):
        denom = np.maximum(np.abs(gn), abs_floor / rel_tol)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst < rel_tol, worst
