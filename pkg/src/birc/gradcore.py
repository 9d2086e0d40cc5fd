"""Minimal reverse-mode autodiff over 64-bit numpy arrays.

Define-by-run: every operation allocates a fresh Node holding its value, its
parents and a vector-Jacobian closure; graphs are rebuilt each optimization
step and never reused.  All math is float64.

The op functions below accept either Nodes or plain arrays and only build
graph when a Node is involved, so the same formula (e.g. a KL expression)
serves both the differentiable path and cheap numpy-only bookkeeping.
"""

from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class GraphNanError(ArithmeticError):
    """A NaN appeared in the graph; carries the originating op tag."""

    def __init__(self, tag: str):
        super().__init__(f"NaN produced by op '{tag}'")
        self.tag = tag


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    __slots__ = ("value", "parents", "vjp", "tag", "trainable", "adjoint")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, parents=(), vjp=None, tag="const", trainable=False):
        self.value = _f64(value)
        self.parents = parents
        self.vjp = vjp  # g -> tuple of adjoint contributions aligned with parents
        self.tag = tag
        self.trainable = trainable
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.tag}, shape={self.value.shape})"

    # operator sugar; definitions live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def leaf(value, tag="param") -> Node:
    """Trainable leaf; forward_backward reports its gradient."""
    return Node(np.array(value, dtype=np.float64), tag=tag, trainable=True)


def const(value, tag="const") -> Node:
    return Node(value, tag=tag)


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else _f64(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, vjp_a, vjp_b, tag):
    if not (isinstance(a, Node) or isinstance(b, Node)):
        return fwd(value_of(a), value_of(b))
    an, bn = (a if isinstance(a, Node) else const(a)), (b if isinstance(b, Node) else const(b))
    av, bv = an.value, bn.value
    out = fwd(av, bv)

    def vjp(g):
        return (_unbroadcast(vjp_a(g, av, bv), av.shape),
                _unbroadcast(vjp_b(g, av, bv), bv.shape))

    return Node(out, (an, bn), vjp, tag)


def _unary(x, fwd, vjp_fn, tag):
    if not isinstance(x, Node):
        return fwd(value_of(x))
    out = fwd(x.value)

    def vjp(g, xv=x.value, ov=out):
        return (vjp_fn(g, xv, ov),)

    return Node(out, (x,), vjp, tag)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y), "div")


def power(x, p):
    p = float(p)
    return _unary(x, lambda v: v ** p, lambda g, v, o: g * p * v ** (p - 1.0), f"pow{p}")


def square(x):
    return _unary(x, np.square, lambda g, v, o: g * 2.0 * v, "square")


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o, "exp")


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v, "log")


def sin(x):
    return _unary(x, np.sin, lambda g, v, o: g * np.cos(v), "sin")


def cos(x):
    return _unary(x, np.cos, lambda g, v, o: -g * np.sin(v), "cos")


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, o: g * 0.5 / o, "sqrt")


def matmul(a, b):
    def fwd(x, y):
        return np.matmul(x, y)

    def vjp_a(g, x, y):
        return np.matmul(g, np.swapaxes(y, -1, -2))

    def vjp_b(g, x, y):
        return np.matmul(np.swapaxes(x, -1, -2), g)

    return _binary(a, b, fwd, vjp_a, vjp_b, "matmul")


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Node):
        return np.sum(value_of(x), axis=axis, keepdims=keepdims)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g, shape=x.value.shape):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    n = value_of(x).size if axis is None else np.prod(
        [value_of(x).shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return div(sum_(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x, shape):
    if not isinstance(x, Node):
        return value_of(x).reshape(shape)
    out = x.value.reshape(shape)

    def vjp(g, orig=x.value.shape):
        return (np.asarray(g).reshape(orig),)

    return Node(out, (x,), vjp, "reshape")


def moveaxis(x, src, dst):
    if not isinstance(x, Node):
        return np.moveaxis(value_of(x), src, dst)
    out = np.moveaxis(x.value, src, dst)

    def vjp(g):
        return (np.moveaxis(np.asarray(g), dst, src),)

    return Node(out, (x,), vjp, "moveaxis")


def getitem(x, idx):
    if not isinstance(x, Node):
        return value_of(x)[idx]
    out = x.value[idx]

    def vjp(g, shape=x.value.shape):
        full = np.zeros(shape)
        full[idx] = g  # basic slicing only: disjoint, so assignment suffices
        return (full,)

    return Node(out, (x,), vjp, "getitem")


def take(x, indices, axis):
    """Gather along one axis with a fixed integer index array."""
    indices = np.asarray(indices, dtype=np.int64)
    if not isinstance(x, Node):
        return np.take(value_of(x), indices, axis=axis)
    out = np.take(x.value, indices, axis=axis)

    def vjp(g, shape=x.value.shape):
        full = np.zeros(shape)
        gm = np.moveaxis(np.asarray(g), axis, 0)
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)  # repeated indices accumulate
        return (full,)

    return Node(out, (x,), vjp, "take")


def concat(parts, axis):
    if not any(isinstance(p, Node) for p in parts):
        return np.concatenate([value_of(p) for p in parts], axis=axis)
    nodes = [p if isinstance(p, Node) else const(p) for p in parts]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]

    def vjp(g):
        return tuple(np.split(np.asarray(g), np.cumsum(sizes)[:-1], axis=axis))

    return Node(out, tuple(nodes), vjp, "concat")


# ---------------------------------------------------------------------------
# convolution / upsampling (the positional-encoding network needs 1-3 D)

def _conv_windows(shape_spatial, kernel_spatial):
    for off in np.ndindex(*kernel_spatial):
        yield off, tuple(slice(o, o + s) for o, s in zip(off, shape_spatial))


def conv_nd(x, kernel, bias):
    """Cross-correlation with zero 'same' padding, odd kernels only.

    x: (B, Cin, *S); kernel: (Cout, Cin, *K); bias: (Cout,) -> (B, Cout, *S).
    Implemented as a sum over kernel offsets, exact in f64 and cheap for the
    small kernels used here.
    """
    xv, kv, bv = value_of(x), value_of(kernel), value_of(bias)
    spatial = xv.shape[2:]
    ks = kv.shape[2:]
    if any(k % 2 == 0 for k in ks):
        raise ContractViolation(f"conv_nd requires odd kernel sizes, got {ks}")
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in ks]
    xp = np.pad(xv, pad)
    out = np.zeros((xv.shape[0], kv.shape[0]) + spatial)
    sp = "xyz"[:len(spatial)]
    for off, win in _conv_windows(spatial, ks):
        out += np.einsum(f"oc,bc{sp}->bo{sp}", kv[(slice(None), slice(None)) + off],
                         xp[(slice(None), slice(None)) + win])
    out += bv.reshape((1, -1) + (1,) * len(spatial))

    if not (isinstance(x, Node) or isinstance(kernel, Node) or isinstance(bias, Node)):
        return out
    xn = x if isinstance(x, Node) else const(x)
    kn = kernel if isinstance(kernel, Node) else const(kernel)
    bn = bias if isinstance(bias, Node) else const(bias)

    def vjp(g):
        g = np.asarray(g)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kv)
        for off, win in _conv_windows(spatial, ks):
            sl = (slice(None), slice(None)) + win
            gxp[sl] += np.einsum(f"oc,bo{sp}->bc{sp}", kv[(slice(None), slice(None)) + off], g)
            gk[(slice(None), slice(None)) + off] = np.einsum(f"bo{sp},bc{sp}->oc", g, xp[sl])
        crop = (slice(None), slice(None)) + tuple(
            slice(k // 2, k // 2 + s) for k, s in zip(ks, spatial))
        gb = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return (gxp[crop], gk, gb)

    return Node(out, (xn, kn, bn), vjp, "conv_nd")


def upsample_nearest(x, factors):
    """Repeat each spatial cell `factors[d]` times along axis d.

    x: (B, C, *S) -> (B, C, *(S*factors)).
    """
    factors = tuple(int(f) for f in factors)
    xv = value_of(x)
    out = xv
    for d, f in enumerate(factors):
        if f > 1:
            out = np.repeat(out, f, axis=2 + d)
    if not isinstance(x, Node):
        return out

    def vjp(g, in_shape=xv.shape):
        g = np.asarray(g)
        for d, f in enumerate(factors):
            if f > 1:
                shp = list(g.shape)
                shp[2 + d] = in_shape[2 + d]
                shp.insert(3 + d, f)
                g = g.reshape(shp).sum(axis=3 + d)
        return (g,)

    return Node(out, (x,), vjp, "upsample_nearest")


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Node) -> list[Node]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _locate_nan(order: list[Node]) -> str:
    for node in order:
        if np.any(np.isnan(node.value)):
            return node.tag
    return "unknown"


def forward_backward(root: Node) -> dict[int, np.ndarray]:
    """Adjoints of a scalar root w.r.t. every trainable leaf.

    Returns {id(leaf): gradient}; leaf values are left untouched.  Shared
    subexpressions accumulate (adjoints sum over all paths).
    """
    if not isinstance(root, Node):
        raise ContractViolation("root must be a graph Node")
    if root.value.ndim != 0 and root.value.size != 1:
        raise ContractViolation(f"root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    if np.any(np.isnan(root.value)):
        raise GraphNanError(_locate_nan(order))
    for node in order:
        node.adjoint = None
    root.adjoint = np.ones_like(root.value)
    grads: dict[int, np.ndarray] = {}
    for node in reversed(order):
        if node.adjoint is None:
            continue
        if node.trainable:
            grads[id(node)] = node.adjoint
        if node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.adjoint)):
            g = np.asarray(g, dtype=np.float64)
            if parent.adjoint is None:
                parent.adjoint = g.copy() if g.base is not None else g
            else:
                parent.adjoint = parent.adjoint + g
    return grads


def grad(root: Node, params: list[Node]) -> list[np.ndarray]:
    """Gradients for an explicit parameter list (zeros when disconnected)."""
    table = forward_backward(root)
    return [table.get(id(p), np.zeros_like(p.value)) for p in params]


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    """Standard Adam moments for a list of parameter arrays."""

    def __init__(self, shapes, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ContractViolation(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


class Adam:
    """Adam bound to a fixed list of trainable leaves."""

    def __init__(self, params: list[Node], lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState([p.value.shape for p in params], lr, beta1, beta2, eps)

    def step(self, root: Node) -> None:
        adam_step([p.value for p in self.params], grad(root, self.params), self.state)
