"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

Only the handful of operations the MSTGCN forward pass needs are provided.
Graphs are built on the fly each forward call (define-by-run) and walked
once in reverse topological order by :func:`backward`.

A "tensor" here is simply a C-contiguous ``np.ndarray`` of dtype float64.
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class WindowError(ValueError):
    """Temporal extent is shorter than the convolution window."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in the graph."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64, order="C")


class Node:
    """A value in the computation graph.

    ``grad`` is ``None`` until something writes to it; :meth:`ParamStore.zero_grad`
    or :func:`backward` materialize it with the value's shape.
    """

    __slots__ = ("value", "grad", "parents", "op", "trainable", "name", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf",
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
                 trainable: bool = False, name: str | None = None):
        self.value = as_tensor(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self.trainable = trainable
        self.name = name
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.trainable or self._backward is not None

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"


def constant(x) -> Node:
    return Node(x, op="const")


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: Sequence[Node], op: str, backward_fn) -> Node:
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op, parents=parents)
    return Node(value, parents=parents, op=op, backward_fn=backward_fn)


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # reduce leading batch dims that matmul broadcast over
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise


def add(x, y) -> Node:
    x, y = _node(x), _node(y)
    _check_same("add", x, y)
    return _make(x.value + y.value, (x, y), "add", lambda g: (g, g))


def sub(x, y) -> Node:
    x, y = _node(x), _node(y)
    _check_same("sub", x, y)
    return _make(x.value - y.value, (x, y), "sub", lambda g: (g, -g))


def hadamard(x, y) -> Node:
    x, y = _node(x), _node(y)
    _check_same("hadamard", x, y)
    xv, yv = x.value, y.value
    return _make(xv * yv, (x, y), "hadamard", lambda g: (g * yv, g * xv))


def scale(x, c: float) -> Node:
    x = _node(x)
    c = float(c)
    return _make(x.value * c, (x,), "scale", lambda g: (g * c,))


def add_bias(x, bias) -> Node:
    """``x + bias`` with ``bias`` broadcast over the last axis of ``x``."""
    x, bias = _node(x), _node(bias)
    if bias.value.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")
    nb = x.value.ndim - 1
    return _make(x.value + bias.value, (x, bias), "add_bias",
                 lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0) if nb else g))


def sigmoid(x) -> Node:
    x = _node(x)
    # tanh form does not overflow for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(x) -> Node:
    x = _node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), "relu", lambda g: (g * mask,))


def absolute(x) -> Node:
    x = _node(x)
    sign = np.sign(x.value)
    return _make(np.abs(x.value), (x,), "abs", lambda g: (g * sign,))


def power(x, p: float) -> Node:
    x = _node(x)
    p = float(p)
    xv = x.value
    out = xv ** p
    return _make(out, (x,), "power", lambda g: (g * p * xv ** (p - 1.0),))


def square(x) -> Node:
    x = _node(x)
    xv = x.value
    return _make(xv * xv, (x,), "square", lambda g: (2.0 * g * xv,))


# ----------------------------------------------------------------------------
# reductions and shape


def sum_all(x) -> Node:
    x = _node(x)
    shape = x.shape
    return _make(np.array(x.value.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x) -> Node:
    x = _node(x)
    shape, n = x.shape, x.value.size
    return _make(np.array(x.value.mean()), (x,), "mean",
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_sum(x) -> Node:
    """Sum over the last axis."""
    x = _node(x)
    shape = x.shape
    return _make(x.value.sum(axis=-1), (x,), "row_sum",
                 lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def reshape(x, shape: Sequence[int]) -> Node:
    x = _node(x)
    old = x.shape
    try:
        out = x.value.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(old),))


def concat_last(xs: Sequence) -> Node:
    xs = [_node(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(f"concat_last: leading shapes differ {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.value for x in xs], axis=-1), xs, "concat_last", bw)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    """Matrix product over the last two axes, numpy batch semantics on the rest."""
    a, b = _node(a), _node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    try:
        out = av @ bv
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if av.ndim == 2 and g.ndim > 2:
                # shared left matrix: contract the batch axes in one product
                gt = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                bt = np.moveaxis(np.broadcast_to(bv, g.shape[:-2] + bv.shape[-2:]), -2, 0).reshape(bv.shape[-2], -1)
                ga = gt @ bt.T
            else:
                ga = _sum_to(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            if bv.ndim == 2 and g.ndim > 2:
                a2 = np.broadcast_to(av, g.shape[:-2] + av.shape[-2:]).reshape(-1, av.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def outer(a) -> Node:
    """``a aᵀ`` for a vector ``a``."""
    a = _node(a)
    if a.value.ndim != 1:
        raise DimensionError(f"outer: expected a vector, got {a.shape}")
    av = a.value
    return _make(np.outer(av, av), (a,), "outer", lambda g: ((g + g.T) @ av,))


def diag_scale(m, d) -> Node:
    """``diag(d) @ m @ diag(d)`` for square ``m``."""
    m, d = _node(m), _node(d)
    n = d.shape[0] if d.value.ndim == 1 else -1
    if m.value.ndim != 2 or m.shape != (n, n):
        raise DimensionError(f"diag_scale: matrix {m.shape} incompatible with scale vector {d.shape}")
    mv, dv = m.value, d.value
    out = dv[:, None] * mv * dv[None, :]

    def bw(g):
        gm = g * dv[:, None] * dv[None, :]
        gw = g * mv
        gd = (gw * dv[None, :]).sum(axis=1) + (gw * dv[:, None]).sum(axis=0)
        return gm, gd

    return _make(out, (m, d), "diag_scale", bw)


def conv_time(x, kernel, bias) -> Node:
    """Unpadded stride-1 convolution along the time axis.

    ``x`` is ``[..., D, C_in]`` (the station axis, and optionally a batch axis,
    lead), ``kernel`` is ``[1, m, C_in, C_out]``, ``bias`` is ``[C_out]``.
    Output is ``[..., D - m + 1, C_out]``.
    """
    x, kernel, bias = _node(x), _node(kernel), _node(bias)
    if kernel.value.ndim != 4 or kernel.shape[0] != 1:
        raise DimensionError(f"conv_time: kernel must be [1, m, C_in, C_out], got {kernel.shape}")
    _, m, c_in, c_out = kernel.shape
    if x.value.ndim < 2 or x.shape[-1] != c_in:
        raise DimensionError(f"conv_time: input {x.shape} does not end in C_in={c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv_time: bias {bias.shape} does not match C_out={c_out}")
    d = x.shape[-2]
    if d < m:
        raise WindowError(f"conv_time: time extent {d} shorter than kernel width {m}")
    t = d - m + 1
    xv = x.value
    k2 = kernel.value.reshape(m * c_in, c_out)
    cols = np.concatenate([xv[..., j:j + t, :] for j in range(m)], axis=-1)
    out = cols @ k2 + bias.value

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gcols = g @ k2.T
            gx = np.zeros_like(xv)
            for j in range(m):
                gx[..., j:j + t, :] += gcols[..., j * c_in:(j + 1) * c_in]
        if kernel.requires_grad:
            gk = (cols.reshape(-1, m * c_in).T @ g.reshape(-1, c_out)).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.reshape(-1, c_out).sum(axis=0)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), "conv_time", bw)


# ----------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every differentiable ancestor."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.trainable:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def first_nonfinite(root: Node) -> Node | None:
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


# ----------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable nodes, enumerated in lexicographic name order."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        node = Node(value, trainable=True, name=name)
        self._params[name] = node
        return node

    def normal(self, name: str, shape: Sequence[int], std: float) -> Node:
        return self.add(name, self.rng.standard_normal(tuple(shape)) * std)

    def zeros(self, name: str, shape: Sequence[int]) -> Node:
        return self.add(name, np.zeros(tuple(shape)))

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> list[tuple[str, Node]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = np.zeros_like(node.value)

    def n_values(self) -> int:
        return int(sum(n.value.size for n in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: n.value.copy() for k, n in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            v = as_tensor(v)
            if v.shape != self._params[k].shape:
                raise DimensionError(f"{k}: stored shape {v.shape} != model shape {self._params[k].shape}")
            self._params[k].value = v.copy()


def gradcheck(f: Callable[[], Node], params: ParamStore, eps: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over every parameter entry.

    ``f`` rebuilds the graph from the current parameter values on each call.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params.zero_grad()
    loss = f()
    bad = first_nonfinite(loss)
    if bad is not None:
        raise NonFiniteError(f"non-finite value produced by op {bad.op!r} ({bad!r})")
    backward(loss)
    worst = 0.0
    for name, node in params.items():
        analytic = node.grad
        flat = node.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().value.item()
            flat[i] = orig - eps
            down = f().value.item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
