"""Dense float32 tensors with reverse-mode automatic differentiation.

Everything downstream (the ViT backbone, the adapter methods, both video
paths) is built from the primitives in this module and :mod:`dualpath.ops`.
Storage is a flat row-major numpy float32 buffer per tensor; gradients are
plain numpy arrays accumulated additively on leaves that require them.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "GraphError",
    "concat",
    "stack",
    "broadcast_to",
    "trunc_normal",
    "kaiming_normal",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A structural or hyperparameter setting is invalid."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar loss, stale graph, ...)."""


class Node:
    """One step of a recorded computation: parents plus a backward rule.

    ``backward_fn`` maps the output gradient to one gradient per parent
    (``None`` for parents that do not need one). Saved activations live in
    the closure.
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


def _as_f32(data):
    arr = np.asarray(data, dtype=np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional float32 array, optionally tracked for gradients.

    A tensor with ``requires_grad=False`` is *frozen*: it never accumulates
    a gradient and backward passes never write to it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(data, op, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data if data.dtype == np.float32 else data.astype(np.float32)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        # Subgraphs with no trainable ancestor are never revisited.
        out._node = Node(op, parents, backward_fn) if out.requires_grad else None
        return out

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad)

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- autodiff ---------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf.

        The recorded graph is consumed: a second call without a fresh
        forward pass raises :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if self._node is None:
            raise GraphError(
                "no live compute graph: loss was not produced by tracked "
                "operations, or backward was already called"
            )

        # Iterative postorder over tensors that carry a node.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            t, processed = stack.pop()
            if processed:
                topo.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            node = t._node
            g = grads.pop(id(t), None)
            t._node = None
            if g is None:
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.dtype != np.float32:
                    pg = pg.astype(np.float32)
                if p._node is None:
                    # Leaf (or pruned subgraph root): accumulate persistently.
                    if p.requires_grad:
                        p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    k = id(p)
                    if k in grads:
                        grads[k] = grads[k] + pg
                    else:
                        grads[k] = pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return Tensor._from_op(
                self.data + np.float32(other), "add_scalar", (self,),
                lambda g: (g,),
            )
        _check_broadcast(self.shape, other.shape, "add")
        sa, sb = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data, "add", (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, "neg", (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-other)
        _check_broadcast(self.shape, other.shape, "sub")
        sa, sb = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data, "sub", (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = np.float32(other)
            return Tensor._from_op(
                self.data * c, "scale", (self,), lambda g: (g * c,),
            )
        _check_broadcast(self.shape, other.shape, "mul")
        a, b = self.data, other.data
        sa, sb = self.shape, other.shape
        return Tensor._from_op(
            a * b, "mul", (self, other),
            lambda g: (_unbroadcast(g * b, sa), _unbroadcast(g * a, sb)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ConfigError("tensor division is only supported by scalars")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, shape):
        shape = tuple(shape)
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), "reshape", (self,),
            lambda g: (g.reshape(old),),
        )

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.ascontiguousarray(self.data.transpose(axes)), "transpose",
            (self,), lambda g: (g.transpose(inv),),
        )

    def __getitem__(self, idx):
        shape = self.shape

        def bwd(g):
            out = np.zeros(shape, dtype=np.float32)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._from_op(
            np.ascontiguousarray(self.data[idx]), "getitem", (self,), bwd,
        )

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(np.float32),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).astype(np.float32),)

        return Tensor._from_op(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims),
                       dtype=np.float32),
            "sum", (self,), bwd,
        )

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _check_broadcast(sa, sb, op):
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast") from None


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as batch dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul batch dims")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), sa)
        if need_b:
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, sb)
        return (ga, gb)

    return Tensor._from_op(ad @ bd, "matmul", (a, b), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(outs)

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        "concat", tuple(tensors), bwd,
    )


def stack(tensors, axis=0):
    tensors = list(tensors)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, i, axis=axis))
            for i in range(len(tensors))
        )

    return Tensor._from_op(
        np.stack([t.data for t in tensors], axis=axis),
        "stack", tuple(tensors), bwd,
    )


def broadcast_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = t.shape
    return Tensor._from_op(
        np.ascontiguousarray(np.broadcast_to(t.data, shape)),
        "broadcast", (t,), lambda g: (_unbroadcast(g, orig),),
    )


# -- initializers ----------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std=0.02):
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.standard_normal(shape)
    for _ in range(16):
        mask = np.abs(out) > 2.0
        if not mask.any():
            break
        out[mask] = rng.standard_normal(int(mask.sum()))
    return (out * std).astype(np.float32)


def kaiming_normal(rng: np.random.Generator, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)
