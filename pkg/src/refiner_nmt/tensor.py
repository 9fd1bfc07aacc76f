"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a named entry in ``OPS`` holding a forward
and a backward rule. When a :class:`Graph` is active and at least one input
requires a gradient, the operation is appended to the graph's tape; the tape
order is a topological order by construction, so backward is a single reverse
sweep.

    >>> x = Tensor([2.0, 3.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_(x * x)
    >>> g.backward(loss)
    >>> x.grad
    array([4., 6.])
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

DTYPE = np.float64
_TINY = np.finfo(DTYPE).tiny


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class DomainError(ValueError):
    """An input lies outside the real domain of an operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")
    # make numpy defer to our reflected operators, e.g. ndarray @ Tensor
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # op outputs are already float64 arrays; skip the conversion in __init__
        t = cls.__new__(cls)
        t.data, t.grad, t.requires_grad, t.name, t.node_id = data, None, requires_grad, None, None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


class OpRecord(NamedTuple):
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor | tuple[Tensor, ...]
    ctx: object


def _owns(output, t: Tensor) -> bool:
    return output is t or (isinstance(output, tuple) and any(o is t for o in output))


class Graph:
    """A tape of op records for one forward pass.

    Graphs are not reused: build a fresh one for every step.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, kind: str, inputs: tuple[Tensor, ...], out, ctx) -> None:
        for o in out if isinstance(out, tuple) else (out,):
            o.node_id = len(self.records)
        self.records.append(OpRecord(kind, inputs, out, ctx))

    def _sweep(self, loss: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        stop = loss.node_id if loss.node_id is not None else -1
        recorded = 0 <= stop < len(self.records) and _owns(self.records[stop].output, loss)
        # a bare leaf is its own gradient; anything else must come from this tape
        if not recorded and (loss.node_id is not None or not loss.requires_grad):
            raise ValueError("backward: loss was not recorded on this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if seed is None else seed}
        for rec in reversed(self.records[: stop + 1]):
            out = rec.output
            if isinstance(out, tuple):
                parts = [grads.get(id(o)) for o in out]
                if all(p is None for p in parts):
                    continue
                g = [np.zeros_like(o.data) if p is None else p for o, p in zip(out, parts)]
            else:
                g = grads.get(id(out))
                if g is None:
                    continue
            in_grads = OPS[rec.kind].backward(rec.ctx, g, rec.inputs, rec.output)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return grads

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Leaf gradients are accumulated into existing ``.grad`` arrays. Tensors
        listed in ``params`` that the loss does not reach get a zero gradient.
        """
        grads = self._sweep(loss)
        seen = set()
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and t.node_id is None and id(t) not in seen:
                    seen.add(id(t))
                    g = grads.get(id(t))
                    if g is None:
                        continue
                    t.grad = g.copy() if t.grad is None else t.grad + g
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def grad(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` with respect to arbitrary tensors, leaves untouched."""
        grads = self._sweep(loss)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


_ACTIVE: Graph | None = None


def active_graph() -> Graph | None:
    return _ACTIVE


class no_grad:
    """Suspend recording, e.g. for inference."""

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = None

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev


class OpDef(NamedTuple):
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def register(kind: str, forward: Callable, backward: Callable) -> None:
    OPS[kind] = OpDef(forward, backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(kind: str, *inputs, **attrs) -> Tensor:
    ins = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
    data, ctx = OPS[kind].forward(*[t.data for t in ins], **attrs)
    if type(data) is not np.ndarray or data.dtype != DTYPE:
        data = np.asarray(data, dtype=DTYPE)
    graph = _ACTIVE
    if graph is not None and any(t.requires_grad for t in ins):
        out = Tensor._wrap(data, True)
        out.node_id = len(graph.records)
        graph.records.append(OpRecord(kind, ins, out, ctx))
        return out
    return Tensor._wrap(data)


def apply_multi(kind: str, *inputs, **attrs) -> tuple[Tensor, ...]:
    """Like :func:`apply` for ops with several outputs; backward receives a list of grads."""
    ins = tuple(as_tensor(x) for x in inputs)
    datas, ctx = OPS[kind].forward(*(t.data for t in ins), **attrs)
    outs = tuple(Tensor(d) for d in datas)
    graph = _ACTIVE
    if graph is not None and any(t.requires_grad for t in ins):
        for o in outs:
            o.requires_grad = True
        graph._record(kind, ins, outs, ctx)
    return outs


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(name: str, fn):
    def forward(a, b):
        try:
            return fn(a, b), None
        except ValueError:
            raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None

    return forward


# -- elementwise arithmetic --------------------------------------------------

register(
    "add",
    _binary("add", np.add),
    lambda ctx, g, ins, out: (unbroadcast(g, ins[0].shape), unbroadcast(g, ins[1].shape)),
)
register(
    "sub",
    _binary("sub", np.subtract),
    lambda ctx, g, ins, out: (unbroadcast(g, ins[0].shape), unbroadcast(-g, ins[1].shape)),
)
register(
    "mul",
    _binary("mul", np.multiply),
    lambda ctx, g, ins, out: (
        unbroadcast(g * ins[1].data, ins[0].shape) if ins[0].requires_grad else None,
        unbroadcast(g * ins[0].data, ins[1].shape) if ins[1].requires_grad else None,
    ),
)
register("neg", lambda a: (-a, None), lambda ctx, g, ins, out: (-g,))


def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    return apply("mul", a, b)


def neg(a) -> Tensor:
    return apply("neg", a)


# -- matmul ------------------------------------------------------------------


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.ndim > 2 and b.ndim == 2:
        # (..., n, k) @ (k, m) as one GEMM instead of a loop over leading dims
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],)), None
    try:
        return a @ b, None
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None


def _matmul_bwd(ctx, g, ins, out):
    a, b = ins[0].data, ins[1].data
    ga = gb = None
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        if ins[0].requires_grad:
            ga = (g2 @ b.T).reshape(a.shape)
        if ins[1].requires_grad:
            gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    if ins[0].requires_grad:
        ga = unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if ins[1].requires_grad:
        gb = unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


# -- nonlinearities ------------------------------------------------------------


def _sigmoid(x):
    # tanh form: one ufunc pass, no overflow on either tail
    return 0.5 + 0.5 * np.tanh(0.5 * x)


register("sigmoid", lambda x: (_sigmoid(x), None), lambda ctx, g, ins, out: (g * out.data * (1.0 - out.data),))
register("tanh", lambda x: (np.tanh(x), None), lambda ctx, g, ins, out: (g * (1.0 - out.data * out.data),))
register("exp", lambda x: (np.exp(x), None), lambda ctx, g, ins, out: (g * out.data,))


def _log_fwd(x):
    if np.any(x <= 0):
        raise DomainError(f"log: input has non-positive entries (min {x.min()!r})")
    return np.log(x), None


register("log", _log_fwd, lambda ctx, g, ins, out: (g / ins[0].data,))


def _softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.maximum(p, _TINY), None


def _softmax_bwd(ctx, g, ins, out):
    p = out.data
    gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
    # floored entries are constant; exact zeros also keep subnormals out of later GEMMs
    gx[p <= _TINY] = 0.0
    return (gx,)


register("softmax", _softmax_fwd, _softmax_bwd)


def sigmoid(x) -> Tensor:
    return apply("sigmoid", x)


def tanh(x) -> Tensor:
    return apply("tanh", x)


def exp(x) -> Tensor:
    return apply("exp", x)


def log(x) -> Tensor:
    return apply("log", x)


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-shifted, floored at the smallest normal float."""
    return apply("softmax", x)


# -- structural ----------------------------------------------------------------


def _concat_fwd(*xs):
    try:
        return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]
    except ValueError:
        raise ShapeError("concat: leading shapes differ: " + ", ".join(str(x.shape) for x in xs)) from None


def _concat_bwd(sizes, g, ins, out):
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=-1))


register("concat", _concat_fwd, _concat_bwd)


def concat(xs: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    return apply("concat", *xs)


def _stack_fwd(*xs, axis):
    try:
        return np.stack(xs, axis=axis), axis
    except ValueError:
        raise ShapeError("stack: shapes differ: " + ", ".join(str(x.shape) for x in xs)) from None


register("stack", _stack_fwd, lambda axis, g, ins, out: tuple(np.moveaxis(g, axis, 0)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    return apply("stack", *xs, axis=axis)


def _scatter(shape, index, g):
    full = np.zeros(shape, dtype=DTYPE)
    full[index] = g
    return full


register(
    "unstack",
    lambda x, axis: (list(np.moveaxis(x, axis, 0)), axis),
    lambda axis, gs, ins, out: (np.stack(gs, axis=axis),),
)


def unstack(x, axis: int = 0) -> tuple[Tensor, ...]:
    """Split into the slices along ``axis`` (the inverse of :func:`stack`)."""
    return apply_multi("unstack", x, axis=axis)


def _split_fwd(x, sizes):
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to last dim of {x.shape}")
    out, start = [], 0
    for k in sizes:
        out.append(x[..., start : start + k])
        start += k
    return out, None


register("split", _split_fwd, lambda ctx, gs, ins, out: (np.concatenate(gs, axis=-1),))


def split(x, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    """Split the last axis into consecutive pieces of the given sizes."""
    return apply_multi("split", x, sizes=tuple(sizes))


register("slice", lambda x, index: (x[index], index), lambda index, g, ins, out: (_scatter(ins[0].shape, index, g),))


def slice_(x, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[:, t, :]``."""
    return apply("slice", x, index=index)


register(
    "reshape",
    lambda x, shape: (x.reshape(shape), None),
    lambda ctx, g, ins, out: (g.reshape(ins[0].shape),),
)


def reshape(x, shape) -> Tensor:
    return apply("reshape", x, shape=shape)


def _embedding_fwd(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}")
    return table[ids], ids


def _embedding_bwd(ids, g, ins, out):
    gt = np.zeros_like(ins[0].data)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, gt.shape[-1]))
    return (gt,)


register("embedding", _embedding_fwd, _embedding_bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids are integers and carry no gradient."""
    return apply("embedding", table, ids=ids)


def _gather_fwd(x, ids):
    ids = np.asarray(ids, dtype=np.int64)
    return np.take_along_axis(x, ids[..., None], axis=-1)[..., 0], ids


def _gather_bwd(ids, g, ins, out):
    full = np.zeros_like(ins[0].data)
    np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
    return (full,)


register("gather", _gather_fwd, _gather_bwd)


def gather(x, ids) -> Tensor:
    """Pick ``x[..., ids]`` along the last axis, one index per leading position."""
    return apply("gather", x, ids=ids)


register(
    "dropout",
    lambda x, mask: (x * mask, mask),
    lambda mask, g, ins, out: (g * mask,),
)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: a pre-sampled keep mask scaled by 1/(1-rate)."""
    if not training or rate <= 0.0:
        return as_tensor(x)
    mask = (rng.random(as_tensor(x).shape) >= rate) / (1.0 - rate)
    return apply("dropout", x, mask=mask)


# -- reductions ------------------------------------------------------------------


def _sum_bwd(ctx, g, ins, out):
    axis, keepdims = ctx
    shape = ins[0].shape
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


register("sum", lambda x, axis, keepdims: (x.sum(axis=axis, keepdims=keepdims), (axis, keepdims)), _sum_bwd)


def _mean_fwd(x, axis, keepdims):
    return x.mean(axis=axis, keepdims=keepdims), (axis, keepdims)


def _mean_bwd(ctx, g, ins, out):
    axis, keepdims = ctx
    shape = ins[0].shape
    n = np.prod(shape) if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    (full,) = _sum_bwd(ctx, g, ins, out)
    return (full / n,)


register("mean", _mean_fwd, _mean_bwd)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)


# -- discrete ------------------------------------------------------------------


def _one_hot_argmax(p):
    # np.argmax returns the first maximal index: lowest index wins ties
    idx = np.argmax(p, axis=-1)
    hard = np.zeros_like(p)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return hard


register(
    "straight_through",
    lambda x: (_one_hot_argmax(x), None),
    lambda ctx, g, ins, out: (g,),
)


def straight_through(probs) -> Tensor:
    """Forward: one-hot at the argmax. Backward: identity, as if the input had passed."""
    return apply("straight_through", probs)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
