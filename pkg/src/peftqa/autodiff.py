"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op builds a :class:`Node` that keeps only the arrays its
backward rule needs, and only for inputs that actually require gradients. A
frozen weight therefore never causes the activation feeding it to be kept
alive, which is what makes the activation accounting in the trainer honest.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "DimensionError",
    "ContractError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "get_dtype",
    "debug_mode",
    "make_op",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "sum_",
    "mean",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "embedding_lookup",
    "dropout",
    "cross_entropy_from_logits",
    "column_l2_norms",
    "backward",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)
        self.debug = False


_state = _State()
_node_ids = itertools.count()


def get_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily change the dtype new tensors are created with.

    Training always runs in float32; float64 exists so finite-difference
    checks are not dominated by rounding.
    """
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterable[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterable[None]:
    """Check every forward result for NaN/Inf while active."""
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class Node:
    """One recorded op: its inputs, the arrays saved for backward and the rule."""

    __slots__ = ("id", "op", "inputs", "saved", "backward_fn")

    def __init__(self, op: str, inputs: tuple, saved: tuple, backward_fn: Callable) -> None:
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.backward_fn = backward_fn

    @property
    def saved_bytes(self) -> int:
        return sum(a.nbytes for a in self.saved if isinstance(a, np.ndarray))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _node: Node | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state.dtype and not (_node is not None and arr.dtype.kind == "f"):
            arr = arr.astype(_state.dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = _node
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state.dtype))


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, saved: tuple = ()) -> Tensor:
    """Wrap a forward result, recording a node when any input needs a gradient.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    if _state.debug and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(out)
    node = Node(op, tuple(inputs), tuple(saved), backward_fn)
    return Tensor(out, requires_grad=True, _node=node)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make_op("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return make_op("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad = a.data if b.requires_grad else None
    bd = b.data if a.requires_grad else None

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if bd is not None else None,
                _unbroadcast(g * ad, b.shape) if ad is not None else None)

    return make_op("mul", a.data * b.data, (a, b), bw, saved=(ad, bd))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    bd = b.data
    keep_out = out if b.requires_grad else None

    def bw(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * keep_out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op("div", out, (a, b), bw, saved=(bd, keep_out))


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation used by BERT-family encoders."""
    x = _as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd * xd)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * local,)

    return make_op("gelu", out.astype(xd.dtype, copy=False), (x,), bw, saved=(xd, t))


# -- shape ops -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad = a.data if b.requires_grad else None
    bd = b.data if a.requires_grad else None
    sa, sb = a.shape, b.shape
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so the product is a single GEMM
        k = sa[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(sa[:-1] + (sb[1],))

        def bw(g):
            g2 = g.reshape(-1, sb[1])
            ga = (g2 @ bd.T).reshape(sa) if bd is not None else None
            gb = ad.reshape(-1, k).T @ g2 if ad is not None else None
            return ga, gb

        return make_op("matmul", out, (a, b), bw, saved=(ad, bd))

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa) if bd is not None else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb) if ad is not None else None
        return ga, gb

    return make_op("matmul", a.data @ b.data, (a, b), bw, saved=(ad, bd))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            return x
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return make_op("reshape", out, (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    src_shape, dtype = x.shape, x.data.dtype

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op("getitem", x.data[index], (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_op("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.numel
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[i] for i in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalisation and attention ---------------------------------------------


def softmax_rows(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``additive_mask`` is a constant (not differentiated) added to the logits
    before normalising, e.g. large negatives on padding keys.
    """
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: last dimension must be >= 1, got {x.shape}")
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_op("softmax", p, (x,), bw, saved=(p,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return make_op("layer_norm", out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw, saved=(xhat, rstd))


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` (any shape)."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {weight.shape[0]})")
    src = weight.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[-1]))
        return (full,)

    return make_op("embedding", weight.data[ids], (weight,), bw, saved=(ids,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scaled by 1/(1-p) when training, identity otherwise."""
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,), saved=(keep,))


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    b, n = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError(f"cross_entropy: target index outside [0, {n})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, targets])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / b),)

    return make_op("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, saved=(z, lse))


def column_l2_norms(x: Tensor, eps: float = 1e-8) -> Tensor:
    """sqrt(sum of squares + eps) of every column of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"column_l2_norms expects a matrix, got {x.shape}")
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=0) + eps)

    def bw(g):
        return (xd * (g / norms)[None, :],)

    return make_op("column_l2_norms", norms.astype(xd.dtype, copy=False), (x,), bw, saved=(xd, norms))


# -- backward --------------------------------------------------------------


class Tape:
    """Topologically ordered record of the nodes that produced ``root``.

    Built from the output back to the leaves; each node appears once and
    every node comes after all nodes producing its inputs.
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes: list[Node] = []
        self._outputs: dict[int, Tensor] = {}
        seen: set[int] = set()
        if root.node is None:
            return
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            node = t.node
            if expanded:
                self.nodes.append(node)
                self._outputs[node.id] = t
                continue
            if node is None or node.id in seen:
                continue
            seen.add(node.id)
            stack.append((t, True))
            for inp in node.inputs:
                if inp.node is not None and inp.node.id not in seen:
                    stack.append((inp, False))

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def saved_bytes(self) -> int:
        """Bytes of distinct arrays held for backward across the whole tape."""
        seen: dict[int, int] = {}
        for node in self.nodes:
            for a in node.saved:
                if isinstance(a, np.ndarray):
                    seen[id(a)] = a.nbytes
        return sum(seen.values())

    def output_of(self, node: Node) -> Tensor:
        return self._outputs[node.id]


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the tape that was walked so callers can inspect its saved bytes.
    """
    if loss.numel != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape(loss)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
            return tape
        raise ContractError("backward called on a tensor that was not produced under gradient recording")
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                prev = grads.get(inp.node.id)
                grads[inp.node.id] = ig if prev is None else prev + ig
            else:
                ig = np.asarray(ig, dtype=inp.data.dtype).reshape(inp.shape)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
    return tape
