"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose operands live on it.  Leaves
are registered explicitly with :meth:`Tape.watch`; operations on tensors
that are not on any tape are plain numpy computations and record nothing.
:func:`backward` walks the tape once in reverse and returns a gradient for
every registered leaf.

Leading batch axes are accepted by the layer operations (``conv2d``,
``maxpool2d``, ``softmax_cross_entropy``) so that many samples can share a
single tape.  A batched loss reduced with ``"sum"`` yields per-sample input
gradients that are identical to running each sample on its own tape.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "sum",
    "mean",
    "relu",
    "conv2d",
    "maxpool2d",
    "log_softmax",
    "softmax",
    "softmax_cross_entropy",
    "pick",
    "logsumexp",
    "sign",
    "clamp_project",
    "straight_through",
]

GradientMap = dict  # leaf name -> Tensor of the leaf's shape


class Tensor:
    """Immutable n-dimensional real array, optionally bound to a tape node.

    The tape is held weakly: recorded backward closures refer to tensors,
    so a strong link back would make every tape a reference cycle that
    keeps its activations alive until a full garbage collection.
    """

    __slots__ = ("data", "_tape", "node")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported precision {arr.dtype}")
        arr.flags.writeable = False
        self.data = arr
        self._tape = None
        self.node = None

    @classmethod
    def _wrap(cls, arr, tape=None, node=None):
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out._tape = None if tape is None else weakref.ref(tape)
        out.node = node
        return out

    @property
    def tape(self):
        return None if self._tape is None else self._tape()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Writable copy of the values."""
        return np.array(self.data)

    def item(self):
        return self.data.item()

    def __repr__(self):
        where = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"

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


def tensor(data, dtype=np.float32) -> Tensor:
    """Build a constant tensor (copying ``data``)."""
    return Tensor(data, dtype=dtype)


@dataclass(frozen=True)
class _Node:
    kind: str
    parents: tuple  # node index or None per operand
    vjp: Callable | None  # (grad, needs) -> tuple of grads, one per operand


class Tape:
    """Append-only operation record for one forward computation.

    Not thread-safe; give every worker its own tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self._leaf_meta: dict[int, tuple] = {}

    def __len__(self):
        return len(self.nodes)

    def watch(self, value, name: str, dtype=None) -> Tensor:
        """Register ``value`` as a differentiable leaf called ``name``."""
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already registered")
        if isinstance(value, Tensor):
            arr = value.data if dtype is None else value.data.astype(dtype)
        else:
            arr = _as_tensor(value).data if dtype is None else np.asarray(value, dtype=dtype)
            arr = np.array(arr)
        node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        self.leaves[name] = node
        self._leaf_meta[node] = (arr.shape, arr.dtype)
        return Tensor._wrap(arr, self, node)

    def record(self, kind, out, operands, vjp) -> Tensor:
        parents = tuple(o.node if o.tape is self else None for o in operands)
        node = len(self.nodes)
        self.nodes.append(_Node(kind, parents, vjp))
        return Tensor._wrap(out, self, node)


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        dtype = like.dtype
    elif isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    else:
        dtype = np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _tape_of(*operands):
    tape = None
    for o in operands:
        if o.tape is not None:
            if tape is not None and o.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
            tape = o.tape
    return tape


def _emit(kind, out, operands, vjp) -> Tensor:
    tape = _tape_of(*operands)
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(kind, out, operands, vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for every leaf of ``tape``."""
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: list = [None] * len(tape.nodes)
    grads[loss.node] = np.ones(loss.shape, dtype=loss.dtype)
    for index in range(loss.node, -1, -1):
        g = grads[index]
        node = tape.nodes[index]
        if g is None or node.vjp is None:
            continue
        needs = tuple(p is not None for p in node.parents)
        if not any(needs):
            continue
        for parent, pg in zip(node.parents, node.vjp(g, needs)):
            if parent is None or pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
        if index != loss.node:
            grads[index] = None
    result = {}
    for name, index in tape.leaves.items():
        g = grads[index]
        if g is None:
            shape, dtype = tape._leaf_meta[index]
            g = np.zeros(shape, dtype=dtype)
        result[name] = Tensor._wrap(g)
    return result


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            -_unbroadcast(g, sb) if needs[1] else None,
        )

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _emit("mul", ad * bd, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g, needs: (-g,))


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, v)``; the subgradient at 0 is 0."""
    mask = a.data > 0
    out = np.where(mask, a.data, np.zeros((), dtype=a.dtype))
    return _emit("relu", out, (a,), lambda g, needs: (g * mask,))


def sign(a) -> Tensor:
    """Elementwise sign with ``sign(0) = 0``.

    The result is a constant: sign has zero derivative almost everywhere,
    so nothing is recorded.
    """
    a = _as_tensor(a)
    return Tensor._wrap(np.sign(a.data))


def clamp_project(x, center, epsilon: float, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    """Clip ``x`` into ``[center - eps, center + eps]`` intersected with ``[lo, hi]``.

    Returns a constant tensor.  When ``center`` itself lies outside
    ``[lo, hi]`` the range bound wins.
    """
    x = _as_tensor(x)
    center = _as_tensor(center, x)
    if x.shape != center.shape:
        raise DimensionError(f"x {x.shape} and center {center.shape} differ")
    if epsilon < 0:
        raise ContractError("epsilon must be non-negative")
    if not lo < hi:
        raise ContractError("clamp requires lo < hi")
    c = center.data
    out = np.minimum(np.maximum(x.data, c - epsilon), c + epsilon)
    out = np.clip(out, lo, hi).astype(x.dtype, copy=False)
    return Tensor._wrap(out)


def straight_through(x: Tensor, value, groups: int = 1) -> Tensor:
    """Forward returns ``value``; backward treats the map as identity on ``x``.

    ``value`` has shape ``(N * groups, ...)`` for ``x`` of shape ``(N, ...)``,
    laid out sample-major (the ``groups`` copies of sample 0 first).  The
    incoming gradient of every copy is summed back onto its source sample.
    """
    value = np.asarray(value, dtype=x.dtype)
    n = x.shape[0]
    expected = (n * groups,) + x.shape[1:]
    if value.shape != expected:
        raise DimensionError(f"value shape {value.shape}, expected {expected}")

    def vjp(g, needs):
        return (g.reshape((n, groups) + x.shape[1:]).sum(axis=1),)

    return _emit("straight_through", value.copy(), (x,), vjp)


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(src),))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), np.asarray(1.0 / count, dtype=a.dtype))


# --------------------------------------------------------------------- layers


def matmul(a, b) -> Tensor:
    """Matrix product of ``(m, k)`` and ``(k, n)`` operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _emit("matmul", ad @ bd, (a, b), vjp)


def _correlate(xp, wmat, k):
    """Valid stride-1 correlation of padded ``(n, c, h, w)`` with ``(o, c*k*k)``."""
    n, c, h, w = xp.shape
    ho, wo = h - k + 1, w - k + 1
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return out, cols


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding plus per-channel bias.

    ``x`` is ``(C_in, H, W)`` or batched ``(N, C_in, H, W)``; kernels are
    ``(C_out, C_in, k, k)``.
    """
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    if padding < 0:
        raise ContractError("padding must be non-negative")
    xd = x.data[None] if single else x.data
    n, c_in, h, w = xd.shape
    c_out, kc, k, _ = kernels.shape
    if kc != c_in:
        raise DimensionError(f"input has {c_in} channels, kernels expect {kc}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias must be ({c_out},), got {bias.shape}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {(h, w)}")
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = kernels.data.reshape(c_out, c_in * k * k)
    out, cols = _correlate(xd, wmat, k)
    ho, wo = out.shape[2:]
    hp, wp = xd.shape[2:]
    out = np.ascontiguousarray(out + bias.data[:, None, None])
    if single:
        out = out[0]

    def vjp(g, needs):
        g4 = g[None] if single else g
        gx = gk = gb = None
        if needs[0]:
            gm = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
            dcols = (gm @ wmat).reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 4, 5, 1, 2)
            dcols = np.ascontiguousarray(dcols)  # n, c_in, k, k, ho, wo
            dxp = np.zeros((n, c_in, hp, wp), dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(dxp[0] if single else dxp)
        if needs[1] or needs[2]:
            gm = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
            if needs[1]:
                gk = (gm.T @ cols).reshape(kernels.shape)
            if needs[2]:
                gb = gm.sum(axis=0)
        return gx, gk, gb

    return _emit("conv2d", out, (x, kernels, bias), vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes.

    Gradient goes to the window's argmax; on ties the first cell in
    row-major order receives all of it.
    """
    if x.ndim < 3:
        raise DimensionError(f"maxpool2d expects (..., C, H, W), got {x.shape}")
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even extents, got {(h, w)}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    cells = blocks.transpose(perm).reshape(*lead, h // 2, w // 2, 4)
    arg = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]

    def vjp(g, needs):
        onehot = (np.arange(4) == arg[..., None]).astype(g.dtype) * g[..., None]
        back = onehot.reshape(*lead, h // 2, w // 2, 2, 2)
        inv = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
        return (np.ascontiguousarray(back.transpose(inv)).reshape(x.shape),)

    return _emit("maxpool2d", out, (x,), vjp)


# ------------------------------------------------------------- probabilities


def _log_softmax_values(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis as a plain array (not recorded)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.exp(_log_softmax_values(z))


def log_softmax(logits: Tensor) -> Tensor:
    out = _log_softmax_values(logits.data)
    probs = np.exp(out)

    def vjp(g, needs):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (logits,), vjp)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data
    peak = z.max(axis=axis, keepdims=True)
    out = np.squeeze(peak, axis=axis) + np.log(np.exp(z - peak).sum(axis=axis))
    weights = np.exp(z - np.expand_dims(out, axis))

    def vjp(g, needs):
        return (np.expand_dims(g, axis) * weights,)

    return _emit("logsumexp", out, (a,), vjp)


def pick(a: Tensor, index) -> Tensor:
    """Select ``a[..., index]`` per row along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise DimensionError(f"index shape {index.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def vjp(g, needs):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit("pick", out, (a,), vjp)


def softmax_cross_entropy(logits: Tensor, label, reduction: str = "sum") -> Tensor:
    """``-log softmax(logits)[label]`` computed with max subtraction.

    ``logits`` is ``(n_classes,)`` with an int label, or ``(N, n_classes)``
    with one label per row.  Batched losses are reduced by ``"sum"``,
    ``"mean"`` or kept per row with ``"none"``.
    """
    n_classes = logits.shape[-1]
    labels = np.asarray(label, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite logits")
    logp = _log_softmax_values(logits.data)
    rows = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    local = probs - onehot  # d(row loss)/d(logits)

    if reduction == "none":
        return _emit("xent", rows, (logits,), lambda g, needs: (g[..., None] * local,))
    if reduction == "sum":
        scale = 1.0
    elif reduction == "mean":
        scale = 1.0 / max(rows.size, 1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    total = np.asarray(rows.sum() * scale, dtype=logits.dtype)
    return _emit("xent", total, (logits,), lambda g, needs: (g * scale * local,))

