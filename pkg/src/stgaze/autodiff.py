"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op records its inputs and a backward rule on the output tensor. Node
ids increase with creation, so sorting the reachable graph by descending id
gives a valid reverse traversal order without an explicit topological sort.
Gradients accumulate into leaf ``.grad`` buffers until explicitly zeroed.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from collections.abc import Callable, Iterable, Sequence
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InvalidArgument, NumericFailure

_ids = itertools.count()
_local = threading.local()


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise InvalidArgument(f"unsupported precision {dtype}")
    _local.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the precision used for new tensors (per thread)."""
    previous = get_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = previous


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else get_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable dotted name."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def custom_op(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as a tape node.

    ``backward(grad_out)`` must return one gradient (or None) per parent, in order.
    """
    t = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def backward(root: Tensor, sink: dict | None = None) -> None:
    """Propagate d(root)/d(leaf) into every reachable leaf.

    With ``sink`` given, leaf gradients go into ``sink[leaf]`` instead of
    ``leaf.grad``; this keeps concurrent graphs over shared parameters apart.
    """
    if root.data.size != 1:
        raise InvalidArgument(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in nodes or not node.requires_grad:
            continue
        nodes[node._id] = node
        stack.extend(node._parents)

    grads = {root._id: np.ones_like(root.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            if sink is not None:
                prev = sink.get(node)
                sink[node] = g.copy() if prev is None else prev + g
            elif node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# helpers

def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return custom_op(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return custom_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def arccos(a: Tensor, eps: float = 0.0) -> Tensor:
    """arccos of ``a`` clamped to [-1+eps, 1-eps]; zero gradient where clamped."""
    lo, hi = -1.0 + eps, 1.0 - eps
    clamped = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        denom = np.sqrt(np.maximum(1.0 - clamped * clamped, np.finfo(clamped.dtype).tiny))
        return (np.where(inside, -g / denom, 0.0).astype(clamped.dtype),)

    return custom_op(np.arccos(clamped), (a,), bw)


def arcsin(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op(np.arcsin(ad), (a,), lambda g: (g / np.sqrt(1.0 - ad * ad),))


def arctan2(y, x) -> Tensor:
    y, x = _pair(y, x)
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    return custom_op(np.arctan2(yd, xd), (y, x),
                     lambda g: (_unbroadcast(g * xd / r2, yd.shape), _unbroadcast(-g * yd / r2, xd.shape)))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    ad = a.data
    s = _sigmoid(ad)
    return custom_op(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return custom_op(np.asarray(out), (a,), bw)


def vector_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is taken as 0."""
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis))

    def bw(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, ad / safe, 0.0) * np.expand_dims(g, axis),)

    return custom_op(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return custom_op(np.asarray(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return custom_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return custom_op(out, tensors,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def hflip(a: Tensor) -> Tensor:
    """Mirror along the last (width) axis."""
    return custom_op(a.data[..., ::-1].copy(), (a,), lambda g: (g[..., ::-1].copy(),))


# ---------------------------------------------------------------------------
# linear algebra and layers' primitives

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return custom_op(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias over the last axis; weight is (out, in)."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise InvalidArgument(f"linear: input width {xd.shape[-1]} != weight in-dim {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        grads = [g @ wd, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return custom_op(out, parents, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return custom_op(out, (a,),
                     lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice with population variance, then scale and shift."""
    if eps <= 0:
        raise InvalidArgument("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    D = xd.shape[-1]

    def bw(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, D)
        return dx, (g2 * xhat.reshape(-1, D)).sum(axis=0), g2.sum(axis=0)

    return custom_op(out, (x, gamma, beta), bw)


def _pair_int(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is C×H×W or N×C×H×W; ``weight`` is C_out×C_in×kh×kw.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgument(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    sh, sw = _pair_int(stride)
    ph, pw = _pair_int(padding)
    N, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise InvalidArgument(f"conv2d: input has {C} channels, weight expects {Ci}")
    if sh < 1 or sw < 1:
        raise InvalidArgument("conv2d stride must be >= 1")
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise InvalidArgument(f"conv2d: padded input {H + 2 * ph}x{W + 2 * pw} smaller than kernel {kh}x{kw}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Hp, Wp = xd.shape[2], xd.shape[3]
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        grads = [None, (g2.T @ cols).reshape(weight.shape)]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros((N, C, Hp, Wp), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + sh * (Ho - 1) + 1:sh, v:v + sw * (Wo - 1) + 1:sw] += \
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            grads[0] = dxp[:, :, ph:Hp - ph, pw:Wp - pw]
        return grads

    return custom_op(out, parents, bw)


# ---------------------------------------------------------------------------
# verification

def grad_errors(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Worst central-difference relative error per parameter.

    ``max_entries`` caps the number of checked entries per parameter; the
    subset is drawn with a seeded generator.
    """
    if not h > 0:
        raise InvalidArgument(f"finite-difference step must be positive, got {h}")
    for p in params:
        if p.data.dtype != np.float64:
            raise InvalidArgument("grad_check must run in 64-bit precision")
    rng = np.random.default_rng(seed)
    sink: dict = {}
    root = f()
    if not np.all(np.isfinite(root.data)):
        raise NumericFailure("grad_check: non-finite loss")
    backward(root, sink=sink)
    report = {}
    for i, p in enumerate(params):
        name = getattr(p, "name", "") or f"input{i}"
        analytic = sink.get(p, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for j in idxs:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                fp = float(f().data)
                flat[j] = orig - h
                fm = float(f().data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericFailure(f"grad_check: non-finite value perturbing {name}[{j}]")
            fd = (fp - fm) / (2 * h)
            ad = float(analytic[j])
            err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            worst = max(worst, err)
        report[name] = max(report.get(name, 0.0), worst)
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    errs = grad_errors(f, params, h=h, max_entries=max_entries, seed=seed)
    return max(errs.values(), default=0.0)


# ---------------------------------------------------------------------------
# checkpoint file

CHECKPOINT_MAGIC = b"STGP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named arrays as little-endian float32 records."""
    params = list(params)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError("trailing bytes after last parameter", pos)
    return out
