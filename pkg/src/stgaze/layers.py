"""Layers built on the autodiff primitives: conv encoders, ECA, attention, GRU."""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import CheckpointMismatch, InvalidArgument


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; attributes holding Parameters or Modules are walked by name."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Parameter]]:
        # shared sub-modules are reported once, under the first name reached
        seen = set() if _seen is None else _seen
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data) for name, p in self.named_parameters()]

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters; any name or shape disagreement raises CheckpointMismatch."""
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise CheckpointMismatch(f"checkpoint lacks parameter {name}", name)
            if state[name].shape != p.shape:
                raise CheckpointMismatch(
                    f"parameter {name}: checkpoint shape {state[name].shape} != model shape {p.shape}", name)
        for name in state:
            if name not in own:
                raise CheckpointMismatch(f"checkpoint has unexpected parameter {name}", name)
        for name, p in own.items():
            p.data[...] = state[name]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (d_out, d_in), d_in))
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_init(rng, (c_out,), fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


# ---------------------------------------------------------------------------
# convolutional encoder

class Encoder(Module):
    """Stride-2 stages of 3x3 conv -> bias -> swish; each stage halves the grid."""

    def __init__(self, widths: tuple[int, ...], rng: np.random.Generator, in_channels: int = 3):
        if not widths:
            raise InvalidArgument("encoder needs at least one stage")
        self.stages = []
        c = in_channels
        for w in widths:
            self.stages.append(Conv2d(c, w, 3, rng, stride=2, padding=1))
            c = w
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = ad.swish(stage(x))
        return x


# ---------------------------------------------------------------------------
# efficient channel attention

def eca_kernel_size(channels: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Odd 1-D kernel width for ECA: nearest odd integer to log2(C)/gamma + b/gamma.

    Exact ties (the target is an even integer) resolve to the larger odd value.
    """
    if channels < 1:
        raise InvalidArgument(f"channel count must be >= 1, got {channels}")
    target = math.log2(channels) / gamma + b / gamma
    k = 2 * math.floor((target - 1) / 2 + 0.5) + 1
    return max(k, 1)


class ECA(Module):
    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: int | None = None):
        k = eca_kernel_size(channels) if kernel_size is None else kernel_size
        if k < 1 or k % 2 == 0:
            raise InvalidArgument(f"ECA kernel size must be odd and >= 1, got {k}")
        self.channels = channels
        self.kernel_size = k
        self.weight = Parameter(uniform_init(rng, (1, 1, 1, k), k))

    def gates(self, x: Tensor) -> Tensor:
        """Per-channel gate in (0, 1), shape N×C."""
        n, c = x.shape[0], x.shape[1]
        pooled = ad.mean(x, axis=(2, 3))
        conv = ad.conv2d(pooled.reshape(n, 1, 1, c), self.weight, None, 1, (0, (self.kernel_size - 1) // 2))
        return ad.sigmoid(conv.reshape(n, c))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        return x * self.gates(x).reshape(n, c, 1, 1)


# ---------------------------------------------------------------------------
# attention

class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise InvalidArgument(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, s, _ = x.shape
        return x.reshape(n, s, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def forward(self, y: Tensor) -> Tensor:
        squeeze = y.ndim == 2
        if squeeze:
            y = y.reshape((1,) + y.shape)
        n, s, d = y.shape
        q, k, v = self._split(self.q(y)), self._split(self.k(y)), self._split(self.v(y))
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.heads))
        att = ad.softmax(scores, axis=-1)
        self.last_attention = att.data
        mixed = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, s, d)
        out = self.out(mixed)
        return out.reshape(s, d) if squeeze else out


class TransformerBlock(Module):
    """Pre-norm block: y + MHSA(LN(y)), then + FFN(LN(.)) with a swish hidden layer."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, ffn_hidden, rng)
        self.fc2 = Linear(ffn_hidden, dim, rng)

    def forward(self, y: Tensor) -> Tensor:
        y = y + self.attn(self.norm1(y))
        return y + self.fc2(ad.swish(self.fc1(self.norm2(y))))


# ---------------------------------------------------------------------------
# GRU

def gru_step(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU cell update built from tape primitives (gate rows ordered r, z, n).

    r = sigmoid(W_r x + U_r h + b_r), z likewise,
    n = tanh(W_n x + b_in + r * (U_n h + b_hn)), h' = (1 - z) * n + z * h.
    """
    hid = h.shape[-1]
    gi = ad.linear(x, w_ih, b_ih)
    gh = ad.linear(h, w_hh, b_hh)
    r = ad.sigmoid(gi[..., :hid] + gh[..., :hid])
    z = ad.sigmoid(gi[..., hid:2 * hid] + gh[..., hid:2 * hid])
    n = ad.tanh(gi[..., 2 * hid:] + r * gh[..., 2 * hid:])
    return (1.0 - z) * n + z * h


def gru_scan(gi: Tensor, h0: Tensor, w_hh: Tensor, b_hh: Tensor) -> Tensor:
    """Run the GRU recurrence over precomputed input projections.

    ``gi`` is N×S×3H (W_ih x + b_ih for every position), ``h0`` is N×H.
    Returns the N×S×H hidden states; the last one is the final state.
    Forward and backward are fused so the tape holds one node per scan.
    """
    gid, h = gi.data, h0.data
    n_items, steps, three_h = gid.shape
    hid = three_h // 3
    W, bh = w_hh.data, b_hh.data
    dtype = gid.dtype
    hs = np.empty((steps + 1, n_items, hid), dtype=dtype)
    rs = np.empty((steps, n_items, hid), dtype=dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    ghn = np.empty_like(rs)
    hs[0] = h
    for s in range(steps):
        gh = hs[s] @ W.T + bh
        g = gid[:, s]
        r = ad._sigmoid(g[:, :hid] + gh[:, :hid])
        z = ad._sigmoid(g[:, hid:2 * hid] + gh[:, hid:2 * hid])
        n = np.tanh(g[:, 2 * hid:] + r * gh[:, 2 * hid:])
        hs[s + 1] = (1.0 - z) * n + z * hs[s]
        rs[s], zs[s], ns[s], ghn[s] = r, z, n, gh[:, 2 * hid:]
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def bw(grad):
        dgi = np.empty_like(gid)
        dW = np.zeros_like(W)
        dbh = np.zeros_like(bh)
        dh_next = np.zeros((n_items, hid), dtype=dtype)
        dgh = np.empty((n_items, three_h), dtype=dtype)
        for s in range(steps - 1, -1, -1):
            r, z, n, h_prev = rs[s], zs[s], ns[s], hs[s]
            dh = grad[:, s] + dh_next
            dan = dh * (1.0 - z) * (1.0 - n * n)
            daz = dh * (h_prev - n) * z * (1.0 - z)
            dar = dan * ghn[s] * r * (1.0 - r)
            dgi[:, s, :hid] = dar
            dgi[:, s, hid:2 * hid] = daz
            dgi[:, s, 2 * hid:] = dan
            dgh[:, :hid] = dar
            dgh[:, hid:2 * hid] = daz
            dgh[:, 2 * hid:] = dan * r
            dW += dgh.T @ h_prev
            dbh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ W
        return dgi, dh_next, dW, dbh

    return ad.custom_op(out, (gi, h0, w_hh, b_hh), bw)


class GRULayer(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.weight_ih = Parameter(uniform_init(rng, (3 * hidden, d_in), d_in))
        self.weight_hh = Parameter(uniform_init(rng, (3 * hidden, hidden), hidden))
        self.bias_ih = Parameter(uniform_init(rng, (3 * hidden,), hidden))
        self.bias_hh = Parameter(uniform_init(rng, (3 * hidden,), hidden))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(x, h, self.weight_ih, self.weight_hh, self.bias_ih, self.bias_hh)

    def forward(self, x: Tensor, h0: Tensor) -> Tensor:
        """x: N×S×D_in, h0: N×H -> N×S×H."""
        gi = ad.linear(x, self.weight_ih, self.bias_ih)
        return gru_scan(gi, h0, self.weight_hh, self.bias_hh)


@dataclass(frozen=True)
class GruStackConfig:
    input_dim: int = 160
    hidden_dim: int = 160
    num_layers: int = 2


class GRUStack(Module):
    """Stacked GRU; layer l+1 consumes layer l's outputs."""

    def __init__(self, cfg: GruStackConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [GRULayer(cfg.input_dim if i == 0 else cfg.hidden_dim, cfg.hidden_dim, rng)
                       for i in range(cfg.num_layers)]

    def forward(self, x: Tensor, h0: Tensor) -> tuple[Tensor, Tensor]:
        """x: N×S×D, h0: N×L×H -> (top-layer outputs N×S×H, final state N×L×H)."""
        finals = []
        for i, layer in enumerate(self.layers):
            x = layer(x, h0[:, i])
            finals.append(x[:, -1])
        return x, ad.stack(finals, axis=1)
