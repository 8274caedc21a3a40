"""Finite-difference verification of every differentiable building block.

Each case builds a small random problem in 64-bit precision and returns a
scalar-valued closure plus the tensors to perturb. ``run_suite`` checks all
of them over many seeds and reports the worst relative error per family.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .geometry import ScreenGeometry
from .layers import ECA, GRULayer, GRUStack, GruStackConfig, MultiHeadSelfAttention, TransformerBlock, gru_step
from .losses import LossWeights, loss_angular, loss_pog, loss_total
from .model import EncoderConfig, ModelConfig, RegressionHead, STGaze

TOLERANCE = 1e-4


def _param(rng, *shape, scale=1.0) -> Parameter:
    return Parameter(rng.normal(0.0, scale, size=shape))


def _dims(rng, scale: str, lo: int = 1, hi: int | None = None) -> int:
    hi = hi or (4 if scale == "tiny" else 6)
    return int(rng.integers(lo, hi + 1))


def _readout(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    # random linear readout so every output entry influences the scalar
    w = rng.normal(size=out.shape)
    return lambda t: ad.tensor_sum(t * w)


def _wrap(rng, fn, params):
    probe = fn()
    read = _readout(rng, probe)
    return (lambda: read(fn())), params


def case_conv2d(rng, scale):
    c, o, k = _dims(rng, scale), _dims(rng, scale), int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = max(k, _dims(rng, scale, 2))
    x = _param(rng, 2, c, h, h)
    w, b = _param(rng, o, c, k, k), _param(rng, o)
    return _wrap(rng, lambda: ad.conv2d(x, w, b, stride, pad), [x, w, b])


def case_linear(rng, scale):
    x = _param(rng, _dims(rng, scale), _dims(rng, scale))
    w, b = _param(rng, _dims(rng, scale), x.shape[1]), None
    b = _param(rng, w.shape[0])
    return _wrap(rng, lambda: ad.linear(x, w, b), [x, w, b])


def case_matmul(rng, scale):
    n, m, k = (_dims(rng, scale) for _ in range(3))
    a, b = _param(rng, 2, n, k), _param(rng, 2, k, m)
    return _wrap(rng, lambda: ad.matmul(a, b), [a, b])


def case_elementwise(rng, scale):
    shape = (_dims(rng, scale), _dims(rng, scale))
    a, b = _param(rng, *shape), _param(rng, *shape)
    c = Parameter(rng.uniform(0.5, 2.0, size=shape))
    return _wrap(rng, lambda: (a + b) * a - b / c, [a, b, c])


def case_sigmoid(rng, scale):
    a = _param(rng, _dims(rng, scale), _dims(rng, scale), scale=2.0)
    return _wrap(rng, lambda: ad.sigmoid(a), [a])


def case_tanh(rng, scale):
    a = _param(rng, _dims(rng, scale), _dims(rng, scale), scale=2.0)
    return _wrap(rng, lambda: ad.tanh(a), [a])


def case_swish(rng, scale):
    a = _param(rng, _dims(rng, scale), _dims(rng, scale), scale=2.0)
    return _wrap(rng, lambda: ad.swish(a), [a])


def case_softmax(rng, scale):
    a = _param(rng, _dims(rng, scale), _dims(rng, scale), scale=2.0)
    return _wrap(rng, lambda: ad.softmax(a, axis=-1), [a])


def case_layer_norm(rng, scale):
    d = _dims(rng, scale, 2)
    x = _param(rng, _dims(rng, scale), d)
    g, b = _param(rng, d), _param(rng, d)
    return _wrap(rng, lambda: ad.layer_norm(x, g, b, 1e-5), [x, g, b])


def case_mean(rng, scale):
    x = _param(rng, _dims(rng, scale), _dims(rng, scale), _dims(rng, scale))
    axis = int(rng.integers(0, 3))
    return _wrap(rng, lambda: ad.mean(x, axis=axis) * ad.mean(x), [x])


def case_concat_slice_flip(rng, scale):
    a, b = _param(rng, 2, _dims(rng, scale)), _param(rng, 2, _dims(rng, scale))
    return _wrap(rng, lambda: ad.hflip(ad.concat([a, b], axis=1))[:, 1:] * 2.0, [a, b])


def case_eca(rng, scale):
    c = _dims(rng, scale, 2, 8)
    eca = ECA(c, rng, kernel_size=3)
    x = _param(rng, 2, c, _dims(rng, scale, 2), _dims(rng, scale, 2))
    return _wrap(rng, lambda: eca(x), [x] + eca.parameters())


def case_mhsa(rng, scale):
    heads = int(rng.integers(1, 3))
    d = heads * _dims(rng, scale, 1, 2)
    att = MultiHeadSelfAttention(d, heads, rng)
    y = _param(rng, 2, _dims(rng, scale), d)
    return _wrap(rng, lambda: att(y), [y] + att.parameters())


def case_transformer_block(rng, scale):
    d = 2 * _dims(rng, scale, 1, 2)
    blk = TransformerBlock(d, 2, 2 * d, rng)
    for p in (blk.norm1.weight, blk.norm2.weight, blk.norm1.bias, blk.norm2.bias):
        p.data[...] = rng.normal(size=p.shape)
    y = _param(rng, 1, _dims(rng, scale, 2), d)
    return _wrap(rng, lambda: blk(y), [y] + blk.parameters())


def case_gru_cell(rng, scale):
    d_in, hid = _dims(rng, scale), _dims(rng, scale)
    layer = GRULayer(d_in, hid, rng)
    x, h = _param(rng, 2, d_in), _param(rng, 2, hid)
    return _wrap(rng, lambda: layer.step(x, h), [x, h] + layer.parameters())


def case_gru_stack(rng, scale):
    cfg = GruStackConfig(_dims(rng, scale), _dims(rng, scale), 2)
    gru = GRUStack(cfg, rng)
    x = _param(rng, 2, _dims(rng, scale, 2), cfg.input_dim)
    h0 = _param(rng, 2, 2, cfg.hidden_dim)

    def f():
        z, h = gru(x, h0)
        return ad.concat([z.reshape(2, -1), h.reshape(2, -1)], axis=1)

    return _wrap(rng, f, [x, h0] + gru.parameters())


def case_regression_head(rng, scale):
    d = _dims(rng, scale)
    head = RegressionHead(d, _dims(rng, scale), rng)
    z = _param(rng, 2, _dims(rng, scale), d)
    return _wrap(rng, lambda: head(z), [z] + head.parameters())


def case_losses(rng, scale):
    n = _dims(rng, scale)
    pred = Parameter(rng.uniform(-0.4, 0.4, size=(n, 2)))
    truth = rng.uniform(-0.4, 0.4, size=(n, 2))
    origin = np.array([rng.uniform(-5, 5), rng.uniform(5, 15), rng.uniform(50, 70)])
    geom = ScreenGeometry()
    w = LossWeights(1.0, 0.1, 0.01)

    def f():
        pog = loss_pog(pred, truth, origin, geom)
        return loss_total(loss_angular(pred, truth), pog.cm, pog.px, w)

    return f, [pred]


def tiny_model_config(seed: int = 0) -> ModelConfig:
    """Miniature network: 8 px inputs, 2×2 grid, D=12, 2 heads, one block, hidden 12."""
    return ModelConfig(eye=EncoderConfig((4, 8), 8), face=EncoderConfig((4, 4), 8),
                       sam_blocks=1, sam_heads=2, ffn_hidden=24, gru_hidden=12, gru_layers=2,
                       head_hidden=8, seed=seed)


def case_full_model(rng, scale):
    model = STGaze(tiny_model_config(int(rng.integers(1 << 30))))
    el, er, fc = (rng.random((1, 2, 3, 8, 8)) for _ in range(3))
    truth = rng.uniform(-0.3, 0.3, size=(1, 2, 2))
    origin = np.array([0.0, 12.0, 60.0])
    geom = ScreenGeometry()
    w = LossWeights(1.0, 0.01, 0.001)

    def f():
        out = model(el, er, fc)
        pog = loss_pog(out.vectors, truth, origin, geom)
        return loss_total(loss_angular(out.vectors, truth), pog.cm, pog.px, w)

    return f, model.parameters()


FAMILIES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "linear": case_linear,
    "matmul": case_matmul,
    "elementwise": case_elementwise,
    "sigmoid": case_sigmoid,
    "tanh": case_tanh,
    "swish": case_swish,
    "softmax": case_softmax,
    "layer_norm": case_layer_norm,
    "mean": case_mean,
    "concat_slice_flip": case_concat_slice_flip,
    "eca": case_eca,
    "mhsa": case_mhsa,
    "transformer_block": case_transformer_block,
    "gru_cell": case_gru_cell,
    "gru_stack": case_gru_stack,
    "regression_head": case_regression_head,
    "losses": case_losses,
    "full_model": case_full_model,
}

# entries checked per parameter tensor; None = all of them
_ENTRY_CAP = {"full_model": 2}


@dataclass
class FamilyResult:
    family: str
    seeds: int
    max_rel_err: float
    worst_param: str
    worst_seed: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE

    def as_dict(self) -> dict:
        return {"family": self.family, "seeds": self.seeds, "max_rel_err": self.max_rel_err,
                "worst_param": self.worst_param, "worst_seed": self.worst_seed,
                "seconds": round(self.seconds, 3), "passed": self.passed}


def check_family(name: str, seeds: int = 20, scale: str = "tiny") -> FamilyResult:
    case = FAMILIES[name]
    worst, worst_param, worst_seed = 0.0, "", -1
    t0 = time.perf_counter()
    with ad.precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng([seed, len(name)])
            f, params = case(rng, scale)
            for i, p in enumerate(params):
                if not getattr(p, "name", ""):
                    p.name = f"arg{i}"
            errs = ad.grad_errors(f, params, max_entries=_ENTRY_CAP.get(name), seed=seed)
            pname, err = max(errs.items(), key=lambda kv: kv[1])
            if err >= worst:
                worst, worst_param, worst_seed = err, pname, seed
    return FamilyResult(name, seeds, worst, worst_param, worst_seed, time.perf_counter() - t0)


def run_suite(scale: str = "tiny", seeds: int | None = None) -> list[FamilyResult]:
    if scale not in ("tiny", "small"):
        raise ValueError(f"scale must be 'tiny' or 'small', got {scale!r}")
    seeds = seeds or 20
    return [check_family(name, seeds, scale) for name in FAMILIES]
