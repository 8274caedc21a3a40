"""Adam, cosine learning-rate schedule, and the train / evaluate loops."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import synth
from .autodiff import Parameter
from .errors import InvalidArgument, NumericFailure
from .geometry import ScreenGeometry, angular_error_deg, pog_cm, pog_px
from .losses import BatchMetrics, LossWeights, sequence_loss
from .model import STGaze

log = logging.getLogger(__name__)

REFERENCE_BATCH = 6


class Adam:
    """Adam with bias correction; moments are kept per parameter, in list order."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericFailure(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


def lr_at(step: int, total_steps: int, base: float) -> float:
    """Cosine annealing from ``base`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise InvalidArgument("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InvalidArgument(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 6
    base_lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    T: int = 8
    seed: int = 0
    augment_std_deg: float = 3.0
    clip_norm: float = 10.0
    eval_batch_size: int = 8
    threads: int = 1
    geometry: ScreenGeometry = field(default_factory=ScreenGeometry)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")

    @property
    def lr(self) -> float:
        """Base rate scaled linearly with the batch size, anchored at batch 6."""
        return self.base_lr * self.batch_size / REFERENCE_BATCH


def collate(samples: Sequence[synth.SequenceSample]):
    el = np.stack([s.eye_left for s in samples])
    er = np.stack([s.eye_right for s in samples])
    fc = np.stack([s.face for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.float64)
    origins = np.stack([s.origin for s in samples]).astype(np.float64)
    return el, er, fc, labels, origins


def _item_grads(model: STGaze, sample, scale: float, cfg: TrainConfig):
    el, er, fc, labels, origins = collate([sample])
    out = model(el, er, fc)
    loss, info = sequence_loss(out.vectors, labels, origins, cfg.geometry, cfg.weights)
    sink: dict = {}
    ad.backward(loss * scale, sink=sink)
    return float(loss.data), info, sink


def batch_step(model: STGaze, samples, cfg: TrainConfig) -> tuple[float, dict]:
    """Zero gradients, run forward/backward over ``samples``; gradients land in ``.grad``."""
    model.zero_grad()
    if cfg.threads <= 1:
        el, er, fc, labels, origins = collate(samples)
        out = model(el, er, fc)
        loss, info = sequence_loss(out.vectors, labels, origins, cfg.geometry, cfg.weights)
        if not np.isfinite(loss.data):
            raise NumericFailure("loss is not finite")
        ad.backward(loss)
        return float(loss.data), info
    # data-parallel: one item per task, gradients summed in item order
    n = len(samples)
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        results = list(pool.map(lambda s: _item_grads(model, s, 1.0 / n, cfg), samples))
    losses = [r[0] for r in results]
    if not np.all(np.isfinite(losses)):
        raise NumericFailure("loss is not finite")
    for _, _, sink in results:
        for p, g in sink.items():
            p.grad += g
    info = {"ang_deg": float(np.mean([r[1]["ang_deg"] for r in results])),
            "masked": sum(r[1]["masked"] for r in results)}
    return float(np.mean(losses)), info


def predict_batch(model: STGaze, samples) -> np.ndarray:
    """Final (pitch, yaw) for each frame, every sequence starting from zero state."""
    el, er, fc, _, _ = collate(samples)
    with ad.no_grad():
        return model(el, er, fc).angles.data.astype(np.float64)


def evaluate(model: STGaze | None, dataset, geom: ScreenGeometry, batch_size: int = 8,
             predict: Callable | None = None) -> BatchMetrics:
    """Angular and PoG error over every frame; labels are never augmented here.

    ``predict(samples) -> N×T×2`` replaces the model when given.
    """
    predict = predict or (lambda samples: predict_batch(model, samples))
    metrics = None
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        pred = np.asarray(predict(samples), dtype=np.float64)
        truth = np.stack([s.labels for s in samples]).astype(np.float64)
        origins = np.stack([s.origin for s in samples]).astype(np.float64)[:, None, :]
        ang = angular_error_deg(pred, truth)
        o = np.broadcast_to(origins, truth.shape[:-1] + (3,))
        cm_err, px_err = [], []
        for p_, t_, o_ in zip(pred.reshape(-1, 2), truth.reshape(-1, 2), o.reshape(-1, 3)):
            try:
                a, b = pog_cm(p_, geom, o_), pog_cm(t_, geom, o_)
            except Exception:
                continue
            cm_err.append(np.linalg.norm(a - b))
            px_err.append(np.linalg.norm(pog_px(a, geom) - pog_px(b, geom)))
        m = BatchMetrics.from_errors(ang, cm_err, px_err)
        metrics = m if metrics is None else metrics.combine(m)
    if metrics is None:
        raise InvalidArgument("empty evaluation set")
    return metrics


@dataclass
class TrainResult:
    history: list[dict]
    best_val_ang_deg: float
    checkpoint: Path | None


def train(cfg: TrainConfig, dataset, model: STGaze, val_set=None, out_dir=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place; writes ``best.stgp`` and ``metrics.jsonl`` into ``out_dir``."""
    if len(dataset) == 0:
        raise InvalidArgument("training set is empty")
    if getattr(dataset, "T", cfg.T) != cfg.T:
        raise InvalidArgument(f"dataset has T={dataset.T}, config expects T={cfg.T}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("")
    optimizer = Adam(model.parameters())
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best = math.inf
    ckpt = out_dir / "best.stgp" if out_dir is not None else None
    if ckpt is not None:
        ad.save_checkpoint(ckpt, model.state_dict())
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses, angs = [], []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            samples = [synth.offset_augment(dataset[int(i)], rng, cfg.augment_std_deg) for i in idx]
            lr = lr_at(step, total, cfg.lr)
            try:
                loss, info = batch_step(model, samples, cfg)
                clip_grad_norm(optimizer.params, cfg.clip_norm)
                optimizer.step(lr)
            except NumericFailure:
                log.error("numeric failure at epoch %d batch %d; last good checkpoint kept", epoch, b)
                raise
            losses.append(loss)
            angs.append(info["ang_deg"])
            step += 1
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                  "train_ang_deg": float(np.mean(angs))}
        if val_set is not None:
            vm = evaluate(model, val_set, cfg.geometry, cfg.eval_batch_size)
            record["val_ang_deg"] = vm.mean_ang_deg
            record["val_pog_cm"] = vm.mean_pog_cm
            if vm.mean_ang_deg < best:
                best = vm.mean_ang_deg
                if ckpt is not None:
                    ad.save_checkpoint(ckpt, model.state_dict())
        else:
            record["val_ang_deg"] = None
            record["val_pog_cm"] = None
            if ckpt is not None:
                ad.save_checkpoint(ckpt, model.state_dict())
        record["wall_s"] = time.perf_counter() - t0
        history.append(record)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d: %s", epoch, record)
    return TrainResult(history, best, ckpt)
