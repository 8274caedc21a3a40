"""Training losses (angular + point-of-gaze) and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgument
from .geometry import ScreenGeometry, angles_to_vector, angles_to_vector_t, pog_cm_t



@dataclass(frozen=True)
class LossWeights:
    ang: float = 1.0
    cm: float = 0.01
    px: float = 0.0

    def __post_init__(self):
        if min(self.ang, self.cm, self.px) < 0:
            raise InvalidArgument("loss weights must be non-negative")
        if self.ang == self.cm == self.px == 0:
            raise InvalidArgument("at least one loss weight must be positive")


def _vectors(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    return angles_to_vector_t(x) if x.shape[-1] == 2 else x


def _cross(a: Tensor, b: Tensor) -> Tensor:
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def loss_angular(pred, truth) -> Tensor:
    """Per-frame angular error in degrees; ``pred``/``truth`` are (…×2) angles or (…×3) vectors."""
    vp = _vectors(pred)
    if isinstance(truth, Tensor):
        vt = _vectors(truth)
    else:
        truth = np.asarray(truth, dtype=np.float64)
        vt = Tensor(angles_to_vector(truth) if truth.shape[-1] == 2 else truth, dtype=vp.dtype)
    # atan2(|a x b|, a.b) equals arccos of the normalised dot product but is
    # exactly 0 at agreement and keeps a bounded gradient there
    return ad.arctan2(ad.vector_norm(_cross(vp, vt)), ad.tensor_sum(vp * vt, axis=-1)) * (180.0 / math.pi)


@dataclass
class PogLoss:
    cm: Tensor          # per-frame Euclidean PoG error, cm (0 where masked)
    px: Tensor          # per-frame Euclidean PoG error, px (0 where masked)
    valid: np.ndarray   # frames whose predicted and true rays both hit the screen

    @property
    def masked(self) -> int:
        return int(self.valid.size - self.valid.sum())


def loss_pog(pred, truth, origin, geom: ScreenGeometry) -> PogLoss:
    """PoG distance between predicted and true gaze rays from the labelled origin.

    Frames whose predicted ray misses the screen plane contribute zero and
    are reported through ``valid``.
    """
    vp = _vectors(pred)
    truth = np.asarray(truth, dtype=np.float64)
    vt = angles_to_vector(truth) if truth.shape[-1] == 2 else truth
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), vt.shape)
    p_pred, ok_pred = pog_cm_t(vp, origin, geom)
    p_true, ok_true = pog_cm_t(Tensor(vt, dtype=vp.dtype), origin, geom)
    valid = ok_pred & ok_true
    mask = valid.astype(vp.dtype)
    diff = (p_pred - p_true.data) * mask[..., None]
    scale = np.array(geom.px_per_cm, dtype=vp.dtype)
    return PogLoss(ad.vector_norm(diff), ad.vector_norm(diff * scale), valid)


def loss_total(ang: Tensor, cm: Tensor | None, px: Tensor | None, weights: LossWeights) -> Tensor:
    """Weighted sum of per-frame losses, averaged over every frame of every item."""
    total = ang * weights.ang
    if weights.cm and cm is not None:
        total = total + cm * weights.cm
    if weights.px and px is not None:
        total = total + px * weights.px
    return ad.mean(total)


def sequence_loss(pred_vectors: Tensor, truth: np.ndarray, origin: np.ndarray,
                  geom: ScreenGeometry, weights: LossWeights) -> tuple[Tensor, dict]:
    """Loss for N×T×3 predicted vectors against N×T×2 labels and N×3 origins."""
    ang = loss_angular(pred_vectors, truth)
    need_pog = weights.cm > 0 or weights.px > 0
    pog = loss_pog(pred_vectors, truth, origin[:, None, :], geom) if need_pog else None
    total = loss_total(ang, pog.cm if pog else None, pog.px if pog else None, weights)
    info = {"ang_deg": float(ang.data.mean()), "masked": pog.masked if pog else 0}
    return total, info


@dataclass(frozen=True)
class BatchMetrics:
    mean_ang_deg: float
    std_ang_deg: float
    mean_pog_cm: float
    mean_pog_px: float
    count: int
    pog_count: int

    @classmethod
    def from_errors(cls, ang_deg, pog_cm=None, pog_px=None) -> BatchMetrics:
        ang = np.asarray(ang_deg, dtype=np.float64).reshape(-1)
        if ang.size == 0:
            raise InvalidArgument("metrics need at least one frame")
        cm = np.asarray([] if pog_cm is None else pog_cm, dtype=np.float64).reshape(-1)
        px = np.asarray([] if pog_px is None else pog_px, dtype=np.float64).reshape(-1)
        return cls(float(ang.mean()), float(ang.std()),
                   float(cm.mean()) if cm.size else float("nan"),
                   float(px.mean()) if px.size else float("nan"),
                   int(ang.size), int(cm.size))

    def combine(self, other: BatchMetrics) -> BatchMetrics:
        """Count-weighted merge, equal to aggregating the concatenated frames."""
        n = self.count + other.count
        mean = (self.count * self.mean_ang_deg + other.count * other.mean_ang_deg) / n
        second = (self.count * (self.std_ang_deg ** 2 + self.mean_ang_deg ** 2)
                  + other.count * (other.std_ang_deg ** 2 + other.mean_ang_deg ** 2)) / n
        std = math.sqrt(max(second - mean * mean, 0.0))
        m = self.pog_count + other.pog_count

        def pog_mean(a, b):
            if m == 0:
                return float("nan")
            total = (a * self.pog_count if self.pog_count else 0.0) + (b * other.pog_count if other.pog_count else 0.0)
            return total / m

        return BatchMetrics(mean, std, pog_mean(self.mean_pog_cm, other.mean_pog_cm),
                            pog_mean(self.mean_pog_px, other.mean_pog_px), n, m)

    def as_dict(self) -> dict:
        return {"mean_ang_deg": self.mean_ang_deg, "std_ang_deg": self.std_ang_deg,
                "mean_pog_cm": self.mean_pog_cm, "mean_pog_px": self.mean_pog_px,
                "count": self.count, "pog_count": self.pog_count}
