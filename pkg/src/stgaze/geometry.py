"""Gaze angle/vector conventions, angular error and point-of-gaze projection.

Camera coordinates: x right, y down, z forward (away from the camera). A
subject facing the screen looks along -z. Pitch is positive looking up,
yaw positive toward camera +x. The screen lies in the plane z = 0 with the
camera at the middle of its top edge; screen coordinates start at the
top-left corner, x to the right and y downward.

Functions taking numpy arrays work on any leading shape; the ``*_t``
variants take autodiff tensors so the losses can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgument, NoIntersection


@dataclass(frozen=True)
class ScreenGeometry:
    width_cm: float = 60.0
    height_cm: float = 33.75
    width_px: int = 1920
    height_px: int = 1080
    gaze_origin: tuple[float, float, float] = (0.0, 12.0, 60.0)

    def __post_init__(self):
        if min(self.width_cm, self.height_cm, self.width_px, self.height_px) <= 0:
            raise InvalidArgument("screen size and resolution must be positive")

    @property
    def px_per_cm(self) -> tuple[float, float]:
        return self.width_px / self.width_cm, self.height_px / self.height_cm


def angles_to_vector(angles) -> np.ndarray:
    """(..., 2) pitch/yaw in radians -> (..., 3) unit gaze vectors."""
    angles = np.asarray(angles, dtype=np.float64)
    pitch, yaw = angles[..., 0], angles[..., 1]
    cp = np.cos(pitch)
    return np.stack([cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def vector_to_angles(vectors) -> np.ndarray:
    """(..., 3) gaze vectors -> (..., 2) pitch/yaw; vectors are normalised first.

    When cos(pitch) is ~0 the yaw comes from atan2 of near-zero values and
    is arbitrary but finite.
    """
    v = np.asarray(vectors, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    pitch = -np.arcsin(np.clip(v[..., 1], -1.0, 1.0))
    yaw = np.arctan2(v[..., 0], -v[..., 2])
    return np.stack([pitch, yaw], axis=-1)


def _as_vectors(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 2:
        return angles_to_vector(x)
    if x.shape[-1] == 3:
        return x
    raise InvalidArgument(f"expected (..., 2) angles or (..., 3) vectors, got shape {x.shape}")


def angular_error_deg(a, b) -> np.ndarray:
    """Angle between two gaze directions in degrees (angles or vectors accepted)."""
    va, vb = _as_vectors(a), _as_vectors(b)
    na = np.linalg.norm(va, axis=-1)
    nb = np.linalg.norm(vb, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidArgument("angular error of a zero-length vector")
    cos = np.clip((va * vb).sum(axis=-1) / (na * nb), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def pog_cm(gaze, geom: ScreenGeometry, origin=None) -> np.ndarray:
    """Screen intersection of the gaze ray, in cm from the screen's top-left corner."""
    g = _as_vectors(gaze)
    o = np.asarray(geom.gaze_origin if origin is None else origin, dtype=np.float64)
    o = np.broadcast_to(o, g.shape)
    gz, oz = g[..., 2], o[..., 2]
    if np.any(gz * oz >= 0):
        raise NoIntersection("gaze ray is parallel to or points away from the screen plane")
    s = -oz / gz
    hit = o + s[..., None] * g
    return np.stack([hit[..., 0] + geom.width_cm / 2.0, hit[..., 1]], axis=-1)


def pog_px(p_cm, geom: ScreenGeometry) -> np.ndarray:
    """Scale screen cm to pixels; off-screen points are returned unclamped."""
    sx, sy = geom.px_per_cm
    return np.asarray(p_cm, dtype=np.float64) * np.array([sx, sy])


# ---------------------------------------------------------------------------
# differentiable versions

def angles_to_vector_t(angles: Tensor) -> Tensor:
    pitch, yaw = angles[..., 0], angles[..., 1]
    cp = ad.cos(pitch)
    return ad.stack([cp * ad.sin(yaw), -ad.sin(pitch), -(cp * ad.cos(yaw))], axis=-1)


def vector_to_angles_t(v: Tensor) -> Tensor:
    """Inverse of angles_to_vector_t for unit vectors with |pitch| < pi/2."""
    pitch = -ad.arcsin(v[..., 1])
    yaw = ad.arctan2(v[..., 0], -v[..., 2])
    return ad.stack([pitch, yaw], axis=-1)


def pog_cm_t(g: Tensor, origin: np.ndarray, geom: ScreenGeometry) -> tuple[Tensor, np.ndarray]:
    """Differentiable PoG for (..., 3) gaze vectors and matching origins.

    Returns the (..., 2) PoG in cm and a boolean mask of rays that hit the
    screen; masked-out entries are computed with a dummy direction and are
    meant to be discarded by the caller.
    """
    origin = np.broadcast_to(np.asarray(origin, dtype=g.dtype), g.shape)
    gz = g[..., 2]
    valid = gz.data * origin[..., 2] < 0
    safe_gz = ad.add(ad.mul(gz, valid.astype(g.dtype)), np.where(valid, 0.0, -1.0).astype(g.dtype))
    s = ad.div(Tensor(-origin[..., 2], dtype=g.dtype), safe_gz)
    x = s * g[..., 0] + (origin[..., 0] + geom.width_cm / 2.0)
    y = s * g[..., 1] + origin[..., 1]
    return ad.stack([x, y], axis=-1), valid
