"""Deterministic synthetic gaze videos and their on-disk format.

Eye patches are schematic: a gray background, a bright sclera ellipse, a
dark iris disc displaced by ``gain * sin(angle)`` pixels and a darker pupil.
Shapes are drawn with one-pixel soft edges so sub-pixel iris motion shows
up in the intensities. Pixel (i, j) covers [j, j+1) × [i, i+1) in image
coordinates, so the patch centre sits at (64, 64) and a horizontal flip is
an exact mirror about it.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, ValidationError

IMAGE_SIZE = 128
SEQUENCE_MAGIC = b"STGZ"
SEQUENCE_VERSION = 1
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    gaze_range_deg: float = 25.0
    step_deg: float = 2.0
    reversion: float = 0.9
    pupil_gain: float = 50.0          # px per radian
    iris_radius: float = 14.0
    pupil_radius: float = 5.0
    sclera_axes: tuple[float, float] = (44.0, 26.0)
    background_level: float = 0.45
    sclera_level: float = 0.9
    iris_level: float = 0.3
    pupil_level: float = 0.05
    skin_level: float = 0.6
    noise_std: float = 0.02
    head_pose_px: float = 0.0         # horizontal offset of the face's pose marker
    gaze_origin: tuple[float, float, float] = (0.0, 12.0, 60.0)

    def __post_init__(self):
        if not 0 < self.gaze_range_deg < 90:
            raise InvalidArgument("gaze range must lie in (0, 90) degrees")
        reach = self.pupil_gain * math.sin(math.radians(self.gaze_range_deg)) + self.iris_radius
        if reach >= IMAGE_SIZE / 2:
            raise InvalidArgument("iris leaves the patch at the extreme of the gaze range")

    @property
    def gaze_range(self) -> float:
        return math.radians(self.gaze_range_deg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneParams:
        d = dict(d)
        for key in ("sclera_axes", "gaze_origin"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SequenceSample:
    eye_left: np.ndarray    # T×3×S×S float32 in [0, 1]
    eye_right: np.ndarray
    face: np.ndarray
    labels: np.ndarray      # T×2 float32 (pitch, yaw) radians
    origin: np.ndarray      # 3 float32, cm
    sequence_id: int = 0
    seed: int = 0

    @property
    def T(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# rendering

def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float64) + 0.5
    return c[None, :], c[:, None]


def _disc(x, y, cx, cy, r) -> np.ndarray:
    return np.clip(r - np.hypot(x - cx, y - cy) + 0.5, 0.0, 1.0)


def _ellipse(x, y, cx, cy, a, b) -> np.ndarray:
    # soft edge of roughly one pixel measured along the minor axis
    d = np.sqrt(((x - cx) / a) ** 2 + ((y - cy) / b) ** 2)
    return np.clip((1.0 - d) * min(a, b) + 0.5, 0.0, 1.0)


def _eye_gray(pitch: float, yaw: float, p: SceneParams, size: int = IMAGE_SIZE) -> np.ndarray:
    """Noise-free left-eye patch at gaze (pitch, yaw), rendered at ``size`` px."""
    scale = size / IMAGE_SIZE
    x, y = _coords(size)
    c = size / 2
    img = np.full((size, size), p.background_level)
    sclera = _ellipse(x, y, c, c, p.sclera_axes[0] * scale, p.sclera_axes[1] * scale)
    img += (p.sclera_level - img) * sclera
    # caruncle marks the inner corner, breaking left/right symmetry of one eye
    car = _disc(x, y, c - (p.sclera_axes[0] - 4) * scale, c, 4 * scale)
    img += (p.iris_level + 0.2 - img) * car * sclera
    cx = c + p.pupil_gain * math.sin(yaw) * scale
    cy = c - p.pupil_gain * math.sin(pitch) * scale
    img += (p.iris_level - img) * _disc(x, y, cx, cy, p.iris_radius * scale)
    img += (p.pupil_level - img) * _disc(x, y, cx, cy, p.pupil_radius * scale)
    return img


def _eye_side(pitch: float, yaw: float, side: str, p: SceneParams, size: int = IMAGE_SIZE) -> np.ndarray:
    if side == "left":
        return _eye_gray(pitch, yaw, p, size)
    if side == "right":
        # a right eye is the mirror image of a left eye looking the other way
        return _eye_gray(pitch, -yaw, p, size)[:, ::-1]
    raise InvalidArgument(f"side must be 'left' or 'right', got {side!r}")


def _finish(gray: np.ndarray, noise_std: float, rng: np.random.Generator | None) -> np.ndarray:
    if noise_std > 0 and rng is not None:
        gray = gray + rng.normal(0.0, noise_std, size=gray.shape)
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    return np.repeat(gray[None], 3, axis=0)


def _noise_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *key]))


def render_eye(gaze, side: str, params: SceneParams, seed: int | None = None,
               key: tuple[int, ...] = ()) -> np.ndarray:
    """3×128×128 eye patch for (pitch, yaw) radians; noise is seeded by (seed, side, key)."""
    pitch, yaw = float(gaze[0]), float(gaze[1])
    gray = _eye_side(pitch, yaw, side, params)
    rng = _noise_rng(params.seed if seed is None else seed, 0 if side == "left" else 1, *key)
    return _finish(gray, params.noise_std, rng)


def render_face(gaze, params: SceneParams, seed: int | None = None, key: tuple[int, ...] = ()) -> np.ndarray:
    """Schematic 3×128×128 face with both eyes at quarter scale and a head-pose marker."""
    pitch, yaw = float(gaze[0]), float(gaze[1])
    size = IMAGE_SIZE
    x, y = _coords(size)
    img = np.full((size, size), 0.2)
    img += (params.skin_level - img) * _ellipse(x, y, 64, 66, 50, 60)
    eye = size // 4
    # the subject's left eye appears on the image's right
    for side, x0 in (("right", 24), ("left", 72)):
        patch = _eye_side(pitch, yaw, side, params, size=eye)
        img[36:36 + eye, x0:x0 + eye] = patch
    nose_x = 64 + params.head_pose_px
    img += (0.35 - img) * np.clip(2.5 - np.abs(x - nose_x) + 0.5, 0, 1) * ((y > 70) & (y < 92))
    img += (0.3 - img) * np.clip(2.0 - np.abs(y - 104) + 0.5, 0, 1) * (np.abs(x - 64) < 16)
    rng = _noise_rng(params.seed if seed is None else seed, 2, *key)
    return _finish(img, params.noise_std, rng)


# ---------------------------------------------------------------------------
# sequences

def sequence_seed(global_seed: int, index: int) -> int:
    """Per-sequence seed; depends only on (global seed, index)."""
    return int(np.random.SeedSequence([global_seed & 0xFFFFFFFF, index]).generate_state(1)[0])


def gaze_trajectory(T: int, params: SceneParams, rng: np.random.Generator, start=None) -> np.ndarray:
    """Mean-reverting random walk g_{t+1} = clip(reversion·g_t + noise), T×2 radians."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    lim = params.gaze_range
    g = np.empty((T, 2))
    g[0] = rng.uniform(-lim, lim, size=2) if start is None else np.clip(np.asarray(start, dtype=np.float64), -lim, lim)
    step = math.radians(params.step_deg)
    for t in range(1, T):
        g[t] = np.clip(params.reversion * g[t - 1] + rng.normal(0.0, step, size=2) * (step > 0), -lim, lim)
    return g


def gen_sequence(T: int, params: SceneParams, seed: int, sequence_id: int = 0, start=None) -> SequenceSample:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xA11CE]))
    labels = gaze_trajectory(T, params, rng, start).astype(np.float32)
    el = np.empty((T, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    er, fc = np.empty_like(el), np.empty_like(el)
    for t in range(T):
        g = labels[t].astype(np.float64)
        el[t] = render_eye(g, "left", params, seed, key=(t,))
        er[t] = render_eye(g, "right", params, seed, key=(t,))
        fc[t] = render_face(g, params, seed, key=(t,))
    return SequenceSample(el, er, fc, labels, np.asarray(params.gaze_origin, dtype=np.float32), sequence_id, seed)


def offset_augment(sample: SequenceSample, rng: np.random.Generator, std_deg: float = 3.0) -> SequenceSample:
    """Add one Gaussian (pitch, yaw) offset to every label of the sequence; images are untouched."""
    if std_deg == 0:
        return sample
    delta = rng.normal(0.0, math.radians(std_deg), size=2)
    return replace(sample, labels=(sample.labels + delta).astype(np.float32))


def pupil_centroid(image: np.ndarray, params: SceneParams) -> tuple[float, float]:
    """Darkness-weighted centroid of the pupil disc of a noise-free eye patch (image coords)."""
    gray = np.asarray(image, dtype=np.float64)
    gray = gray[0] if gray.ndim == 3 else gray
    w = np.clip(params.iris_level - gray, 0.0, None)
    x, y = _coords(gray.shape[0])
    total = w.sum()
    return float((w * x).sum() / total), float((w * y).sum() / total)


def centroid_gaze(image: np.ndarray, params: SceneParams) -> tuple[float, float]:
    """Recover (pitch, yaw) of a noise-free left-eye patch from its pupil centroid."""
    cx, cy = pupil_centroid(image, params)
    c = image.shape[-1] / 2
    yaw = math.asin(np.clip((cx - c) / params.pupil_gain, -1, 1))
    pitch = math.asin(np.clip((c - cy) / params.pupil_gain, -1, 1))
    return pitch, yaw


# ---------------------------------------------------------------------------
# datasets

class SyntheticDataset:
    """Sequences rendered on demand; item i always has seed sequence_seed(seed, i)."""

    def __init__(self, n: int, T: int, params: SceneParams, seed: int = 0):
        if n < 1:
            raise InvalidArgument("sequences must be >= 1")
        self.n, self.T, self.params, self.seed = n, T, params, seed

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> SequenceSample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        return gen_sequence(self.T, self.params, sequence_seed(self.seed, i), sequence_id=i)


def write_sequence(path, sample: SequenceSample) -> None:
    for name in ("eye_left", "eye_right", "face"):
        if getattr(sample, name).shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise InvalidArgument(f"{name} must be T×3×{IMAGE_SIZE}×{IMAGE_SIZE}")
    T = sample.T
    frames = np.stack([sample.eye_left, sample.eye_right, sample.face], axis=1)
    parts = [SEQUENCE_MAGIC, struct.pack("<II", SEQUENCE_VERSION, T),
             np.ascontiguousarray(frames, dtype="<f4").tobytes(),
             np.ascontiguousarray(sample.labels, dtype="<f4").tobytes(),
             np.ascontiguousarray(sample.origin, dtype="<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_sequence(path, sequence_id: int = 0, seed: int = 0) -> SequenceSample:
    buf = Path(path).read_bytes()
    if buf[:4] != SEQUENCE_MAGIC:
        raise FormatError(f"{path}: bad magic", 0)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header", len(buf))
    version, T = struct.unpack_from("<II", buf, 4)
    if version != SEQUENCE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if T < 1:
        raise FormatError(f"{path}: frame count must be >= 1", 8)
    img = 3 * IMAGE_SIZE * IMAGE_SIZE
    frame_bytes = T * 3 * img * 4
    expected = 12 + frame_bytes + T * 8 + 12
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated, expected {expected} bytes", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: trailing bytes", expected)
    frames = np.frombuffer(buf, dtype="<f4", count=T * 3 * img, offset=12)
    frames = frames.reshape(T, 3, 3, IMAGE_SIZE, IMAGE_SIZE).astype(np.float32)
    labels = np.frombuffer(buf, dtype="<f4", count=2 * T, offset=12 + frame_bytes).reshape(T, 2).astype(np.float32)
    origin = np.frombuffer(buf, dtype="<f4", count=3, offset=12 + frame_bytes + 8 * T).astype(np.float32)
    return SequenceSample(frames[:, 0].copy(), frames[:, 1].copy(), frames[:, 2].copy(),
                          labels, origin, sequence_id, seed)


@dataclass
class DatasetManifest:
    split: str
    T: int
    params: SceneParams
    seed: int
    files: list[str] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "split": self.split, "params": self.params.to_dict(),
                           "seed": self.seed, "files": self.files, "T": self.T}, indent=2, sort_keys=True)


def dataset_write(root, n: int, T: int, params: SceneParams, seed: int, split: str = "train") -> Path:
    """Render n sequences into ``root`` and write ``<split>.json``; returns the manifest path."""
    if n < 1:
        raise InvalidArgument("sequences must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(n):
        name = f"{split}_{i:05d}.stgz"
        write_sequence(root / name, gen_sequence(T, params, sequence_seed(seed, i), sequence_id=i))
        files.append(name)
    manifest = DatasetManifest(split, T, params, seed, files)
    path = root / f"{split}.json"
    path.write_text(manifest.to_json(), encoding="utf-8")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    d = json.loads(path.read_text(encoding="utf-8"))
    missing = {"version", "split", "params", "seed", "files", "T"} - set(d)
    if missing:
        raise ValidationError(f"{path}: manifest lacks keys {sorted(missing)}")
    if d["version"] != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {d['version']}")
    absent = [f for f in d["files"] if not (path.parent / f).is_file()]
    if absent:
        raise ValidationError(f"{path}: missing sequence files: {', '.join(absent)}")
    return DatasetManifest(d["split"], int(d["T"]), SceneParams.from_dict(d["params"]), int(d["seed"]), list(d["files"]))


class DiskDataset:
    """Sequences listed by a manifest, read lazily from disk."""

    def __init__(self, manifest_path):
        self.path = Path(manifest_path)
        self.manifest = read_manifest(self.path)
        self.T = self.manifest.T
        self.params = self.manifest.params

    def __len__(self) -> int:
        return len(self.manifest.files)

    def __getitem__(self, i: int) -> SequenceSample:
        m = self.manifest
        sample = read_sequence(self.path.parent / m.files[i], sequence_id=i, seed=sequence_seed(m.seed, i))
        if sample.T != m.T:
            raise ValidationError(f"{m.files[i]}: has {sample.T} frames, manifest says {m.T}")
        return sample


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
