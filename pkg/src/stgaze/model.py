"""The ST-Gaze network: eye/face encoders, ECA fusion, self-attention,
spatio-temporal GRU recurrence and the gaze regression head.

Tensors carry a leading item axis. A "stream" item is one eye plus the face
of the same frame; the right eye enters mirrored and its yaw is negated on
the way out, so both eyes can share one set of stream parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgument, NumericFailure
from .geometry import angles_to_vector_t, vector_to_angles_t
from .layers import ECA, Encoder, GRUStack, GruStackConfig, Linear, Module, TransformerBlock


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...]
    input_size: int = 128

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def grid(self) -> int:
        return self.input_size // 2 ** len(self.widths)


@dataclass(frozen=True)
class ModelConfig:
    eye: EncoderConfig = field(default_factory=lambda: EncoderConfig((16, 32, 64, 128)))
    face: EncoderConfig = field(default_factory=lambda: EncoderConfig((8, 16, 24, 32)))
    eca_kernel: int | None = None
    sam_blocks: int = 3
    sam_heads: int = 8
    ffn_hidden: int = 512
    gru_hidden: int = 160
    gru_layers: int = 2
    head_hidden: int = 256
    use_eca: bool = True
    use_sam: bool = True
    use_gru: bool = True
    pool_before_gru: bool = False
    share_streams: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.eye.grid != self.face.grid or self.eye.input_size != self.face.input_size:
            raise InvalidArgument("eye and face encoders must produce the same grid")
        if self.eye.grid < 1:
            raise InvalidArgument("encoder has too many stages for its input size")
        if not self.use_gru and self.pool_before_gru:
            raise InvalidArgument("use_gru=false and pool_before_gru=true are mutually exclusive")
        if self.dim % self.sam_heads:
            raise InvalidArgument(f"fused width {self.dim} not divisible by {self.sam_heads} heads")

    @property
    def dim(self) -> int:
        """Fused channel count, also the token width of the attention stage."""
        return self.eye.out_channels + self.face.out_channels

    @property
    def grid(self) -> int:
        return self.eye.grid

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid

    def with_ablation(self, name: str) -> ModelConfig:
        return replace(self, **ABLATIONS[name])


def tiny_config(seed: int = 0) -> ModelConfig:
    """Desk-scale network: eye C=32, face C=8, D=40, 4 heads, 2 blocks, GRU hidden 40."""
    return ModelConfig(eye=EncoderConfig((8, 16, 32, 32)), face=EncoderConfig((4, 8, 8, 8)), sam_blocks=2,
                       sam_heads=4, ffn_hidden=128, gru_hidden=40, head_hidden=64, seed=seed)


# the four core-module variants of the ablation study
ABLATIONS = {
    "full": {},
    "no_eca": {"use_eca": False},
    "no_sam": {"use_sam": False},
    "no_gru": {"use_gru": False},
    "pool_pre_gru": {"pool_before_gru": True},
}


@dataclass
class StreamState:
    """Hidden state of the GRU stack carried between frames, N×layers×hidden."""

    hidden: Tensor

    @classmethod
    def zeros(cls, n: int, cfg: ModelConfig) -> StreamState:
        return cls(Tensor(np.zeros((n, cfg.gru_layers, cfg.gru_hidden))))


@dataclass
class ModelOutput:
    angles: Tensor          # N×T×2 final (pitch, yaw)
    vectors: Tensor         # N×T×3 unit gaze vectors of the final prediction
    left: Tensor            # N×T×2 left-stream prediction
    right: Tensor           # N×T×2 right-stream prediction, un-mirrored
    states: tuple[StreamState, StreamState]


def patchify(x: Tensor) -> Tensor:
    """N×C×G×G -> N×(G·G)×C in raster order (index = row·G + col)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def unpatchify(y: Tensor, grid: int) -> Tensor:
    n, s, c = y.shape
    return y.transpose(0, 2, 1).reshape(n, c, grid, grid)


def _expect(t: Tensor, shape: tuple[int, ...], stage: str) -> None:
    if t.shape[1:] != shape:
        raise AssertionError(f"shape ledger violated at {stage}: got {t.shape[1:]}, expected {shape}")


class RegressionHead(Module):
    """Mean-pool over positions -> Linear -> swish -> Linear -> tanh -> ×π/2."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, 2, rng)

    def forward(self, z: Tensor) -> Tensor:
        pooled = ad.mean(z, axis=-2)
        return ad.tanh(self.fc2(ad.swish(self.fc1(pooled)))) * (math.pi / 2)


class GazeStream(Module):
    """Parameters of one eye-face stream."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.eye_encoder = Encoder(cfg.eye.widths, rng)
        self.face_encoder = Encoder(cfg.face.widths, rng)
        self.eca = ECA(cfg.dim, rng, cfg.eca_kernel) if cfg.use_eca else None
        if cfg.use_sam:
            self.pos_embedding = ad.Parameter(rng.normal(0.0, 0.02, size=(cfg.seq_len, cfg.dim)))
            self.blocks = [TransformerBlock(cfg.dim, cfg.sam_heads, cfg.ffn_hidden, rng)
                           for _ in range(cfg.sam_blocks)]
        else:
            self.pos_embedding = None
            self.blocks = []
        self.gru = GRUStack(GruStackConfig(cfg.dim, cfg.gru_hidden, cfg.gru_layers), rng) if cfg.use_gru else None
        self.head = RegressionHead(cfg.gru_hidden if cfg.use_gru else cfg.dim, cfg.head_hidden, rng)
        self.shape_log: dict[str, tuple[int, ...]] = {}

    # -- per-frame stages (leading axis = frames of any streams) ------------

    def encode_eye(self, images: Tensor) -> Tensor:
        c = self.cfg
        _expect(images, (3, c.eye.input_size, c.eye.input_size), "eye input")
        out = self.eye_encoder(images)
        _expect(out, (c.eye.out_channels, c.grid, c.grid), "eye features")
        self.shape_log["eye_input"] = images.shape[1:]
        self.shape_log["eye_features"] = out.shape[1:]
        return out

    def encode_face(self, images: Tensor) -> Tensor:
        c = self.cfg
        _expect(images, (3, c.face.input_size, c.face.input_size), "face input")
        out = self.face_encoder(images)
        _expect(out, (c.face.out_channels, c.grid, c.grid), "face features")
        self.shape_log["face_features"] = out.shape[1:]
        return out

    def fuse(self, eye: Tensor, face: Tensor) -> Tensor:
        if eye.shape[2:] != face.shape[2:]:
            raise InvalidArgument(f"feature grids differ: {eye.shape[2:]} vs {face.shape[2:]}")
        x = ad.concat([eye, face], axis=1)
        if self.eca is not None:
            x = self.eca(x)
        _expect(x, (self.cfg.dim, self.cfg.grid, self.cfg.grid), "fused features")
        self.shape_log["fused"] = x.shape[1:]
        return x

    def attend(self, fused: Tensor) -> Tensor:
        y = patchify(fused)
        if self.pos_embedding is not None:
            y = y + self.pos_embedding
            for block in self.blocks:
                y = block(y)
        _expect(y, (self.cfg.seq_len, self.cfg.dim), "attention output")
        self.shape_log["sam_output"] = y.shape[1:]
        return y

    def st_recurrence(self, y: Tensor, state: StreamState) -> tuple[Tensor, StreamState]:
        """Scan one frame's patch sequence from ``state``; returns (Z, state after the last patch)."""
        z, h = self.gru(y, state.hidden)
        return z, StreamState(h)

    # -- sequence level ------------------------------------------------------

    def temporal(self, y: Tensor, state: StreamState) -> tuple[Tensor, StreamState]:
        """y: N×T×S×D per-frame sequences -> Z: N×T×S'×H', threading the state across frames."""
        n, t = y.shape[:2]
        if self.gru is None:
            return y, state
        if self.cfg.pool_before_gru:
            y = ad.mean(y, axis=2, keepdims=True)
        zs = []
        for i in range(t):
            z, state = self.st_recurrence(y[:, i], state)
            zs.append(z)
        z = ad.stack(zs, axis=1)
        self.shape_log["recurrence_output"] = z.shape[2:]
        return z, state

    def frame_features(self, eyes: Tensor, faces: Tensor | None = None,
                       face_features: Tensor | None = None) -> Tensor:
        """Flat frames (M×3×S×S) -> token sequences M×seq_len×dim."""
        e = self.encode_eye(eyes)
        f = self.encode_face(faces) if face_features is None else face_features
        return self.attend(self.fuse(e, f))

    def forward(self, eyes, faces, state: StreamState | None = None) -> tuple[Tensor, StreamState]:
        """Single stream over N×T×3×S×S eyes and faces -> (N×T×2 angles, final state)."""
        eyes, faces = _lift_images(eyes), _lift_images(faces)
        n, t = eyes.shape[:2]
        if t < 1:
            raise InvalidArgument("sequence needs at least one frame")
        if state is None:
            state = StreamState.zeros(n, self.cfg)
        y = self.frame_features(_flat(eyes), _flat(faces))
        y = y.reshape((n, t) + y.shape[1:])
        z, state = self.temporal(y, state)
        return self.head(z), state


def _lift_images(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _flat(x: Tensor) -> Tensor:
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


# below this the averaged vector's direction is rounding noise
_ANTIPODAL_TOL = 1e-9


def average_gaze(left: Tensor, right: Tensor) -> tuple[Tensor, Tensor]:
    """Average two (…×2) angle predictions as unit vectors; returns (angles, vectors)."""
    m = (angles_to_vector_t(left) + angles_to_vector_t(right)) * 0.5
    norm = ad.sqrt(ad.tensor_sum(m * m, axis=-1, keepdims=True))
    if np.any(norm.data < _ANTIPODAL_TOL):
        raise NumericFailure("left and right predictions are antipodal; their average is undefined")
    v = m / norm
    return vector_to_angles_t(v), v


_UNFLIP = np.array([1.0, -1.0])


class STGaze(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.stream = GazeStream(self.cfg, rng)
        self.right_stream = self.stream if self.cfg.share_streams else GazeStream(self.cfg, rng)
        self.assign_names()

    def zero_states(self, n: int) -> tuple[StreamState, StreamState]:
        return StreamState.zeros(n, self.cfg), StreamState.zeros(n, self.cfg)

    def forward(self, eye_left, eye_right, face,
                states: tuple[StreamState, StreamState] | None = None) -> ModelOutput:
        """All inputs N×T×3×S×S. Right eyes are mirrored before encoding and
        the right-stream yaw negated afterwards."""
        eye_left, eye_right, face = _lift_images(eye_left), _lift_images(eye_right), _lift_images(face)
        n, t = eye_left.shape[:2]
        if t < 1:
            raise InvalidArgument("sequence needs at least one frame")
        if eye_right.shape != eye_left.shape:
            raise InvalidArgument("left and right eye inputs differ in shape")
        if states is None:
            states = self.zero_states(n)
        flipped = ad.hflip(eye_right)
        if self.right_stream is self.stream:
            s = self.stream
            # one pass over both eyes; the face is encoded once and reused
            f = s.encode_face(_flat(face))
            eyes = ad.concat([_flat(eye_left), _flat(flipped)], axis=0)
            y = s.frame_features(eyes, face_features=ad.concat([f, f], axis=0))
            y = y.reshape((2 * n, t) + y.shape[1:])
            state0 = StreamState(ad.concat([states[0].hidden, states[1].hidden], axis=0))
            z, state = s.temporal(y, state0)
            pred = s.head(z)
            left, right_m = pred[:n], pred[n:]
            new_states = (StreamState(state.hidden[:n]), StreamState(state.hidden[n:]))
        else:
            left, sl = self.stream(eye_left, face, states[0])
            right_m, sr = self.right_stream(flipped, face, states[1])
            new_states = (sl, sr)
        right = right_m * _UNFLIP
        angles, vectors = average_gaze(left, right)
        return ModelOutput(angles, vectors, left, right, new_states)
