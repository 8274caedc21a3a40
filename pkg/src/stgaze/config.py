"""Plain-text ``key = value`` run configuration.

Lines are UTF-8; ``#`` starts a comment. Unknown keys and malformed values
raise ConfigError carrying the 1-based line number.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geometry import ScreenGeometry
from .losses import LossWeights
from .model import EncoderConfig, ModelConfig
from .synth import SceneParams
from .train import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("auto", "none", "") else int(s)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "auto"
    return str(v)


# key: (parser, default, description, source)
KEYS: dict[str, tuple] = {
    # model
    "eye_widths": (_ints, (16, 32, 64, 128), "eye encoder stage widths; last = eye channels", "published: 128x8x8 eye feature map"),
    "face_widths": (_ints, (8, 16, 24, 32), "face encoder stage widths; last = face channels", "published: 32x8x8 face feature map"),
    "input_size": (int, 128, "eye/face patch side in pixels", "published: 3x128x128 patches"),
    "eca_kernel": (_opt_int, None, "ECA 1-D kernel width (auto = from channel count)", "published: adaptive kernel"),
    "sam_blocks": (int, 3, "transformer blocks in the self-attention module", "published: 3 blocks"),
    "sam_heads": (int, 8, "attention heads", "published: 8 heads"),
    "ffn_hidden": (int, 512, "feed-forward width inside each transformer block", "published parameter counts"),
    "gru_hidden": (int, 160, "GRU hidden width", "published: 2x160 state"),
    "gru_layers": (int, 2, "GRU layers", "published: 2 layers"),
    "head_hidden": (int, 256, "regression MLP hidden width", "published parameter counts"),
    "use_eca": (_bool, True, "enable ECA channel attention", "published ablation"),
    "use_sam": (_bool, True, "enable the self-attention module", "published ablation"),
    "use_gru": (_bool, True, "enable the spatio-temporal GRU", "published ablation"),
    "pool_before_gru": (_bool, False, "mean-pool the patch sequence before the GRU", "published ablation"),
    "share_streams": (_bool, True, "left and right streams share parameters", ""),
    "model_seed": (int, 0, "parameter initialisation seed", ""),
    # training
    "epochs": (int, 4, "training epochs", "published training protocol"),
    "batch_size": (int, 6, "sequences per batch", "published training protocol"),
    "base_lr": (float, 1e-4, "base learning rate at batch 6 (scaled linearly)", "published training protocol"),
    "T": (int, 8, "frames per sequence", ""),
    "seed": (int, 0, "global seed (data and shuffling); env STGAZE_SEED overrides", ""),
    "augment_std_deg": (float, 3.0, "offset augmentation std, degrees", "published: 3 deg"),
    "clip_norm": (float, 10.0, "global gradient-norm clip (0 = off)", ""),
    "eval_batch_size": (int, 8, "sequences per evaluation batch", ""),
    "lambda_ang": (float, 1.0, "angular loss weight", "published training protocol"),
    "lambda_cm": (float, 0.01, "PoG cm loss weight", "published training protocol"),
    "lambda_px": (float, 0.0, "PoG px loss weight", "published loss; weight not reported"),
    # synthetic scene
    "gaze_range_deg": (float, 25.0, "max |pitch|, |yaw| of synthetic gaze", ""),
    "step_deg": (float, 2.0, "per-frame random-walk std, degrees", ""),
    "reversion": (float, 0.9, "random-walk mean-reversion factor", ""),
    "pupil_gain": (float, 50.0, "iris travel, px per radian", ""),
    "iris_radius": (float, 14.0, "iris radius, px", ""),
    "pupil_radius": (float, 5.0, "pupil radius, px", ""),
    "noise_std": (float, 0.02, "additive image noise std", ""),
    "head_pose_px": (float, 0.0, "face pose-marker offset, px", ""),
    "gaze_origin": (_floats, (0.0, 12.0, 60.0), "gaze origin in camera coordinates, cm", ""),
    # screen
    "screen_width_cm": (float, 60.0, "screen width, cm", ""),
    "screen_height_cm": (float, 33.75, "screen height, cm", ""),
    "screen_width_px": (int, 1920, "screen width, px", ""),
    "screen_height_px": (int, 1080, "screen height, px", ""),
    # paths
    "data_dir": (str, "", "dataset directory or manifest", ""),
    "val_data": (str, "", "validation manifest (optional)", ""),
    "out_dir": (str, "", "output directory", ""),
}

MODEL_KEYS = ("eye_widths", "face_widths", "input_size", "eca_kernel", "sam_blocks", "sam_heads", "ffn_hidden",
              "gru_hidden", "gru_layers", "head_hidden", "use_eca", "use_sam", "use_gru", "pool_before_gru",
              "share_streams", "model_seed")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str, line: int | None = None) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}", key, line)
        try:
            self.values[key] = KEYS[key][0](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key, line) from None

    def model_config(self) -> ModelConfig:
        v = self.values
        try:
            return ModelConfig(
                eye=EncoderConfig(v["eye_widths"], v["input_size"]),
                face=EncoderConfig(v["face_widths"], v["input_size"]),
                eca_kernel=v["eca_kernel"], sam_blocks=v["sam_blocks"], sam_heads=v["sam_heads"],
                ffn_hidden=v["ffn_hidden"], gru_hidden=v["gru_hidden"], gru_layers=v["gru_layers"],
                head_hidden=v["head_hidden"], use_eca=v["use_eca"], use_sam=v["use_sam"], use_gru=v["use_gru"],
                pool_before_gru=v["pool_before_gru"], share_streams=v["share_streams"], seed=v["model_seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def loss_weights(self) -> LossWeights:
        v = self.values
        try:
            return LossWeights(v["lambda_ang"], v["lambda_cm"], v["lambda_px"])
        except ValueError as exc:
            raise ConfigError(str(exc), "lambda_ang") from None

    def geometry(self) -> ScreenGeometry:
        v = self.values
        try:
            return ScreenGeometry(v["screen_width_cm"], v["screen_height_cm"], v["screen_width_px"],
                                  v["screen_height_px"], tuple(v["gaze_origin"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def scene_params(self) -> SceneParams:
        v = self.values
        if len(v["gaze_origin"]) != 3:
            raise ConfigError("gaze_origin needs three values", "gaze_origin")
        try:
            return SceneParams(seed=v["seed"], gaze_range_deg=v["gaze_range_deg"], step_deg=v["step_deg"],
                               reversion=v["reversion"], pupil_gain=v["pupil_gain"], iris_radius=v["iris_radius"],
                               pupil_radius=v["pupil_radius"], noise_std=v["noise_std"],
                               head_pose_px=v["head_pose_px"], gaze_origin=tuple(v["gaze_origin"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, threads: int = 1) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], base_lr=v["base_lr"],
                               weights=self.loss_weights(), T=v["T"], seed=v["seed"],
                               augment_std_deg=v["augment_std_deg"], clip_norm=v["clip_norm"],
                               eval_batch_size=v["eval_batch_size"], threads=threads, geometry=self.geometry())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self, keys=None) -> str:
        keys = keys or KEYS
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in keys)


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", None, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value, lineno)
    env = os.environ if env is None else env
    if env.get("STGAZE_SEED"):
        cfg.set("seed", env["STGAZE_SEED"])
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def describe_keys() -> str:
    """One line per key with its default and source, for --help."""
    lines = []
    for key, (_, default, desc, source) in KEYS.items():
        src = f" [{source}]" if source else ""
        lines.append(f"  {key} = {_fmt(default)}  {desc}{src}")
    return "\n".join(lines)
