"""Command-line entry point.

stdout carries machine-readable output (JSON lines or CSV); human-readable
diagnostics go to stderr. Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric
failure, 5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gradcheck_suite
from .config import MODEL_KEYS, RunConfig, describe_keys, load_config, parse_config
from .errors import CheckpointMismatch, ConfigError, FormatError, InvalidArgument, NumericFailure, ValidationError
from .geometry import pog_cm
from .model import ABLATIONS, STGaze
from .synth import DiskDataset, dataset_write, read_sequence
from .train import evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

# the four core-module variants, run in this order by --ablation all
ABLATION_MATRIX = ("full", "no_eca", "no_sam", "no_gru", "pool_pre_gru")

log = logging.getLogger("stgaze")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _config(path) -> RunConfig:
    if path is None:
        return parse_config("")
    try:
        return load_config(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None


def _manifest_path(data) -> Path:
    p = Path(data)
    if p.is_dir():
        found = sorted(p.glob("*.json"))
        if not found:
            raise CliError(f"no manifest in {p}", EXIT_IO)
        return found[0]
    if not p.exists():
        raise CliError(f"dataset not found: {p}", EXIT_IO)
    return p


def _dataset(data) -> DiskDataset:
    try:
        return DiskDataset(_manifest_path(data))
    except (ValidationError, FormatError, OSError, json.JSONDecodeError) as exc:
        raise CliError(str(exc), EXIT_IO) from None


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    if args.sequences < 1:
        raise CliError("sequences must be >= 1", EXIT_CONFIG)
    params = cfg.scene_params()
    try:
        manifest = dataset_write(args.out, args.sequences, cfg["T"], params, cfg["seed"], args.split)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO) from None
    root = Path(args.out)
    files = [root / f"{args.split}_{i:05d}.stgz" for i in range(args.sequences)]
    _emit({"sequences": args.sequences, "frames": args.sequences * cfg["T"],
           "bytes": sum(f.stat().st_size for f in files) + manifest.stat().st_size,
           "manifest": str(manifest),
           "sha256_of_manifest": hashlib.sha256(manifest.read_bytes()).hexdigest()})
    return EXIT_OK


def _train_one(cfg: RunConfig, ablation: str, data, val, out: Path, threads: int) -> dict:
    model_cfg = cfg.model_config().with_ablation(ablation)
    model = STGaze(model_cfg)
    tcfg = cfg.train_config(threads=threads)
    header = {"event": "start", "ablation": ablation, "use_eca": model_cfg.use_eca, "use_sam": model_cfg.use_sam,
              "use_gru": model_cfg.use_gru, "pool_before_gru": model_cfg.pool_before_gru,
              "parameters": model.num_parameters(), "epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
              "lr": tcfg.lr}
    _emit(header)
    out.mkdir(parents=True, exist_ok=True)
    model_text = cfg.to_text(MODEL_KEYS)
    for key, value in ABLATIONS[ablation].items():
        model_text += f"{key} = {'true' if value else 'false'}\n"
    (out / "model.cfg").write_text(model_text, encoding="utf-8")
    try:
        result = train(tcfg, data, model, val, out, on_epoch=_emit)
    except NumericFailure as exc:
        raise CliError(f"training halted: {exc}; last good checkpoint in {out}", EXIT_NUMERIC) from None
    final = result.history[-1]
    return {"ablation": ablation, "parameters": model.num_parameters(),
            "final_train_ang_deg": final["train_ang_deg"], "best_val_ang_deg": result.best_val_ang_deg,
            "checkpoint": str(result.checkpoint)}


def cmd_train(args) -> int:
    cfg = _config(args.config)
    data = _dataset(args.data)
    val = _dataset(args.val) if args.val else None
    if data.T != cfg["T"]:
        raise CliError(f"dataset has T={data.T} but config T={cfg['T']}", EXIT_CONFIG)
    out = Path(args.out)
    if args.ablation == "all":
        rows = [_train_one(cfg, name, data, val, out / name, args.threads) for name in ABLATION_MATRIX]
        _emit({"event": "ablation_table", "rows": rows})
    else:
        _emit({"event": "done", **_train_one(cfg, args.ablation, data, val, out, args.threads)})
    return EXIT_OK


def _load_model(checkpoint, config_path) -> tuple[STGaze, RunConfig]:
    ckpt = Path(checkpoint)
    if config_path is None and (ckpt.parent / "model.cfg").exists():
        config_path = ckpt.parent / "model.cfg"
    cfg = _config(config_path)
    model = STGaze(cfg.model_config())
    try:
        state = ad.load_checkpoint(ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_IO) from None
    except FormatError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    try:
        model.load_state_dict(state)
    except CheckpointMismatch as exc:
        raise CliError(f"checkpoint mismatch at parameter {exc.parameter}: {exc}", EXIT_CHECKPOINT) from None
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint, args.config)
    data = _dataset(args.data)
    m = evaluate(model, data, cfg.geometry(), cfg["eval_batch_size"])
    _emit(m.as_dict())
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = _load_model(args.checkpoint, args.config)
    try:
        sample = read_sequence(args.sequence_file)
    except (FormatError, OSError) as exc:
        raise CliError(str(exc), EXIT_IO) from None
    geom = cfg.geometry()
    # one pass over the whole file: the stream state carries from frame to frame
    with ad.no_grad():
        out = model(sample.eye_left[None], sample.eye_right[None], sample.face[None])
    angles = out.angles.data[0].astype(np.float64)
    lines = ["frame,pitch_deg,yaw_deg,pog_x_cm,pog_y_cm"]
    for t, (pitch, yaw) in enumerate(angles):
        try:
            px, py = pog_cm((pitch, yaw), geom, sample.origin.astype(np.float64))
        except Exception:
            px = py = math.nan
        lines.append(f"{t},{math.degrees(pitch):.6f},{math.degrees(yaw):.6f},{px:.6f},{py:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite.run_suite(args.scale, args.seeds)
    for r in results:
        _emit(r.as_dict())
    failed = [r.family for r in results if not r.passed]
    _emit({"families": len(results), "failed": failed, "passed": not failed})
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.family:<20} max_rel_err={r.max_rel_err:.2e} worst={r.worst_param}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stgaze", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Spatio-temporal gaze estimation: synthesis, training, evaluation, verification.",
        epilog="config keys (key = value, '#' comments):\n" + describe_keys())
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, required=True)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", default="full", choices=list(ABLATION_MATRIX) + ["all"])
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="per-frame predictions for one sequence file")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--sequence-file", required=True)
    r.add_argument("--config")
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer family")
    g.add_argument("--scale", choices=["tiny", "small"], default="tiny")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
