# app/main.py - Command-line entry point
import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch
from pydantic import ValidationError

from app.config import TrainConfig, settings
from app.rasterizer import render
from app.scene import SceneSpec, generate_synthetic_scene, load_dataset, load_pose_sequence, \
    orbit_cameras, save_dataset, to_uint8, write_png
from app.training import evaluate, load_training_state, render_frame, run_steps, start_stage2, \
    train_stage1, train_stage2
from app.utils import AvatarError, ConfigError, configure_logging, configure_torch, get_dtype

logger = logging.getLogger(__name__)

ABLATION_FLAGS = {
    "no_hand_mlp": "use_hand_mlp",
    "no_interaction_mlp": "use_interaction_mlp",
    "no_pbd": "use_pbd",
    "no_patch_loss": "use_patch_loss",
}


# ================================
# HELPERS
# ================================

def _parse_indices(text: Optional[str], count: int, what: str) -> List[int]:
    """'0,3,5' or None for all"""
    if text is None:
        return list(range(count))
    try:
        indices = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list: {text}")
    for i in indices:
        if not 0 <= i < count:
            raise ConfigError(f"{what} {i} out of range (0..{count - 1})")
    return indices


def _ablations(args) -> dict:
    return {field: False for flag, field in ABLATION_FLAGS.items() if getattr(args, flag, False)}


def _load_config(args) -> TrainConfig:
    try:
        config = TrainConfig.from_file(args.config) if args.config else TrainConfig.preset(args.preset)
        overrides = _ablations(args)
        if args.stage1_steps is not None:
            overrides["stage1_steps"] = args.stage1_steps
        if args.stage2_steps is not None:
            overrides["stage2_steps"] = args.stage2_steps
        if args.seed is not None:
            overrides["seed"] = args.seed
        return TrainConfig.model_validate({**config.model_dump(), **overrides})
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config: {e}")
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}")


def _load_avatar(args):
    state = load_training_state(args.checkpoint)
    overrides = _ablations(args)
    if overrides:
        state.avatar.config = state.avatar.config.model_copy(update=overrides)
    return state.avatar


# ================================
# COMMANDS
# ================================

def cmd_gen_scene(args) -> int:
    spec = SceneSpec.from_file(args.spec) if args.spec else SceneSpec()
    dataset = generate_synthetic_scene(spec)
    save_dataset(dataset, args.out)
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.to_file(out / "config.json")

    if args.resume:
        state = load_training_state(args.resume, config)
        logger.info(f"🔁 Resuming stage {state.stage} at step {state.step}")
        if state.stage == 1 and state.step < state.config.stage1_steps:
            run_steps(state, dataset, state.config.stage1_steps - state.step, out, progress=True)
    else:
        state = train_stage1(dataset, config, out, dtype=get_dtype(), progress=True)

    if state.stage == 1:
        start_stage2(state)
    train_stage2(state, dataset, out, progress=True)
    logger.info(f"✅ Training finished; checkpoint in {out / 'stage2'}")
    return 0


def cmd_render(args) -> int:
    avatar = _load_avatar(args)
    dataset = load_dataset(args.dataset)
    frames = _parse_indices(args.frames, len(dataset.frames), "frame")
    views = _parse_indices(args.views, dataset.num_views, "view")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in frames:
        for v in views:
            image = render_frame(avatar, dataset, k, v, dynamics=not args.no_dynamics)
            write_png(out / f"{k}_{v}.png", to_uint8(image))
    logger.info(f"🖼️ Rendered {len(frames) * len(views)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    avatar = _load_avatar(args)
    dataset = load_dataset(args.dataset)
    holdout = args.holdout_view if args.holdout_view is not None else avatar.config.holdout_view
    rows, summary = evaluate(avatar, dataset, holdout, dynamics=not args.no_dynamics)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "view", "split", "psnr", "ssim"])
        for row in rows:
            writer.writerow([row.frame, row.view, row.split, f"{row.psnr:.4f}", f"{row.ssim:.5f}"])
    (out / "metrics_summary.json").write_text(json.dumps(summary, indent=2))

    for split in ("train", "holdout"):
        if split in summary:
            logger.info(f"📊 {split}: PSNR {summary[split]['psnr']:.2f} dB, SSIM {summary[split]['ssim']:.4f}")
    return 0


@torch.no_grad()
def cmd_reenact(args) -> int:
    avatar = _load_avatar(args)
    poses = load_pose_sequence(Path(args.poses))
    if args.dataset:
        cameras = load_dataset(args.dataset).cameras
    else:
        spec = avatar.spec
        cameras = orbit_cameras(spec.num_views, spec.width, spec.height, spec.camera_distance)
    views = _parse_indices(args.views, len(cameras), "view")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = avatar.face.local_position.dtype
    for i, pose in enumerate(poses):
        comp = avatar.compose_pose(pose, index=i, dynamics=not args.no_dynamics)
        for v in views:
            image = render(comp.world, cameras[v].to(dtype)).image
            write_png(out / f"{i}_{v}.png", to_uint8(image))
    logger.info(f"🎭 Reenacted {len(poses)} poses x {len(views)} views to {out}")
    return 0


# ================================
# PARSER
# ================================

def _add_ablation_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--no-hand-mlp", action="store_true", help="disable the hand geometry/appearance networks")
    parser.add_argument("--no-interaction-mlp", action="store_true", help="disable the interaction network")
    parser.add_argument("--no-pbd", action="store_true", help="disable collision resolution")
    parser.add_argument("--no-patch-loss", action="store_true", help="drop the hand/overlap patch loss")


class CliParser(argparse.ArgumentParser):
    """Usage errors are validation failures: exit 1"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        prog="gsav",
        description="Mesh-anchored Gaussian avatars of hand-face interaction",
        epilog="exit codes: 0 success, 1 validation error, 2 runtime error",
    )
    parser.add_argument("--log-level", default=None, help=f"logging level (default {settings.log_level})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic multi-view dataset")
    p.add_argument("--spec", help="scene spec JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="run stage 1 and stage 2 training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--preset", default="desk", choices=["desk", "full"])
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render dataset frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", help="comma-separated frame indices (default all)")
    p.add_argument("--views", help="comma-separated view indices (default all)")
    p.add_argument("--no-dynamics", action="store_true", help="skip every network offset")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / SSIM per frame and view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-view", type=int, help="held-out view (default: the training config's)")
    p.add_argument("--no-dynamics", action="store_true")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reenact", help="drive an avatar with a pose sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True, help="poses.json from any scene")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="take cameras from this dataset instead of the avatar's own rig")
    p.add_argument("--views", help="comma-separated view indices (default all)")
    p.add_argument("--no-dynamics", action="store_true")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_reenact)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    configure_torch()
    logger.info(f"🚀 gsav {args.command}")
    try:
        return args.func(args)
    except AvatarError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected {type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
