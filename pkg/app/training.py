# app/training.py - Two-stage optimization, frame sampling, checkpoints and evaluation
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
from tqdm import tqdm

from app.avatar import Avatar, Composition, build_networks
from app.binding import DensityStats, densify_and_prune, remap_optimizer_state
from app.config import TrainConfig, settings
from app.dynamics import adam_step, build_optimizer
from app.gaussians import activate_parameters
from app.losses import LossTerms, dssim, l1_loss, patch_loss, position_regularizer, \
    position_violation_rate, psnr, scale_regularizer, ssim, total_loss
from app.models import GaussianSet, RenderOutput
from app.rasterizer import render
from app.scene import SceneDataset, SceneSpec
from app.storage import frames_from_dict, frames_to_dict, load_checkpoint, save_checkpoint
from app.utils import ConfigError, TrainingDivergedError, get_expon_lr_func, make_generator, seed_everything

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "stage", "frame", "view", "l1", "dssim", "scale_reg", "position_reg", "patch",
               "total", "n_gaussians"]


# ================================
# FRAME SAMPLING
# ================================

class FrameSampler:
    """Frames with interaction are drawn `oversampling` times as often as the rest"""

    def __init__(self, interaction: List[bool], views: List[int], oversampling: float = 4.0):
        if not interaction:
            raise ConfigError("no frames to sample")
        if not views:
            raise ConfigError("no training views")
        weights = torch.tensor([oversampling if flag else 1.0 for flag in interaction], dtype=torch.float64)
        self.probabilities = weights / weights.sum()
        self.views = list(views)

    def sample_frame(self, generator: torch.Generator) -> int:
        return int(torch.multinomial(self.probabilities, 1, generator=generator))

    def sample(self, generator: torch.Generator) -> Tuple[int, int]:
        frame = self.sample_frame(generator)
        view = self.views[int(torch.randint(len(self.views), (1,), generator=generator))]
        return frame, view


def training_views(num_views: int, holdout_view: Optional[int]) -> List[int]:
    if holdout_view is None or not 0 <= holdout_view < num_views:
        if holdout_view is not None:
            logger.warning(f"⚠️ Held-out view {holdout_view} does not exist; training on all views")
        return list(range(num_views))
    if num_views == 1:
        raise ConfigError("cannot hold out the only view")
    return [v for v in range(num_views) if v != holdout_view]


# ================================
# TRAINING STATE
# ================================

@dataclass
class TrainingState:
    avatar: Avatar
    optimizer: torch.optim.Optimizer
    stage: int
    step: int
    generator: torch.Generator
    stats: Dict[str, DensityStats] = field(default_factory=dict)
    skipped_steps: int = 0
    last_terms: Optional[LossTerms] = None

    @property
    def config(self) -> TrainConfig:
        return self.avatar.config

    def num_gaussians(self) -> int:
        return len(self.avatar.face) + len(self.avatar.hand)


def _make_trainable(avatar: Avatar):
    for g in avatar.gaussian_sets().values():
        g.requires_grad_(True)


def _optimizer_for(avatar: Avatar, stage: int) -> torch.optim.Optimizer:
    networks = {} if stage == 1 else dict(avatar.networks.items())
    return build_optimizer(avatar.gaussian_sets(), networks, avatar.config)


def _position_schedule(config: TrainConfig):
    lrs = config.gaussian_lr
    return get_expon_lr_func(lrs.position_init, lrs.position_final,
                             lr_delay_mult=lrs.position_delay_mult,
                             max_steps=max(config.stage1_steps + config.stage2_steps, 1))


def init_training(dataset: SceneDataset, config: TrainConfig, dtype: Optional[torch.dtype] = None) -> TrainingState:
    """Seed everything, bind Gaussians on the canonical frame and set up stage 1"""
    dataset.validate()
    seed_everything(config.seed)
    avatar = Avatar.create(dataset, config, generator=make_generator(config.seed))
    if dtype is not None:
        avatar.to(dtype)
    _make_trainable(avatar)
    state = TrainingState(
        avatar=avatar,
        optimizer=_optimizer_for(avatar, 1),
        stage=1,
        step=0,
        generator=make_generator(config.seed + 1),
    )
    reset_stats(state)
    return state


def reset_stats(state: TrainingState):
    state.stats = {name: DensityStats.zeros(len(g)) for name, g in state.avatar.gaussian_sets().items()}


# ================================
# ONE STEP
# ================================

def compute_losses(avatar: Avatar, comp: Composition, out: RenderOutput, target: torch.Tensor,
                   hand_bbox, face_bbox, stage: int) -> LossTerms:
    cfg = avatar.config
    terms = LossTerms.zeros(out.image.dtype)
    terms.l1 = l1_loss(out.image, target)
    terms.dssim = dssim(out.image, target)
    if stage == 1:
        return terms

    visible = out.visibility
    n_face = comp.num_face
    parts = (
        (avatar.face, comp.face_offsets, visible[:n_face]),
        (avatar.hand, comp.hand_offsets, visible[n_face:]),
    )
    for g, offsets, vis in parts:
        scale = activate_parameters(g).scale
        terms.scale_reg = terms.scale_reg + scale_regularizer(scale, offsets.d_scale, cfg.loss.eps_s, vis)
        terms.position_reg = terms.position_reg + position_regularizer(
            g.local_position, offsets.d_position, cfg.loss.eps_mu, vis)
    if cfg.use_patch_loss:
        terms.patch = patch_loss(out.image, target, hand_bbox, face_bbox)
    return terms


def _dump_divergence(state: TrainingState, out_dir: Optional[Path], frame: int, view: int, terms: LossTerms):
    root = Path(out_dir or settings.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    dump = root / f"diverged_stage{state.stage}_step{state.step}"
    save_training_state(state, dump)
    torch.save({"frame": frame, "view": view, "terms": terms.as_floats()}, dump / "diagnostic.pt")
    logger.error(f"❌ Non-finite loss at stage {state.stage} step {state.step}; state dumped to {dump}")


def training_step(state: TrainingState, dataset: SceneDataset, sampler: FrameSampler,
                  out_dir: Optional[Path] = None) -> Dict[str, float]:
    avatar = state.avatar
    cfg = avatar.config
    frame, view = sampler.sample(state.generator)
    dtype = avatar.face.local_position.dtype

    comp = avatar.compose_frame(dataset, frame, dynamics=(state.stage == 2))
    out = render(comp.world, dataset.cameras[view].to(dtype))
    target = dataset.image(frame, view, dtype)
    record = dataset.frames[frame]
    terms = compute_losses(avatar, comp, out, target, record.hand_bboxes[view], record.face_bboxes[view],
                           state.stage)
    loss = total_loss(terms, cfg.loss)

    if not torch.isfinite(loss):
        _dump_divergence(state, out_dir, frame, view, terms)
        raise TrainingDivergedError(f"loss became {float(loss)} at stage {state.stage} step {state.step}")

    loss.backward()

    if state.stage == 1:
        grad_norm = out.viewspace_grad_norm()
        seen = out.visibility & (out.radii > 0)
        n_face = comp.num_face
        state.stats["face"].add(grad_norm[:n_face], seen[:n_face])
        state.stats["hand"].add(grad_norm[n_face:], seen[n_face:])

    global_step = state.step if state.stage == 1 else cfg.stage1_steps + state.step
    if not adam_step(state.optimizer, global_step, _position_schedule(cfg)):
        state.skipped_steps += 1
    state.step += 1
    state.last_terms = terms

    if state.stage == 1:
        maybe_densify(state)

    row = {"step": state.step, "stage": state.stage, "frame": frame, "view": view, **terms.as_floats(),
           "total": float(loss), "n_gaussians": state.num_gaussians()}
    return row


def maybe_densify(state: TrainingState):
    dcfg = state.config.densify
    stop = int(dcfg.stop_fraction * state.config.stage1_steps)
    if state.step < dcfg.start_step or state.step >= stop or state.step % dcfg.interval != 0:
        return
    densify(state)


def densify(state: TrainingState):
    """Clone/split/prune both avatar parts and carry optimizer moments across"""
    avatar = state.avatar
    for name, g in avatar.gaussian_sets().items():
        result = densify_and_prune(g, state.stats[name], state.config.densify,
                                   avatar.canonical_frames(name), state.generator)
        fresh = result.gaussians.requires_grad_(True)
        old_params = {f"{name}.{k}": v for k, v in g.trainable().items()}
        new_params = {f"{name}.{k}": v for k, v in fresh.trainable().items()}
        remap_optimizer_state(state.optimizer, old_params, new_params, result.origin, result.fresh)
        avatar.set_gaussians(name, fresh)
    reset_stats(state)


# ================================
# STAGES
# ================================

class TrainingLog:
    """Appends loss rows to train_log.csv"""

    def __init__(self, out_dir: Optional[Path]):
        self.path = Path(out_dir) / "train_log.csv" if out_dir else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.DictWriter(f, fieldnames=LOG_COLUMNS).writeheader()

    def write(self, rows: List[Dict[str, float]]):
        if not self.path or not rows:
            return
        with open(self.path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS, extrasaction="ignore")
            writer.writerows(rows)


def run_steps(state: TrainingState, dataset: SceneDataset, num_steps: int, out_dir: Optional[Path] = None,
              progress: bool = False) -> List[Dict[str, float]]:
    """Advance the current stage by num_steps"""
    cfg = state.config
    sampler = FrameSampler(dataset.interaction_flags(), training_views(dataset.num_views, cfg.holdout_view),
                           cfg.oversampling)
    log = TrainingLog(out_dir)
    rows, pending = [], []
    for _ in tqdm(range(num_steps), desc=f"stage {state.stage}", disable=not progress):
        row = training_step(state, dataset, sampler, out_dir)
        rows.append(row)
        pending.append(row)
        if cfg.checkpoint_every and out_dir and state.step % cfg.checkpoint_every == 0:
            log.write(pending)
            pending = []
            save_training_state(state, Path(out_dir) / f"stage{state.stage}_step{state.step}")
    log.write(pending)
    if state.skipped_steps:
        logger.warning(f"⚠️ {state.skipped_steps} optimizer steps skipped on non-finite gradients")
    return rows


def train_stage1(dataset: SceneDataset, config: TrainConfig, out_dir: Optional[Path] = None,
                 dtype: Optional[torch.dtype] = None, progress: bool = False) -> TrainingState:
    """Static warm-up: photometric loss only, density control active"""
    state = init_training(dataset, config, dtype)
    logger.info(f"🚀 Stage 1: {config.stage1_steps} steps, {state.num_gaussians()} Gaussians")
    run_steps(state, dataset, config.stage1_steps, out_dir, progress)
    if out_dir:
        save_training_state(state, Path(out_dir) / "stage1")
    logger.info(f"✅ Stage 1 done: {state.num_gaussians()} Gaussians")
    return state


def start_stage2(state: TrainingState) -> TrainingState:
    """Freeze the Gaussian population and add the networks to a fresh optimizer"""
    state.avatar.refresh_canonical_positions()
    _make_trainable(state.avatar)
    state.stage = 2
    state.step = 0
    state.optimizer = _optimizer_for(state.avatar, 2)
    state.stats = {}
    return state


def train_stage2(state: TrainingState, dataset: SceneDataset, out_dir: Optional[Path] = None,
                 progress: bool = False) -> TrainingState:
    """Joint training of the hand and interaction networks, point features and Gaussians"""
    if state.stage == 1:
        start_stage2(state)
    config = state.config
    remaining = max(config.stage2_steps - state.step, 0)
    logger.info(f"🚀 Stage 2: {remaining} steps, interaction oversampling x{config.oversampling}")
    run_steps(state, dataset, remaining, out_dir, progress)
    if out_dir:
        save_training_state(state, Path(out_dir) / "stage2")
    logger.info("✅ Stage 2 done")
    return state


# ================================
# CHECKPOINTS
# ================================

def save_training_state(state: TrainingState, path):
    avatar = state.avatar
    meta = {
        "stage": state.stage,
        "step": state.step,
        "skipped_steps": state.skipped_steps,
        "dtype": str(avatar.face.local_position.dtype).replace("torch.", ""),
        "config": avatar.config.model_dump(),
        "spec": avatar.spec.model_dump(),
    }
    extra = {
        "stiffness": avatar.stiffness,
        "region_mask": avatar.region_mask,
        "face_canonical": frames_to_dict(avatar.face_canonical),
        "hand_canonical": frames_to_dict(avatar.hand_canonical),
        "stats": {name: (s.grad_accum, s.denom) for name, s in state.stats.items()},
    }
    save_checkpoint(path, meta, avatar.gaussian_sets(), avatar.networks.state_dict(),
                    optimizer=state.optimizer.state_dict(), generator=state.generator.get_state(), extra=extra)


def load_training_state(path, config: Optional[TrainConfig] = None) -> TrainingState:
    """Rebuild avatar, optimizer and RNG exactly as saved; config overrides apply to ablation flags only"""
    data = load_checkpoint(path)
    meta = data.meta
    dtype = getattr(torch, meta.get("dtype", "float64"))
    saved = TrainConfig.model_validate(meta["config"])
    if config is not None:
        saved = saved.model_copy(update={
            "use_hand_mlp": config.use_hand_mlp,
            "use_interaction_mlp": config.use_interaction_mlp,
            "use_pbd": config.use_pbd,
            "use_patch_loss": config.use_patch_loss,
        })
    spec = SceneSpec.model_validate(meta["spec"])

    networks = build_networks(spec, saved)
    networks.load_state_dict(data.networks)
    networks.to(dtype)
    gaussians = {name: g for name, g in data.gaussians.items()}
    face = _with_dtype(gaussians["face"], dtype)
    hand = _with_dtype(gaussians["hand"], dtype)
    extra = data.extra
    avatar = Avatar(face=face, hand=hand, networks=networks, config=saved, spec=spec,
                    stiffness=extra["stiffness"], region_mask=extra["region_mask"],
                    face_canonical=frames_from_dict(extra["face_canonical"]),
                    hand_canonical=frames_from_dict(extra["hand_canonical"]))
    _make_trainable(avatar)

    stage = int(meta["stage"])
    optimizer = _optimizer_for(avatar, stage)
    if data.optimizer is not None:
        optimizer.load_state_dict(data.optimizer)
    generator = torch.Generator()
    if data.generator is not None:
        generator.set_state(data.generator)
    stats = {name: DensityStats(grad_accum=acc, denom=den) for name, (acc, den) in extra.get("stats", {}).items()}
    state = TrainingState(avatar=avatar, optimizer=optimizer, stage=stage, step=int(meta["step"]),
                          generator=generator, stats=stats, skipped_steps=int(meta.get("skipped_steps", 0)))
    if stage == 1 and not stats:
        reset_stats(state)
    return state


def _with_dtype(g: GaussianSet, dtype: torch.dtype) -> GaussianSet:
    return GaussianSet(**{k: (t.to(dtype) if t.is_floating_point() else t) for k, t in g.tensors().items()})


def checkpoint_roundtrip(state: TrainingState, path) -> TrainingState:
    save_training_state(state, path)
    return load_training_state(path)


# ================================
# RENDERING AND EVALUATION
# ================================

@torch.no_grad()
def render_frame(avatar: Avatar, dataset: SceneDataset, frame: int, view: int,
                 dynamics: bool = True) -> torch.Tensor:
    dtype = avatar.face.local_position.dtype
    comp = avatar.compose_frame(dataset, frame, dynamics=dynamics)
    return render(comp.world, dataset.cameras[view].to(dtype)).image


@dataclass
class EvalRow:
    frame: int
    view: int
    split: str
    psnr: float
    ssim: float


@torch.no_grad()
def evaluate(avatar: Avatar, dataset: SceneDataset, holdout_view: Optional[int],
             dynamics: bool = True) -> Tuple[List[EvalRow], Dict[str, object]]:
    """PSNR / SSIM for every frame and view, split into train and held-out views"""
    rows: List[EvalRow] = []
    violation = []
    dtype = avatar.face.local_position.dtype
    for k in range(len(dataset.frames)):
        comp = avatar.compose_frame(dataset, k, dynamics=dynamics)
        violation.append(position_violation_rate(avatar.face.local_position, comp.face_offsets.d_position,
                                                 avatar.config.loss.eps_mu))
        for v, camera in enumerate(dataset.cameras):
            image = render(comp.world, camera.to(dtype)).image
            target = dataset.image(k, v, dtype)
            split = "holdout" if v == holdout_view else "train"
            rows.append(EvalRow(frame=k, view=v, split=split, psnr=psnr(image, target),
                                ssim=float(ssim(image, target))))

    summary: Dict[str, object] = {"holdout_view": holdout_view}
    for split in ("train", "holdout"):
        chosen = [r for r in rows if r.split == split]
        if chosen:
            summary[split] = {
                "psnr": sum(r.psnr for r in chosen) / len(chosen),
                "ssim": sum(r.ssim for r in chosen) / len(chosen),
                "count": len(chosen),
            }
    summary["position_violation"] = sum(violation) / max(len(violation), 1)
    return rows, summary
