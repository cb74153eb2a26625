# app/binding.py - Facet-bound Gaussians: local frames, world transform, density control
import logging
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from app.config import DensifyConfig
from app.gaussians import S_FLOOR, activate_parameters, covariance_from_rotmat
from app.models import GaussianOffsets, GaussianSet, LocalFrameSet, TriangleMesh, WorldGaussians
from app.utils import ContractViolation, DegenerateFacetError, inverse_sigmoid, quat_multiply, \
    quat_normalize, quat_to_rotmat, rotmat_to_quat

logger = logging.getLogger(__name__)

AREA_EPS = 1e-12
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6


# ================================
# LOCAL FRAMES
# ================================

def compute_local_frames(mesh: TriangleMesh) -> LocalFrameSet:
    """Per facet: origin at the centroid, basis (e0, n x e0, n), scale sqrt(2 * area)"""
    tri = mesh.triangles()
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e0 = v1 - v0
    cross = torch.linalg.cross(e0, v2 - v0)
    double_area = cross.norm(dim=-1)
    area = 0.5 * double_area

    bad = area <= AREA_EPS
    if bad.any():
        facet = int(torch.nonzero(bad)[0])
        raise DegenerateFacetError(facet, float(area[facet]))

    normal = cross / double_area[:, None]
    tangent = e0 / e0.norm(dim=-1, keepdim=True)
    bitangent = torch.linalg.cross(normal, tangent)
    rotation = torch.stack([tangent, bitangent, normal], dim=-1)

    return LocalFrameSet(
        rotation=rotation,
        origin=tri.mean(dim=1),
        scale=torch.sqrt(double_area),
    )


# ================================
# BINDING
# ================================

def bind_initial_gaussians(mesh: TriangleMesh, n_per_face: int, point_feature_dim: int = 64,
                           generator: Optional[torch.Generator] = None,
                           init_scale: float = 0.5, init_opacity: float = 0.1) -> GaussianSet:
    """n_per_face Gaussians at every facet centroid with splatting defaults"""
    if n_per_face < 1:
        raise ContractViolation("n_per_face must be >= 1")
    dtype = mesh.vertices.dtype
    num = mesh.num_faces * n_per_face
    parent_face = torch.arange(mesh.num_faces).repeat_interleave(n_per_face)

    rotation = torch.zeros(num, 4, dtype=dtype)
    rotation[:, 0] = 1.0
    opacity = torch.full((num,), init_opacity, dtype=dtype)

    frames = compute_local_frames(mesh)
    gaussians = GaussianSet(
        local_position=torch.zeros(num, 3, dtype=dtype),
        log_scale=torch.full((num, 3), float(torch.log(torch.tensor(init_scale))), dtype=dtype),
        rotation=rotation,
        color_raw=torch.zeros(num, 3, dtype=dtype),
        opacity_logit=inverse_sigmoid(opacity),
        parent_face=parent_face,
        point_feature=1e-2 * torch.randn(num, point_feature_dim, generator=generator, dtype=dtype),
        canonical_position=torch.zeros(num, 3, dtype=dtype),
    )
    gaussians.canonical_position = world_positions(gaussians.local_position, gaussians.parent_face, frames)
    logger.info(f"✅ Bound {num} Gaussians to {mesh.num_faces} facets ({n_per_face} per facet)")
    return gaussians


def world_positions(local_position: Tensor, parent_face: Tensor, frames: LocalFrameSet) -> Tensor:
    """mu = k_j R_j mu_i + T_j"""
    R = frames.rotation[parent_face]
    k = frames.scale[parent_face]
    return k[:, None] * (R @ local_position.unsqueeze(-1)).squeeze(-1) + frames.origin[parent_face]


def to_local(world: Tensor, parent_face: Tensor, frames: LocalFrameSet) -> Tensor:
    """Inverse of world_positions"""
    R = frames.rotation[parent_face]
    k = frames.scale[parent_face]
    offset = (world - frames.origin[parent_face]).unsqueeze(-1)
    return (R.transpose(-1, -2) @ offset).squeeze(-1) / k[:, None]


def to_world(gaussians: GaussianSet, frames: LocalFrameSet,
             offsets: Optional[GaussianOffsets] = None) -> WorldGaussians:
    """Map local Gaussians (plus additive offsets) into world space"""
    parent = gaussians.parent_face
    if parent.numel() and (parent.min() < 0 or parent.max() >= len(frames)):
        raise ContractViolation("parent_face index outside the bound mesh")
    offsets = offsets or GaussianOffsets()
    act = activate_parameters(gaussians)

    local_mu = gaussians.local_position
    if offsets.d_position is not None:
        local_mu = local_mu + offsets.d_position

    scale = act.scale
    if offsets.d_scale is not None:
        scale = (scale + offsets.d_scale).clamp(min=S_FLOOR)

    q = gaussians.rotation
    if offsets.d_rotation is not None:
        q = q + offsets.d_rotation
    q = quat_normalize(q)

    color = act.color
    if offsets.d_color is not None:
        color = (color + offsets.d_color).clamp(0.0, 1.0)

    opacity = act.opacity
    if offsets.d_opacity is not None:
        opacity = (opacity + offsets.d_opacity).clamp(0.0, 1.0)

    R_frame = frames.rotation[parent]
    k = frames.scale[parent]
    means = world_positions(local_mu, parent, frames)
    world_scale = k[:, None] * scale
    R_world = R_frame @ quat_to_rotmat(q)
    world_q = quat_multiply(rotmat_to_quat(R_frame), q)

    return WorldGaussians(
        means=means,
        scales=world_scale,
        rotations=world_q,
        covariances=covariance_from_rotmat(world_scale, R_world),
        colors=color,
        opacities=opacity,
    )


# ================================
# DENSITY CONTROL
# ================================

@dataclass
class DensityStats:
    grad_accum: Tensor  # (N,) summed view-space gradient norms
    denom: Tensor  # (N,) number of views in which the Gaussian was visible

    @classmethod
    def zeros(cls, num: int) -> "DensityStats":
        return cls(grad_accum=torch.zeros(num, dtype=torch.float64), denom=torch.zeros(num, dtype=torch.float64))

    def add(self, grad_norm: Tensor, visible: Tensor):
        self.grad_accum[visible] += grad_norm[visible].detach().to(torch.float64)
        self.denom[visible] += 1

    def average(self) -> Tensor:
        grads = self.grad_accum / self.denom
        grads[grads.isnan()] = 0.0
        return grads


@dataclass
class DensifyResult:
    gaussians: GaussianSet
    origin: Tensor  # (M,) source index in the input set for every output Gaussian
    fresh: Tensor  # (M,) True for clones and split children
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(gaussians: GaussianSet, stats: DensityStats, thresholds: DensifyConfig,
                      canonical_frames: LocalFrameSet,
                      generator: Optional[torch.Generator] = None) -> DensifyResult:
    """Clone small / split large high-gradient Gaussians, then prune transparent ones"""
    with torch.no_grad():
        source = gaussians.detach()
        num = len(source)
        grads = stats.average()
        act = activate_parameters(source)
        max_scale = act.scale.max(dim=1).values
        selected = grads >= thresholds.grad_threshold

        # Clones and splits each add one Gaussian; the largest gradients win the budget
        budget = max(thresholds.max_gaussians - num, 0)
        candidates = torch.nonzero(selected).squeeze(-1)
        if len(candidates) > budget:
            order = torch.argsort(grads[candidates], descending=True, stable=True)
            selected = torch.zeros_like(selected)
            selected[candidates[order[:budget]]] = True
        clone_mask = selected & (max_scale <= thresholds.dense_scale_limit)
        split_mask = selected & (max_scale > thresholds.dense_scale_limit)

        # Clone: identical copy bound to the same facet
        clone_idx = torch.nonzero(clone_mask).squeeze(-1)
        clones = source.select(clone_idx)

        # Split: children sampled inside the source footprint, scale / 1.6
        split_idx = torch.nonzero(split_mask).squeeze(-1)
        child_idx = split_idx.repeat(SPLIT_CHILDREN)
        children = source.select(child_idx)
        if len(child_idx):
            stds = act.scale[child_idx]
            samples = torch.randn(stds.shape, generator=generator, dtype=stds.dtype) * stds
            rots = quat_to_rotmat(quat_normalize(source.rotation[child_idx]))
            children.local_position = source.local_position[child_idx] + (rots @ samples.unsqueeze(-1)).squeeze(-1)
            children.log_scale = torch.log(act.scale[child_idx] / SPLIT_SCALE_DIVISOR)
            children.canonical_position = world_positions(
                children.local_position, children.parent_face, canonical_frames)

        keep_mask = ~split_mask
        kept_idx = torch.nonzero(keep_mask).squeeze(-1)
        merged = source.select(kept_idx).concat(clones).concat(children)
        origin = torch.cat([kept_idx, clone_idx, child_idx])
        fresh = torch.cat([
            torch.zeros(len(kept_idx), dtype=torch.bool),
            torch.ones(len(clone_idx) + len(child_idx), dtype=torch.bool),
        ])

        # Prune
        opacity = torch.sigmoid(merged.opacity_logit)
        alive = opacity >= thresholds.min_opacity
        pruned = int((~alive).sum())
        merged = merged.select(alive)
        origin = origin[alive]
        fresh = fresh[alive]

    if len(merged) and (merged.parent_face.min() < 0 or merged.parent_face.max() >= len(canonical_frames)):
        raise ContractViolation("densification produced an invalid parent_face")

    logger.info(f"🌱 Densify: +{len(clone_idx)} clones, {len(split_idx)} splits, -{pruned} pruned "
                f"→ {len(merged)} Gaussians")
    return DensifyResult(gaussians=merged, origin=origin, fresh=fresh,
                         cloned=len(clone_idx), split=len(split_idx), pruned=pruned)


def remap_optimizer_state(optimizer: torch.optim.Optimizer, old_params: dict, new_params: dict,
                          origin: Tensor, fresh: Tensor):
    """Swap densified tensors into the optimizer, carrying Adam moments of surviving Gaussians"""
    for group in optimizer.param_groups:
        name = group.get("name")
        if name not in new_params:
            continue
        old = old_params[name]
        new = new_params[name]
        state = optimizer.state.pop(old, None)
        group["params"][0] = new
        if state is None:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            moment = state[key][origin].clone()
            moment[fresh] = 0.0
            state[key] = moment
        optimizer.state[new] = state
