# app/dynamics.py - Positional encoding, offset networks and Adam stepping
import math
import logging
from typing import Callable, Dict, Iterable, Optional

import torch
from torch import nn, Tensor

from app.config import TrainConfig
from app.models import GaussianOffsets, GaussianSet, PoseState
from app.utils import ContractViolation

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def posenc(x: Tensor, n_freq: int) -> Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x)]"""
    if n_freq < 0:
        raise ContractViolation("n_freq must be >= 0")
    parts = [x]
    for k in range(n_freq):
        arg = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    return torch.cat(parts, dim=-1)


def posenc_dim(n_freq: int, dim: int = 3) -> int:
    return dim * (2 * n_freq + 1)


# ================================
# MLP
# ================================

class Mlp(nn.Module):
    """
    Linear -> LayerNorm -> LeakyReLU stack.

    The input is concatenated back in at the middle layer. With zero_init the
    final layer starts at zero, so the network output is 0 for any input.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 256, depth: int = 4,
                 layer_norm: bool = True, skip: bool = True, zero_init: bool = True,
                 final_activation: bool = False):
        super().__init__()
        if depth < 1:
            raise ContractViolation("depth must be >= 1")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.skip_at = depth // 2 if (skip and depth > 2) else -1

        self.linears = nn.ModuleList()
        self.norms = nn.ModuleList()
        width = in_dim
        for i in range(depth):
            last = i == depth - 1
            if i == self.skip_at:
                width += in_dim
            self.linears.append(nn.Linear(width, out_dim if last else hidden))
            use_norm = layer_norm and (not last or final_activation)
            self.norms.append(nn.LayerNorm(out_dim if last else hidden) if use_norm else nn.Identity())
            width = hidden

        self.final_activation = final_activation
        self.activation = nn.LeakyReLU(LEAKY_SLOPE)
        if zero_init:
            nn.init.zeros_(self.linears[-1].weight)
            nn.init.zeros_(self.linears[-1].bias)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        depth = len(self.linears)
        for i, (linear, norm) in enumerate(zip(self.linears, self.norms)):
            if i == self.skip_at:
                h = torch.cat([h, x], dim=-1)
            h = linear(h)
            if i < depth - 1 or self.final_activation:
                h = self.activation(norm(h))
        return h


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    if x.shape[-1] != mlp.in_dim:
        raise ContractViolation(f"MLP expects input width {mlp.in_dim}, got {x.shape[-1]}")
    return mlp(x)


class OffsetNet(nn.Module):
    """Shared trunk with one zero-initialized output head per Gaussian parameter"""

    HEADS: Dict[str, int] = {}

    def __init__(self, in_dim: int, hidden: int, depth: int):
        super().__init__()
        self.in_dim = in_dim
        self.trunk = Mlp(in_dim, hidden, hidden=hidden, depth=depth - 1,
                         zero_init=False, final_activation=True)
        self.heads = nn.ModuleDict()
        for name, dim in self.HEADS.items():
            head = nn.Linear(hidden, dim)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads[name] = head

    def forward(self, x: Tensor) -> Dict[str, Tensor]:
        if x.shape[-1] != self.in_dim:
            raise ContractViolation(f"{type(self).__name__} expects input width {self.in_dim}, got {x.shape[-1]}")
        h = self.trunk(x)
        return {name: head(h) for name, head in self.heads.items()}


def _offsets(raw: Dict[str, Tensor]) -> GaussianOffsets:
    out = {name: raw.get(name) for name in GaussianOffsets.NAMES}
    if out["d_opacity"] is not None:
        out["d_opacity"] = out["d_opacity"].squeeze(-1)
    return GaussianOffsets(**out)


def _broadcast(vector: Tensor, num: int, dtype: torch.dtype) -> Tensor:
    return vector.to(dtype).reshape(1, -1).expand(num, -1)


# ================================
# HAND NETWORKS
# ================================

class HandGeometryNet(OffsetNet):
    """(gamma(mu_cano), theta_hand) -> (d_mu, d_s, d_q)"""
    HEADS = {"d_position": 3, "d_scale": 3, "d_rotation": 4}

    def __init__(self, theta_dim: int, n_freq: int = 6, hidden: int = 256, depth: int = 4):
        self.n_freq = n_freq
        self.theta_dim = theta_dim
        super().__init__(posenc_dim(n_freq) + theta_dim, hidden, depth)


class HandAppearanceNet(OffsetNet):
    """(gamma(mu_cano), P_i, F, theta_hand, r_hand, r_rel, t_rel) -> (d_c, d_o)"""
    HEADS = {"d_color": 3, "d_opacity": 1}

    def __init__(self, theta_dim: int, point_feature_dim: int = 64, geo_feature_dim: int = 1024,
                 n_freq: int = 6, hidden: int = 256, depth: int = 6):
        self.n_freq = n_freq
        self.theta_dim = theta_dim
        self.geo_feature_dim = geo_feature_dim
        in_dim = posenc_dim(n_freq) + point_feature_dim + geo_feature_dim + theta_dim + 4 + 4 + 3
        super().__init__(in_dim, hidden, depth)


def hand_geo_offsets(net: HandGeometryNet, gaussians: GaussianSet, pose: PoseState) -> GaussianOffsets:
    num = len(gaussians)
    dtype = gaussians.local_position.dtype
    x = torch.cat([
        posenc(gaussians.canonical_position, net.n_freq),
        _broadcast(pose.theta_hand, num, dtype),
    ], dim=-1)
    return _offsets(net(x))


def hand_app_offsets(net: HandAppearanceNet, gaussians: GaussianSet, pose: PoseState,
                     feature: Optional[Tensor] = None) -> GaussianOffsets:
    num = len(gaussians)
    dtype = gaussians.local_position.dtype
    if feature is None:
        feature = torch.zeros(net.geo_feature_dim, dtype=dtype)
    x = torch.cat([
        posenc(gaussians.canonical_position, net.n_freq),
        gaussians.point_feature,
        _broadcast(feature, num, dtype),
        _broadcast(pose.theta_hand, num, dtype),
        _broadcast(pose.r_hand, num, dtype),
        _broadcast(pose.r_rel, num, dtype),
        _broadcast(pose.t_rel, num, dtype),
    ], dim=-1)
    return _offsets(net(x))


# ================================
# OPTIMIZATION
# ================================

def build_optimizer(gaussian_sets: Dict[str, GaussianSet], networks: Dict[str, nn.Module],
                    config: TrainConfig, train_gaussians: bool = True) -> torch.optim.Adam:
    """
    One Adam instance with a named group per tensor.

    Gaussian groups are named "<avatar>.<field>" and hold a single tensor so
    densification can swap them; network groups are named "net.<name>".
    """
    lrs = config.gaussian_lr
    per_field = {
        "local_position": lrs.position_init,
        "log_scale": lrs.scaling,
        "rotation": lrs.rotation,
        "color_raw": lrs.color,
        "opacity_logit": lrs.opacity,
        "point_feature": config.point_feature_lr,
    }
    groups = []
    if train_gaussians:
        for avatar, gaussians in gaussian_sets.items():
            for field_name, lr in per_field.items():
                tensor = getattr(gaussians, field_name)
                groups.append({"params": [tensor], "lr": lr, "name": f"{avatar}.{field_name}"})
    for name, net in networks.items():
        params = [p for p in net.parameters() if p.requires_grad]
        if params:
            groups.append({"params": params, "lr": config.mlp_lr, "name": f"net.{name}"})
    if not groups:
        raise ContractViolation("nothing to optimize")
    return torch.optim.Adam(groups, lr=config.mlp_lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _all_params(optimizer: torch.optim.Optimizer) -> Iterable[Tensor]:
    for group in optimizer.param_groups:
        yield from group["params"]


def adam_step(optimizer: torch.optim.Optimizer, step: int,
              position_lr: Optional[Callable[[int], float]] = None) -> bool:
    """
    Apply one Adam update; returns False when the step was skipped.

    A non-finite gradient anywhere skips the whole update and leaves the
    parameters and moments untouched. Rotation groups are renormalized after
    the update.
    """
    for param in _all_params(optimizer):
        if param.grad is not None and not torch.isfinite(param.grad).all():
            logger.warning(f"⚠️ Non-finite gradient at step {step}; update skipped")
            optimizer.zero_grad(set_to_none=True)
            return False

    if position_lr is not None:
        for group in optimizer.param_groups:
            if group.get("name", "").endswith(".local_position"):
                group["lr"] = position_lr(step)

    optimizer.step()
    optimizer.zero_grad(set_to_none=True)

    with torch.no_grad():
        for group in optimizer.param_groups:
            if group.get("name", "").endswith(".rotation"):
                for q in group["params"]:
                    q.div_(q.norm(dim=-1, keepdim=True).clamp(min=1e-12))
    return True
