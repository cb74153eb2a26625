# app/gaussians.py - Gaussian primitive: activations, covariance and evaluation
import logging
from dataclasses import dataclass

import torch
from torch import Tensor

from app.models import GaussianSet
from app.utils import ContractViolation, DegenerateCovarianceError, quat_to_rotmat

logger = logging.getLogger(__name__)

S_FLOOR = 1e-6  # local-frame scale floor, keeps covariances invertible
QUAT_TOLERANCE = 1e-6


@dataclass
class ActivatedGaussians:
    scale: Tensor  # (N, 3) > 0
    opacity: Tensor  # (N,) in (0, 1)
    color: Tensor  # (N, 3) in [0, 1]


def activate_parameters(gaussians: GaussianSet) -> ActivatedGaussians:
    """exp for scale, sigmoid for opacity and color"""
    return ActivatedGaussians(
        scale=torch.exp(gaussians.log_scale).clamp(min=S_FLOOR),
        opacity=torch.sigmoid(gaussians.opacity_logit),
        color=torch.sigmoid(gaussians.color_raw),
    )


def build_scaling_rotation(s: Tensor, R: Tensor) -> Tensor:
    """L = R diag(s), so that Sigma = L L^T"""
    return R * s[..., None, :]


def covariance_from_rotmat(s: Tensor, R: Tensor) -> Tensor:
    L = build_scaling_rotation(s, R)
    return L @ L.transpose(-1, -2)


def covariance_from_scale_rotation(s: Tensor, q: Tensor, check: bool = True) -> Tensor:
    """Sigma = R(q) diag(s)^2 R(q)^T for (..., 3) scales and (..., 4) unit quaternions"""
    if check:
        norm_error = (q.detach().norm(dim=-1) - 1.0).abs()
        if norm_error.numel() and norm_error.max() > QUAT_TOLERANCE:
            raise ContractViolation(f"quaternion is not unit (|‖q‖-1| = {norm_error.max().item():.3e})")
        if s.numel() and (s.detach() <= 0).any():
            raise ContractViolation("scales must be positive")
    return covariance_from_rotmat(s, quat_to_rotmat(q))


def evaluate_gaussian(x: Tensor, mu: Tensor, cov: Tensor) -> Tensor:
    """G(x) = exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)); batched over leading dims"""
    L, info = torch.linalg.cholesky_ex(cov)
    if (info != 0).any():
        raise DegenerateCovarianceError("covariance is singular or not positive definite")
    d = (x - mu).unsqueeze(-1)
    y = torch.cholesky_solve(d, L)
    mahalanobis = (d * y).sum(dim=(-1, -2))
    return torch.exp(-0.5 * mahalanobis)
