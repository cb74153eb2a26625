# app/losses.py - Training losses and image quality metrics
import math
import logging
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from app.config import LossWeights
from app.utils import ContractViolation

logger = logging.getLogger(__name__)

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
PATCH_SIZE = 64
PSNR_CAP = 100.0

BBox = Sequence[int]  # (x0, y0, x1, y1), pixels, x1/y1 exclusive


@dataclass
class LossTerms:
    l1: Tensor
    dssim: Tensor
    scale_reg: Tensor
    position_reg: Tensor
    patch: Tensor

    @classmethod
    def zeros(cls, dtype: torch.dtype = torch.float64) -> "LossTerms":
        zero = torch.zeros((), dtype=dtype)
        return cls(l1=zero, dssim=zero, scale_reg=zero, position_reg=zero, patch=zero)

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _check_pair(img: Tensor, ref: Tensor):
    if img.shape != ref.shape:
        raise ContractViolation(f"image shapes differ: {tuple(img.shape)} vs {tuple(ref.shape)}")
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ContractViolation(f"expected (H, W, 3) images, got {tuple(img.shape)}")


# ================================
# PHOTOMETRIC TERMS
# ================================

def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA,
                    dtype: torch.dtype = torch.float64) -> Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(img: Tensor, ref: Tensor) -> Tensor:
    """Per-pixel SSIM of two (H, W, 3) images; zero-padded 11x11 Gaussian window"""
    x = img.permute(2, 0, 1).unsqueeze(0)
    y = ref.permute(2, 0, 1).unsqueeze(0).to(x.dtype)
    window = gaussian_window(dtype=x.dtype).expand(3, 1, WINDOW_SIZE, WINDOW_SIZE).contiguous()
    blur = lambda t: F.conv2d(t, window, padding=WINDOW_SIZE // 2, groups=3)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x * mu_x
    sigma_y = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y

    num = (2 * mu_x * mu_y + C1) * (2 * sigma_xy + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (sigma_x + sigma_y + C2)
    return num / den


def ssim(img: Tensor, ref: Tensor) -> Tensor:
    _check_pair(img, ref)
    return ssim_map(img, ref).mean()


def dssim(img: Tensor, ref: Tensor) -> Tensor:
    return (1.0 - ssim(img, ref)) / 2.0


def l1_loss(img: Tensor, ref: Tensor) -> Tensor:
    _check_pair(img, ref)
    return (img - ref.to(img.dtype)).abs().mean()


def photometric_loss(render: Tensor, target: Tensor, lam: float = 0.2) -> Tensor:
    """(1 - lam) * L1 + lam * D-SSIM"""
    return (1.0 - lam) * l1_loss(render, target) + lam * dssim(render, target)


def psnr(img: Tensor, ref: Tensor) -> float:
    _check_pair(img, ref)
    mse = float(((img.detach() - ref.detach().to(img.dtype)) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


# ================================
# REGULARIZERS
# ================================

def scale_regularizer(scale: Tensor, d_scale: Optional[Tensor], eps_s: float, visibility: Tensor) -> Tensor:
    """sum over visible Gaussians of ReLU(s + ds - eps_s)^2, local-frame units"""
    s = scale if d_scale is None else scale + d_scale
    excess = F.relu(s[visibility] - eps_s)
    return (excess ** 2).sum()


def position_regularizer(local_position: Tensor, d_position: Optional[Tensor], eps_mu: float,
                         visibility: Tensor) -> Tensor:
    """sum over visible Gaussians of ReLU(|mu + dmu| - eps_mu)^2, local-frame units"""
    mu = local_position if d_position is None else local_position + d_position
    excess = F.relu(mu[visibility].abs() - eps_mu)
    return (excess ** 2).sum()


def position_violation_rate(local_position: Tensor, d_position: Optional[Tensor], eps_mu: float) -> float:
    """Fraction of Gaussians drifting beyond eps_mu along any local axis"""
    if local_position.shape[0] == 0:
        return 0.0
    mu = local_position if d_position is None else local_position + d_position
    return float((mu.detach().abs() > eps_mu).any(dim=-1).to(torch.float64).mean())


# ================================
# PATCH LOSS
# ================================

def _check_bbox(bbox: BBox, height: int, width: int):
    x0, y0, x1, y1 = bbox
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ContractViolation(f"bounding box {tuple(bbox)} outside the {width}x{height} image")


def _crop(img: Tensor, bbox: BBox) -> Tensor:
    x0, y0, x1, y1 = bbox
    patch = img[y0:y1, x0:x1].permute(2, 0, 1).unsqueeze(0)
    patch = F.interpolate(patch, size=(PATCH_SIZE, PATCH_SIZE), mode="bilinear", align_corners=False)
    return patch[0].permute(1, 2, 0)


def bbox_intersection(a: BBox, b: BBox) -> tuple:
    return max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])


def bbox_is_empty(bbox: BBox) -> bool:
    return bbox[2] <= bbox[0] or bbox[3] <= bbox[1]


def patch_loss(render: Tensor, target: Tensor, hand_bbox: Optional[BBox], face_bbox: Optional[BBox]) -> Tensor:
    """L1 + D-SSIM on the hand crop and the hand/face overlap crop, averaged over non-empty crops"""
    _check_pair(render, target)
    height, width = render.shape[:2]
    zero = render.new_zeros(())
    if hand_bbox is None or bbox_is_empty(hand_bbox):
        return zero
    _check_bbox(hand_bbox, height, width)

    boxes = [tuple(hand_bbox)]
    if face_bbox is not None and not bbox_is_empty(face_bbox):
        _check_bbox(face_bbox, height, width)
        overlap = bbox_intersection(hand_bbox, face_bbox)
        if not bbox_is_empty(overlap):
            boxes.append(overlap)

    losses = []
    for box in boxes:
        a, b = _crop(render, box), _crop(target.to(render.dtype), box)
        losses.append(l1_loss(a, b) + dssim(a, b))
    return torch.stack(losses).mean()


# ================================
# TOTAL
# ================================

def total_loss(terms: LossTerms, weights: LossWeights) -> Tensor:
    """(1 - lam) L1 + lam L_dssim + a L_s + b L_mu + c L_patch"""
    return ((1.0 - weights.lam) * terms.l1
            + weights.lam * terms.dssim
            + weights.a * terms.scale_reg
            + weights.b * terms.position_reg
            + weights.c * terms.patch)
