# app/rasterizer.py - EWA projection and tile-based front-to-back alpha compositing
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from app.config import settings
from app.models import Camera, RenderOutput, WorldGaussians
from app.utils import ContractViolation

logger = logging.getLogger(__name__)

Z_NEAR = 0.01
BLUR = 0.3  # px^2 anti-alias floor
T_MIN = 1e-4  # compositing stops once transmittance falls below this
TAU_VIS = 1e-3  # contribution needed to count as visible
FOOTPRINT = 9.0  # squared Mahalanobis radius (3 sigma)


@dataclass
class Projection:
    mean2d: Tensor  # (N, 2)
    cov2d: Tensor  # (N, 2, 2)
    depth: Tensor  # (N,)
    valid: Tensor  # (N,) in front of the near plane


@dataclass
class RenderState:
    image: Tensor
    inputs: dict
    means2d: Tensor
    token: int
    consumed: bool = False


@dataclass
class RenderGradients:
    means: Tensor
    covariances: Tensor
    colors: Tensor
    opacities: Tensor
    means2d: Tensor
    viewspace_norm: Tensor  # NDC-scaled, for densification statistics


_render_counter = 0


# ================================
# PROJECTION
# ================================

def project(means: Tensor, covariances: Tensor, camera: Camera) -> Projection:
    """First-order (EWA) perspective projection of world Gaussians"""
    W = camera.rotation.to(means.dtype)
    t = camera.translation.to(means.dtype)
    p = means @ W.T + t
    x, y, z = p.unbind(-1)
    valid = z > Z_NEAR
    z_safe = torch.where(valid, z, torch.ones_like(z))

    u = camera.fx * x / z_safe + camera.cx
    v = camera.fy * y / z_safe + camera.cy
    mean2d = torch.stack([u, v], dim=-1)

    zeros = torch.zeros_like(z_safe)
    J = torch.stack([
        camera.fx / z_safe, zeros, -camera.fx * x / z_safe ** 2,
        zeros, camera.fy / z_safe, -camera.fy * y / z_safe ** 2,
    ], dim=-1).reshape(-1, 2, 3)
    T = J @ W
    cov2d = T @ covariances @ T.transpose(-1, -2)
    cov2d = cov2d + BLUR * torch.eye(2, dtype=means.dtype)
    return Projection(mean2d=mean2d, cov2d=cov2d, depth=z, valid=valid)


def conic_and_radius(cov2d: Tensor):
    """Inverse 2D covariance and 3-sigma pixel radius"""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    mid = 0.5 * (a + c)
    lambda_max = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
    radius = torch.ceil(3.0 * torch.sqrt(lambda_max.detach()))
    return conic, radius


def _alpha(pixels: Tensor, mean2d: Tensor, conic: Tensor, opacity: Tensor) -> Tensor:
    """(P, K) alpha = o * G'(x), zero outside the 3-sigma footprint"""
    d = pixels[:, None, :] - mean2d[None, :, :]
    dx, dy = d[..., 0], d[..., 1]
    mahalanobis = conic[None, :, 0] * dx * dx + 2 * conic[None, :, 1] * dx * dy + conic[None, :, 2] * dy * dy
    inside = mahalanobis <= FOOTPRINT
    g = torch.exp(-0.5 * torch.where(inside, mahalanobis, torch.zeros_like(mahalanobis)))
    return torch.where(inside, opacity[None, :] * g, torch.zeros_like(g))


def _pixel_grid(x0: int, x1: int, y0: int, y1: int, dtype: torch.dtype) -> Tensor:
    ys, xs = torch.meshgrid(torch.arange(y0, y1, dtype=dtype), torch.arange(x0, x1, dtype=dtype), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def _composite(alpha: Tensor, colors: Tensor):
    """Front-to-back blending of depth-sorted columns; returns weights (P, K)"""
    survive = torch.cumprod(1.0 - alpha, dim=1)
    transmittance = torch.cat([torch.ones_like(alpha[:, :1]), survive[:, :-1]], dim=1)
    active = transmittance >= T_MIN
    weights = torch.where(active, alpha * transmittance, torch.zeros_like(alpha))
    return weights


# ================================
# RENDERING
# ================================

def render(gaussians: WorldGaussians, camera: Camera, background: Optional[Tensor] = None,
           tile_size: Optional[int] = None, track_gradients: bool = False) -> RenderOutput:
    """Tile-based render; a Gaussian is assigned to every tile its 3-sigma box touches"""
    global _render_counter
    tile_size = tile_size or settings.tile_size
    dtype = gaussians.means.dtype
    H, W = camera.height, camera.width
    num = len(gaussians)
    bg = background if background is not None else torch.zeros(3, dtype=dtype)

    inputs = {
        "means": gaussians.means,
        "covariances": gaussians.covariances,
        "colors": gaussians.colors,
        "opacities": gaussians.opacities,
    }
    if track_gradients:
        inputs = {k: (v if v.requires_grad else v.detach().requires_grad_(True)) for k, v in inputs.items()}

    proj = project(inputs["means"], inputs["covariances"], camera)
    means2d = proj.mean2d
    if means2d.requires_grad:
        means2d.retain_grad()
    conic, radius = conic_and_radius(proj.cov2d)
    radius = torch.where(proj.valid, radius, torch.zeros_like(radius))

    # Stable sort: depth ties resolved by Gaussian index
    order = torch.sort(proj.depth.detach(), stable=True).indices
    order = order[proj.valid[order]]

    image = torch.zeros(H, W, 3, dtype=dtype)
    alpha_map = torch.zeros(H, W, dtype=dtype)
    contributions = torch.zeros(num, dtype=dtype)

    if len(order):
        cx = means2d.detach()[:, 0]
        cy = means2d.detach()[:, 1]
        rect_x0 = torch.clamp(torch.floor((cx - radius) / tile_size), min=0)
        rect_x1 = torch.clamp(torch.floor((cx + radius) / tile_size), max=math.ceil(W / tile_size) - 1)
        rect_y0 = torch.clamp(torch.floor((cy - radius) / tile_size), min=0)
        rect_y1 = torch.clamp(torch.floor((cy + radius) / tile_size), max=math.ceil(H / tile_size) - 1)

        rows, cols = [], []
        for ty in range(math.ceil(H / tile_size)):
            for tx in range(math.ceil(W / tile_size)):
                hit = (rect_x0[order] <= tx) & (rect_x1[order] >= tx) & (rect_y0[order] <= ty) & (rect_y1[order] >= ty)
                tile_ids = order[hit]
                y0, x0 = ty * tile_size, tx * tile_size
                y1, x1 = min(y0 + tile_size, H), min(x0 + tile_size, W)
                if len(tile_ids) == 0:
                    rows.append(bg.expand((y1 - y0) * (x1 - x0), 3))
                    cols.append(torch.zeros((y1 - y0) * (x1 - x0), dtype=dtype))
                    continue
                pixels = _pixel_grid(x0, x1, y0, y1, dtype)
                alpha = _alpha(pixels, means2d[tile_ids], conic[tile_ids], inputs["opacities"][tile_ids])
                weights = _composite(alpha, inputs["colors"][tile_ids])
                covered = weights.sum(dim=1)
                color = weights @ inputs["colors"][tile_ids] + (1.0 - covered)[:, None] * bg
                rows.append(color)
                cols.append(covered)
                contributions = contributions.index_add(0, tile_ids, weights.sum(dim=0))

        # Reassemble tiles in raster order
        tiles_x = math.ceil(W / tile_size)
        for i, (color, covered) in enumerate(zip(rows, cols)):
            ty, tx = divmod(i, tiles_x)
            y0, x0 = ty * tile_size, tx * tile_size
            y1, x1 = min(y0 + tile_size, H), min(x0 + tile_size, W)
            image = image.index_put(
                _tile_index(y0, y1, x0, x1), color.reshape(y1 - y0, x1 - x0, 3).reshape(-1, 3))
            alpha_map = alpha_map.index_put(
                _tile_index(y0, y1, x0, x1), covered.reshape(-1))
    else:
        image = bg.expand(H, W, 3).clone()

    visibility = contributions.detach() > TAU_VIS
    _render_counter += 1
    state = None
    if track_gradients or image.requires_grad:
        state = RenderState(image=image, inputs=inputs, means2d=means2d, token=_render_counter)

    return RenderOutput(
        image=image,
        alpha=alpha_map,
        contributions=contributions,
        visibility=visibility,
        means2d=means2d,
        depths=proj.depth,
        radii=radius,
        state=state,
    )


def _tile_index(y0: int, y1: int, x0: int, x1: int):
    ys, xs = torch.meshgrid(torch.arange(y0, y1), torch.arange(x0, x1), indexing="ij")
    return ys.reshape(-1), xs.reshape(-1)


def render_reference(gaussians: WorldGaussians, camera: Camera, background: Optional[Tensor] = None) -> Tensor:
    """Brute-force oracle: every pixel blends every Gaussian in exact depth order, no tiling"""
    dtype = gaussians.means.dtype
    H, W = camera.height, camera.width
    bg = background if background is not None else torch.zeros(3, dtype=dtype)
    proj = project(gaussians.means, gaussians.covariances, camera)
    conic, _ = conic_and_radius(proj.cov2d)
    order = torch.sort(proj.depth, stable=True).indices
    order = order[proj.valid[order]]

    pixels = _pixel_grid(0, W, 0, H, dtype)
    color = torch.zeros(H * W, 3, dtype=dtype)
    T = torch.ones(H * W, dtype=dtype)
    for i in order.tolist():
        alpha = _alpha(pixels, proj.mean2d[i:i + 1], conic[i:i + 1], gaussians.opacities[i:i + 1])[:, 0]
        active = T >= T_MIN
        w = torch.where(active, alpha * T, torch.zeros_like(T))
        color = color + w[:, None] * gaussians.colors[i]
        T = torch.where(active, T * (1.0 - alpha), T)
    color = color + T[:, None] * bg
    return color.reshape(H, W, 3)


def render_backward(out_grad: Tensor, state: RenderState) -> RenderGradients:
    """Gradients of <out_grad, image> w.r.t. world Gaussian parameters"""
    if state is None or not isinstance(state, RenderState):
        raise ContractViolation("render_backward needs the state of a tracked render")
    if tuple(out_grad.shape) != tuple(state.image.shape):
        raise ContractViolation(f"gradient shape {tuple(out_grad.shape)} does not match image "
                                f"{tuple(state.image.shape)}")
    if state.consumed:
        raise ContractViolation(f"render state {state.token} was already consumed")

    names = ["means", "covariances", "colors", "opacities"]
    targets = [state.inputs[n] for n in names] + [state.means2d]
    if not state.image.requires_grad:
        grads = [torch.zeros_like(t) for t in targets]
    else:
        grads = torch.autograd.grad(state.image, targets, grad_outputs=out_grad.to(state.image.dtype),
                                    retain_graph=True, allow_unused=True)
        grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, targets)]
    state.consumed = True

    H, W = state.image.shape[:2]
    scale = grads[4].new_tensor([W * 0.5, H * 0.5])
    return RenderGradients(
        means=grads[0],
        covariances=grads[1],
        colors=grads[2],
        opacities=grads[3],
        means2d=grads[4],
        viewspace_norm=(grads[4] * scale).norm(dim=-1),
    )
