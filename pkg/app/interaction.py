# app/interaction.py - Hand-face contact: collision resolution, deformation features, interaction offsets
import math
import logging
from typing import Optional

import torch
from torch import nn, Tensor

from app.dynamics import OffsetNet, posenc, posenc_dim
from app.gaussians import activate_parameters
from app.models import DeformationField, GaussianOffsets, GaussianSet, PoseState, TriangleMesh
from app.utils import ContractViolation

logger = logging.getLogger(__name__)

PENETRATION_TOL = 1e-4
CONTACT_MARGIN = 2e-5  # projected vertices land this far outside the hand surface
RELAXATION = 0.5
STIFFNESS_PERCENTILE = 0.95


# ================================
# GEOMETRY QUERIES
# ================================

def winding_number(points: Tensor, mesh: TriangleMesh) -> Tensor:
    """Generalized winding number of a closed mesh at each point (~1 inside, ~0 outside)"""
    tri = mesh.triangles().to(points.dtype)
    a = tri[None, :, 0] - points[:, None]
    b = tri[None, :, 1] - points[:, None]
    c = tri[None, :, 2] - points[:, None]
    la, lb, lc = a.norm(dim=-1), b.norm(dim=-1), c.norm(dim=-1)
    det = (a * torch.linalg.cross(b, c)).sum(-1)
    denom = la * lb * lc + (a * b).sum(-1) * lc + (b * c).sum(-1) * la + (c * a).sum(-1) * lb
    solid_angle = 2.0 * torch.atan2(det, denom)
    return (solid_angle.sum(dim=1) / (4.0 * math.pi)).abs()


def _safe_div(num: Tensor, den: Tensor) -> Tensor:
    return num / torch.where(den == 0, torch.ones_like(den), den)


def closest_point_on_triangles(points: Tensor, triangles: Tensor) -> Tensor:
    """(P, 3) points x (T, 3, 3) triangles -> (P, T, 3) closest points, by Voronoi region"""
    p = points[:, None, :]
    a, b, c = triangles[None, :, 0], triangles[None, :, 1], triangles[None, :, 2]
    ab, ac = b - a, c - a
    dot = lambda u, v: (u * v).sum(-1)

    ap = p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    denom = _safe_div(torch.ones_like(va), va + vb + vc)
    result = a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None]

    # Overwrite from the lowest-priority region up
    w_bc = _safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    result = torch.where(in_bc[..., None], b + (c - b) * w_bc[..., None], result)

    w_ac = _safe_div(d2, d2 - d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result = torch.where(in_ac[..., None], a + ac * w_ac[..., None], result)

    in_c = (d6 >= 0) & (d5 <= d6)
    result = torch.where(in_c[..., None], c.expand_as(result), result)

    v_ab = _safe_div(d1, d1 - d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result = torch.where(in_ab[..., None], a + ab * v_ab[..., None], result)

    in_b = (d3 >= 0) & (d4 <= d3)
    result = torch.where(in_b[..., None], b.expand_as(result), result)

    in_a = (d1 <= 0) & (d2 <= 0)
    result = torch.where(in_a[..., None], a.expand_as(result), result)
    return result


def closest_surface_point(points: Tensor, mesh: TriangleMesh):
    """Nearest point on the mesh surface and its distance, per query point"""
    candidates = closest_point_on_triangles(points, mesh.triangles().to(points.dtype))
    dist = (candidates - points[:, None, :]).norm(dim=-1)
    best = dist.argmin(dim=1)
    rows = torch.arange(points.shape[0])
    return candidates[rows, best], dist[rows, best]


# ================================
# COLLISION RESOLUTION
# ================================

def compute_stiffness(face: TriangleMesh, skull_proxy: TriangleMesh) -> Tensor:
    """clamp(1 - dist / d_soft, 0, 1), d_soft the 95th-percentile skin-skull distance"""
    _, dist = closest_surface_point(face.vertices, skull_proxy)
    d_soft = torch.quantile(dist, STIFFNESS_PERCENTILE)
    if d_soft <= 0:
        return torch.ones_like(dist)
    return torch.clamp(1.0 - dist / d_soft, 0.0, 1.0)


def _project_out(x: Tensor, hand: TriangleMesh, movable: Tensor):
    """Move movable vertices that lie inside the hand onto its surface"""
    inside = (winding_number(x, hand) > 0.5) & movable
    if not inside.any():
        return x, inside
    idx = torch.nonzero(inside).squeeze(-1)
    surface, dist = closest_surface_point(x[idx], hand)
    direction = (surface - x[idx]) / dist.clamp(min=1e-12)[:, None]
    x = x.clone()
    x[idx] = surface + CONTACT_MARGIN * direction
    return x, inside


def pbd_resolve_collisions(face: TriangleMesh, hand: TriangleMesh, stiffness: Tensor,
                           iters: int = 10) -> DeformationField:
    """
    Push face vertices out of the hand with position-based dynamics.

    Constraints are hard non-penetration for movable vertices (stiffness < 1)
    and one-ring edge-length preservation weighted by 1 - stiffness, solved
    with Jacobi iterations. Stiffness-1 vertices are pinned. The hand is
    rigid. Non-convergence returns the best-effort field with converged=False.
    """
    if iters < 1:
        raise ContractViolation("iters must be >= 1")
    if stiffness.shape[0] != face.num_vertices:
        raise ContractViolation("stiffness must have one value per face vertex")

    with torch.no_grad():
        rest = face.vertices.detach()
        dtype = rest.dtype
        inv_mass = (1.0 - stiffness.to(dtype)).clamp(0.0, 1.0)
        movable = inv_mass > 0

        initially_inside = winding_number(rest, hand) > 0.5
        if not initially_inside.any():
            return DeformationField.zeros(face.num_vertices, dtype)

        _, depth = closest_surface_point(rest[initially_inside], hand)
        max_penetration = float(depth.max())

        edges = face.edges()
        i, j = edges[:, 0], edges[:, 1]
        rest_length = (rest[j] - rest[i]).norm(dim=-1)
        w_i, w_j = inv_mass[i], inv_mass[j]
        w_sum = w_i + w_j
        active = w_sum > 0

        x = rest.clone()
        contact = torch.zeros(face.num_vertices, dtype=torch.bool)
        for _ in range(iters):
            x, hit = _project_out(x, hand, movable)
            contact |= hit

            d = x[j] - x[i]
            length = d.norm(dim=-1).clamp(min=1e-12)
            violation = torch.where(active, length - rest_length, torch.zeros_like(length))
            n = d / length[:, None]
            scale = _safe_div(violation, w_sum)
            delta = torch.zeros_like(x)
            delta.index_add_(0, i, (w_i * scale)[:, None] * n)
            delta.index_add_(0, j, -(w_j * scale)[:, None] * n)
            count = torch.zeros(face.num_vertices, dtype=dtype)
            count.index_add_(0, i, active.to(dtype))
            count.index_add_(0, j, active.to(dtype))
            x = x + RELAXATION * delta / count.clamp(min=1.0)[:, None]

            x, hit = _project_out(x, hand, movable)
            contact |= hit

        still_inside = winding_number(x, hand) > 0.5
        pinned_penetrating = int((still_inside & ~movable).sum())
        converged = not bool((still_inside & movable).any())

    if not converged:
        logger.warning(f"⚠️ PBD did not converge after {iters} iterations: "
                       f"{int((still_inside & movable).sum())} vertices remain inside the hand")
    if pinned_penetrating:
        logger.info(f"📌 {pinned_penetrating} rigid vertices left inside the hand")

    return DeformationField(
        vertex_offsets=x - rest,
        contact_mask=contact,
        converged=converged,
        max_penetration=max_penetration,
        pinned_penetrating=pinned_penetrating,
    )


def aggregate_facet_offsets(field: DeformationField, mesh: TriangleMesh) -> Tensor:
    """d_j: mean of the facet's three vertex offsets"""
    if field.vertex_offsets.shape != (mesh.num_vertices, 3):
        raise ContractViolation("deformation field does not match the mesh")
    return field.vertex_offsets[mesh.faces].mean(dim=1)


# ================================
# SAMPLING AND GEOMETRIC FEATURE
# ================================

def sample_representative_gaussians(gaussians: GaussianSet, region_mask: Tensor,
                                    generator: Optional[torch.Generator] = None,
                                    num_draws: int = 1) -> Tensor:
    """
    One Gaussian per masked facet, drawn with probability o_i * |s_i|.

    Returns (F_kept,) indices, or (F_kept, num_draws) when num_draws > 1.
    A facet whose weights sum to zero is sampled uniformly; a facet left
    without Gaussians by pruning is skipped.
    """
    with torch.no_grad():
        act = activate_parameters(gaussians)
        weight = act.opacity * act.scale.norm(dim=-1)
        facets = torch.nonzero(region_mask).squeeze(-1)
        picks = []
        for facet in facets.tolist():
            members = torch.nonzero(gaussians.parent_face == facet).squeeze(-1)
            if len(members) == 0:
                continue
            w = weight[members]
            if not (w.sum() > 0):
                w = torch.ones_like(w)
            choice = torch.multinomial(w, num_draws, replacement=True, generator=generator)
            picks.append(members[choice])

    if not picks:
        return torch.zeros((0,) if num_draws == 1 else (0, num_draws), dtype=torch.long)
    out = torch.stack(picks)
    return out[:, 0] if num_draws == 1 else out


class PointEncoder(nn.Module):
    """Shared point-wise MLP and global max-pool: (M, 7) points -> (feat_dim,) feature"""

    def __init__(self, in_channels: int = 7, feat_dim: int = 1024):
        super().__init__()
        self.feat_dim = feat_dim
        self.mlp = nn.Sequential(
            nn.Conv1d(in_channels, 64, kernel_size=1),
            nn.ReLU(),
            nn.Conv1d(64, 128, kernel_size=1),
            nn.ReLU(),
            nn.Conv1d(128, feat_dim, kernel_size=1),
            nn.ReLU(),
        )

    def forward(self, points: Tensor) -> Tensor:
        feats = self.mlp(points.T.unsqueeze(0))
        return feats.max(dim=2).values[0]


def build_point_cloud(hand_points: Tensor, face_points: Tensor, face_offsets: Tensor) -> Tensor:
    """Stack [position, offset, part flag] rows; hand rows carry zero offsets and flag 1"""
    hand = torch.cat([
        hand_points, torch.zeros_like(hand_points), torch.ones_like(hand_points[:, :1])
    ], dim=-1)
    face = torch.cat([
        face_points, face_offsets.to(face_points.dtype), torch.zeros_like(face_points[:, :1])
    ], dim=-1)
    return torch.cat([hand, face], dim=0)


def extract_geometric_feature(encoder: PointEncoder, cloud: Tensor) -> Tensor:
    if cloud.ndim != 2 or cloud.shape[0] < 1:
        raise ContractViolation("geometric feature needs at least one point")
    return encoder(cloud)


# ================================
# CONTACT WEIGHTING AND INTERACTION NETWORK
# ================================

def contact_weight(means: Tensor, hand_vertices: Tensor, d_max: float = 0.05) -> Tensor:
    """w = (cos(pi * d / d_max) + 1) / 2 for d < d_max, else 0; d = nearest hand-vertex distance"""
    if hand_vertices.shape[0] == 0:
        raise ContractViolation("hand_vertices is empty")
    d = torch.cdist(means, hand_vertices.to(means.dtype),
                    compute_mode="donot_use_mm_for_euclid_dist").min(dim=1).values
    w = 0.5 * (torch.cos(math.pi * d / d_max) + 1.0)
    return torch.where(d < d_max, w, torch.zeros_like(w))


class InteractionNet(OffsetNet):
    """(gamma(mu_cano), gamma(d_j), F, theta_hand, theta_face, psi, t_rel, r_rel) -> all five offsets"""
    HEADS = {"d_position": 3, "d_scale": 3, "d_rotation": 4, "d_color": 3, "d_opacity": 1}

    def __init__(self, theta_hand_dim: int, theta_face_dim: int, expression_dim: int,
                 geo_feature_dim: int = 1024, n_freq: int = 6, n_freq_deform: int = 4,
                 hidden: int = 256, depth: int = 6):
        self.n_freq = n_freq
        self.n_freq_deform = n_freq_deform
        self.geo_feature_dim = geo_feature_dim
        in_dim = (posenc_dim(n_freq) + posenc_dim(n_freq_deform) + geo_feature_dim
                  + theta_hand_dim + theta_face_dim + expression_dim + 3 + 4)
        super().__init__(in_dim, hidden, depth)


def deformed_region(gaussians: GaussianSet, facet_offsets: Tensor, tau_def: float = 1e-4) -> Tensor:
    """Per-Gaussian flag: parent facet moved by more than tau_def"""
    return facet_offsets.norm(dim=-1)[gaussians.parent_face] > tau_def


def interaction_offsets(net: InteractionNet, gaussians: GaussianSet, pose: PoseState,
                        facet_offsets: Tensor, feature: Tensor, weights: Tensor,
                        tau_def: float = 1e-4) -> GaussianOffsets:
    """Raw network offsets on deformed facets, scaled by the contact weight; zero elsewhere"""
    num = len(gaussians)
    dtype = gaussians.local_position.dtype
    active = deformed_region(gaussians, facet_offsets, tau_def)
    idx = torch.nonzero(active).squeeze(-1)
    if len(idx) == 0:
        return GaussianOffsets()

    count = len(idx)
    expand = lambda v: v.to(dtype).reshape(1, -1).expand(count, -1)
    x = torch.cat([
        posenc(gaussians.canonical_position[idx], net.n_freq),
        posenc(facet_offsets[gaussians.parent_face[idx]].to(dtype), net.n_freq_deform),
        expand(feature),
        expand(pose.theta_hand),
        expand(pose.theta_face),
        expand(pose.expression),
        expand(pose.t_rel),
        expand(pose.r_rel),
    ], dim=-1)
    raw = net(x)

    out = {}
    for name, value in raw.items():
        full = torch.zeros(num, value.shape[-1], dtype=value.dtype).index_copy(0, idx, value)
        out[name] = full.squeeze(-1) if name == "d_opacity" else full
    return GaussianOffsets(**out).scaled(weights.to(dtype))
