# app/models.py - Domain containers for meshes, Gaussians, poses, cameras and renders
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Dict, List

import torch
from torch import Tensor

from app.utils import ContractViolation, quat_conjugate, quat_multiply, quat_to_rotmat


# ================================
# MESH MODELS
# ================================

@dataclass
class TriangleMesh:
    vertices: Tensor  # (V, 3) world units
    faces: Tensor  # (F, 3) vertex indices
    skinning: Optional[Dict] = None  # opaque rig metadata

    def __post_init__(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ContractViolation(f"vertices must be (V, 3), got {tuple(self.vertices.shape)}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ContractViolation(f"faces must be (F, 3), got {tuple(self.faces.shape)}")
        if self.faces.numel() and (self.faces.min() < 0 or self.faces.max() >= self.vertices.shape[0]):
            raise ContractViolation("faces index vertices out of range")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def triangles(self) -> Tensor:
        """(F, 3, 3) corner positions"""
        return self.vertices[self.faces]

    def edges(self) -> Tensor:
        """(E, 2) unique undirected edges"""
        e = torch.cat([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]], dim=0)
        e = torch.sort(e, dim=1).values
        return torch.unique(e, dim=0)

    def with_vertices(self, vertices: Tensor) -> "TriangleMesh":
        return TriangleMesh(vertices=vertices, faces=self.faces, skinning=self.skinning)


@dataclass
class LocalFrameSet:
    rotation: Tensor  # (F, 3, 3), columns (e0, n x e0, n)
    origin: Tensor  # (F, 3) facet centroid
    scale: Tensor  # (F,) sqrt(2 * area)

    def __len__(self) -> int:
        return self.origin.shape[0]


# ================================
# GAUSSIAN MODELS
# ================================

@dataclass
class GaussianSet:
    local_position: Tensor  # (N, 3) in parent-facet frame
    log_scale: Tensor  # (N, 3)
    rotation: Tensor  # (N, 4) unit quaternion (w, x, y, z), local frame
    color_raw: Tensor  # (N, 3) pre-sigmoid RGB
    opacity_logit: Tensor  # (N,)
    parent_face: Tensor  # (N,) long
    point_feature: Tensor  # (N, P)
    canonical_position: Tensor  # (N, 3) world position in the canonical frame

    TRAINABLE = ("local_position", "log_scale", "rotation", "color_raw", "opacity_logit", "point_feature")

    def __len__(self) -> int:
        return self.local_position.shape[0]

    def tensors(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def trainable(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.TRAINABLE}

    def select(self, index: Tensor) -> "GaussianSet":
        return GaussianSet(**{name: t[index] for name, t in self.tensors().items()})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(**{
            name: torch.cat([t, getattr(other, name)], dim=0) for name, t in self.tensors().items()
        })

    def detach(self) -> "GaussianSet":
        return GaussianSet(**{name: t.detach().clone() for name, t in self.tensors().items()})

    def requires_grad_(self, flag: bool = True) -> "GaussianSet":
        for name in self.TRAINABLE:
            getattr(self, name).requires_grad_(flag)
        return self


@dataclass
class GaussianOffsets:
    """Additive per-Gaussian offsets; None means zero"""
    d_position: Optional[Tensor] = None  # (N, 3) local units
    d_scale: Optional[Tensor] = None  # (N, 3) activated local scale
    d_rotation: Optional[Tensor] = None  # (N, 4)
    d_color: Optional[Tensor] = None  # (N, 3)
    d_opacity: Optional[Tensor] = None  # (N,)

    NAMES = ("d_position", "d_scale", "d_rotation", "d_color", "d_opacity")

    def scaled(self, weights: Tensor) -> "GaussianOffsets":
        """Multiply every offset by a per-Gaussian weight (N,)"""
        out = {}
        for name in self.NAMES:
            value = getattr(self, name)
            if value is None:
                out[name] = None
            elif value.ndim == 1:
                out[name] = value * weights
            else:
                out[name] = value * weights[:, None]
        return GaussianOffsets(**out)

    def __add__(self, other: "GaussianOffsets") -> "GaussianOffsets":
        out = {}
        for name in self.NAMES:
            a, b = getattr(self, name), getattr(other, name)
            out[name] = a if b is None else (b if a is None else a + b)
        return GaussianOffsets(**out)

    def is_empty(self) -> bool:
        return all(getattr(self, name) is None for name in self.NAMES)


@dataclass
class WorldGaussians:
    means: Tensor  # (N, 3)
    scales: Tensor  # (N, 3) world units
    rotations: Tensor  # (N, 4) world quaternion
    covariances: Tensor  # (N, 3, 3)
    colors: Tensor  # (N, 3) in [0, 1]
    opacities: Tensor  # (N,) in [0, 1]

    def __len__(self) -> int:
        return self.means.shape[0]

    def concat(self, other: "WorldGaussians") -> "WorldGaussians":
        return WorldGaussians(**{
            f.name: torch.cat([getattr(self, f.name), getattr(other, f.name)], dim=0) for f in fields(self)
        })

    @classmethod
    def empty(cls, dtype: torch.dtype = torch.float32) -> "WorldGaussians":
        return cls(
            means=torch.zeros(0, 3, dtype=dtype),
            scales=torch.zeros(0, 3, dtype=dtype),
            rotations=torch.zeros(0, 4, dtype=dtype),
            covariances=torch.zeros(0, 3, 3, dtype=dtype),
            colors=torch.zeros(0, 3, dtype=dtype),
            opacities=torch.zeros(0, dtype=dtype),
        )


# ================================
# POSE MODELS
# ================================

@dataclass
class PoseState:
    theta_hand: Tensor  # per-joint angles of the finger rig
    theta_face: Tensor  # jaw articulation
    expression: Tensor  # psi, radial-bump coefficients
    r_hand: Tensor  # (4,) quaternion
    t_hand: Tensor  # (3,)
    r_face: Tensor  # (4,)
    t_face: Tensor  # (3,)
    r_rel: Tensor  # (4,) conj(r_face) * r_hand
    t_rel: Tensor  # (3,) R_face^T (t_hand - t_face)
    beta_hand: Tensor = field(default_factory=lambda: torch.zeros(1, dtype=torch.float64))
    beta_face: Tensor = field(default_factory=lambda: torch.zeros(1, dtype=torch.float64))

    @staticmethod
    def relative(r_hand: Tensor, t_hand: Tensor, r_face: Tensor, t_face: Tensor):
        r_rel = quat_multiply(quat_conjugate(r_face), r_hand)
        t_rel = quat_to_rotmat(r_face).T @ (t_hand - t_face)
        return r_rel, t_rel

    @classmethod
    def build(cls, theta_hand, theta_face, expression, r_hand, t_hand, r_face, t_face,
              beta_hand=None, beta_face=None) -> "PoseState":
        as_t = lambda v: torch.as_tensor(v, dtype=torch.float64)
        r_hand, t_hand, r_face, t_face = as_t(r_hand), as_t(t_hand), as_t(r_face), as_t(t_face)
        r_rel, t_rel = cls.relative(r_hand, t_hand, r_face, t_face)
        return cls(
            theta_hand=as_t(theta_hand), theta_face=as_t(theta_face), expression=as_t(expression),
            r_hand=r_hand, t_hand=t_hand, r_face=r_face, t_face=t_face, r_rel=r_rel, t_rel=t_rel,
            beta_hand=as_t(beta_hand if beta_hand is not None else [0.0]),
            beta_face=as_t(beta_face if beta_face is not None else [0.0]),
        )

    def to_dict(self) -> Dict[str, List[float]]:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "PoseState":
        names = {f.name for f in fields(cls)}
        missing = names - set(data)
        if missing:
            raise ContractViolation(f"pose is missing fields: {sorted(missing)}")
        return cls(**{name: torch.tensor(data[name], dtype=torch.float64) for name in names})

    def with_shape(self, beta_hand: Tensor, beta_face: Tensor) -> "PoseState":
        return replace(self, beta_hand=beta_hand.clone(), beta_face=beta_face.clone())


# ================================
# INTERACTION MODELS
# ================================

@dataclass
class DeformationField:
    vertex_offsets: Tensor  # (V, 3) face mesh offsets, world units
    contact_mask: Optional[Tensor] = None  # (V,) vertices that were projected
    converged: bool = True
    max_penetration: float = 0.0
    pinned_penetrating: int = 0  # stiffness-1 vertices left inside the hand

    @classmethod
    def zeros(cls, num_vertices: int, dtype: torch.dtype = torch.float64) -> "DeformationField":
        return cls(
            vertex_offsets=torch.zeros(num_vertices, 3, dtype=dtype),
            contact_mask=torch.zeros(num_vertices, dtype=torch.bool),
        )


# ================================
# CAMERA AND RENDER MODELS
# ================================

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: Tensor  # (4, 4) rigid, OpenCV axes (x right, y down, z forward)
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ContractViolation(f"image size {self.width}x{self.height} is below 16x16")
        if tuple(self.world_to_camera.shape) != (4, 4):
            raise ContractViolation("world_to_camera must be 4x4")

    @property
    def rotation(self) -> Tensor:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> Tensor:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> Tensor:
        return -self.rotation.T @ self.translation

    def to(self, dtype: torch.dtype) -> "Camera":
        return replace(self, world_to_camera=self.world_to_camera.to(dtype))


@dataclass
class RenderOutput:
    image: Tensor  # (H, W, 3)
    alpha: Tensor  # (H, W)
    contributions: Tensor  # (N,) sum of compositing weights over the image
    visibility: Tensor  # (N,) bool
    means2d: Tensor  # (N, 2) pixel coordinates; grad retained when tracked
    depths: Tensor  # (N,)
    radii: Tensor  # (N,) 3-sigma pixel radius, 0 when culled
    state: Optional[object] = None  # RenderState for render_backward

    def viewspace_grad_norm(self) -> Tensor:
        """NDC-scaled view-space positional gradient magnitude per Gaussian"""
        grad = self.means2d.grad
        if grad is None:
            return torch.zeros(self.means2d.shape[0], dtype=self.means2d.dtype)
        height, width = self.image.shape[:2]
        scale = grad.new_tensor([width * 0.5, height * 0.5])
        return (grad * scale).norm(dim=-1)
