# app/scene.py - Synthetic proxy rigs, reference mesh rasterizer and dataset I/O
import json
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, model_validator
from torch import Tensor

from app.interaction import compute_stiffness, pbd_resolve_collisions
from app.models import Camera, DeformationField, PoseState, TriangleMesh
from app.utils import ConfigError, ContractViolation, DatasetError, make_generator, quat_normalize, \
    quat_to_rotmat, rotation_about_axis, rotmat_to_quat

logger = logging.getLogger(__name__)

SCENE_MAGIC = "GSAV-SCENE"
MESH_MAGIC = "GSAV-MESH"
CAMERA_MAGIC = "GSAV-CAMERA"
FORMAT_VERSION = 1

LIGHT_DIRECTION = (0.35, 0.55, 0.75)
AMBIENT = 0.35
Z_NEAR = 0.01
CONTACT_DIRECTION = (0.75, -0.15, 0.65)  # face-local, where the finger touches the cheek


class SceneSpec(BaseModel):
    """Synthetic generation request"""
    name: str = "synthetic"
    num_frames: int = Field(12, ge=1)
    contact_frames: int = Field(4, ge=0)
    num_views: int = Field(8, ge=1)
    width: int = Field(96, ge=16)
    height: int = Field(96, ge=16)
    seed: int = 0

    face_rings: int = Field(10, ge=2)
    face_sectors: int = Field(10, ge=3)
    face_radius: float = Field(0.1, gt=0.0)
    finger_sides: int = Field(8, ge=3)
    rings_per_segment: int = Field(4, ge=1)
    finger_radius: float = Field(0.01, gt=0.0)
    segment_length: float = Field(0.03, gt=0.0)

    max_depth: float = Field(0.008, ge=0.0)  # deepest fingertip push into the cheek
    d_max: float = Field(0.05, gt=0.0)
    pbd_iters: int = Field(30, ge=1)
    bulge: float = Field(0.002, ge=0.0)
    camera_distance: float = Field(0.45, gt=0.0)

    beta_hand: List[float] = [0.0]
    beta_face: List[float] = [0.0]

    @model_validator(mode="after")
    def check_phases(self) -> "SceneSpec":
        if self.contact_frames > self.num_frames:
            raise ValueError("contact_frames cannot exceed num_frames")
        return self

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        try:
            return cls.model_validate(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read scene spec {path}: {e}")
        except ValidationError as e:
            raise ConfigError(f"Invalid scene spec {path}: {e}")


# ================================
# RIGS
# ================================

def vertex_normals(vertices: Tensor, faces: Tensor) -> Tensor:
    """Area-weighted vertex normals"""
    tri = vertices[faces]
    n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = torch.zeros_like(vertices)
    for k in range(3):
        acc.index_add_(0, faces[:, k], n)
    return acc / acc.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def _rigid(vertices: Tensor, q: Tensor, t: Tensor) -> Tensor:
    return vertices @ quat_to_rotmat(q).T + t


class FaceRig:
    """Hemisphere face proxy: jaw rotation, radial-bump expressions, rigid head transform"""

    theta_dim = 1
    expression_dim = 3

    def __init__(self, rings: int = 10, sectors: int = 10, radius: float = 0.1):
        self.rings = rings
        self.sectors = sectors
        self.radius = radius
        self.faces = self._build_faces()
        self.bump_centers = torch.tensor([
            [0.62, -0.2, 0.76],
            [-0.62, -0.2, 0.76],
            [0.0, -0.55, 0.83],
        ], dtype=torch.float64)
        self.bump_centers = self.bump_centers / self.bump_centers.norm(dim=-1, keepdim=True)

    @property
    def num_vertices(self) -> int:
        return 1 + self.rings * self.sectors

    def _ring(self, i: int) -> List[int]:
        return [1 + (i - 1) * self.sectors + j for j in range(self.sectors)]

    def _build_faces(self) -> Tensor:
        faces = []
        first = self._ring(1)
        for j in range(self.sectors):
            faces.append([0, first[j], first[(j + 1) % self.sectors]])
        for i in range(1, self.rings):
            inner, outer = self._ring(i), self._ring(i + 1)
            for j in range(self.sectors):
                k = (j + 1) % self.sectors
                faces.append([inner[j], outer[j], outer[k]])
                faces.append([inner[j], outer[k], inner[k]])
        return torch.tensor(faces, dtype=torch.long)

    def rest_vertices(self, beta: Optional[Tensor] = None) -> Tensor:
        radius = self.radius * (1.0 + (float(beta[0]) if beta is not None and len(beta) else 0.0))
        verts = [[0.0, 0.0, radius]]
        for i in range(1, self.rings + 1):
            phi = 0.5 * math.pi * i / self.rings
            for j in range(self.sectors):
                alpha = 2.0 * math.pi * j / self.sectors
                verts.append([radius * math.sin(phi) * math.cos(alpha),
                              radius * math.sin(phi) * math.sin(alpha),
                              radius * math.cos(phi)])
        return torch.tensor(verts, dtype=torch.float64)

    def local_vertices(self, pose: PoseState) -> Tensor:
        """Face-local vertices after jaw and expression"""
        rest = self.rest_vertices(pose.beta_face)
        radius = rest[0, 2]
        direction = rest / rest.norm(dim=-1, keepdim=True)

        # Expression: Gaussian bumps along the radial direction
        sq = ((direction[:, None, :] - self.bump_centers[None]) ** 2).sum(-1)
        bumps = torch.exp(-sq / (2 * 0.3 ** 2))
        psi = pose.expression.to(torch.float64)[: self.expression_dim]
        radial = 0.1 * radius * (bumps[:, : len(psi)] * psi).sum(-1)
        verts = rest + direction * radial[:, None]

        # Jaw: lower half rotates about the x axis, blended by height
        angle = float(pose.theta_face[0]) if pose.theta_face.numel() else 0.0
        blend = torch.clamp(-verts[:, 1] / radius, 0.0, 1.0) ** 2
        c, s = torch.cos(angle * blend), torch.sin(angle * blend)
        y, z = verts[:, 1], verts[:, 2]
        return torch.stack([verts[:, 0], c * y - s * z, s * y + c * z], dim=-1)

    def build(self, pose: PoseState) -> TriangleMesh:
        verts = _rigid(self.local_vertices(pose), pose.r_face, pose.t_face)
        return TriangleMesh(vertices=verts, faces=self.faces)

    def contact_point(self, pose: PoseState) -> Tuple[Tensor, Tensor]:
        """World contact point and outward normal on the cheek"""
        n = torch.tensor(CONTACT_DIRECTION, dtype=torch.float64)
        n = n / n.norm()
        radius = self.radius * (1.0 + float(pose.beta_face[0]))
        R = quat_to_rotmat(pose.r_face)
        return R @ (radius * n) + pose.t_face, R @ n

    def region_mask(self) -> Tensor:
        """Non-rigid facets: both cheeks"""
        rest = self.rest_vertices()
        centroid = rest[self.faces].mean(dim=1)
        centroid = centroid / centroid.norm(dim=-1, keepdim=True)
        cheek = torch.tensor(CONTACT_DIRECTION, dtype=torch.float64)
        cheek = cheek / cheek.norm()
        mirrored = cheek * cheek.new_tensor([-1.0, 1.0, 1.0])
        near = lambda c: (centroid - c).norm(dim=-1) < 0.6
        return near(cheek) | near(mirrored)

    def skull(self, pose: PoseState, rings: int = 6, sectors: int = 10) -> TriangleMesh:
        """Eccentric sphere inside the head; the -x cheek sits close to bone"""
        radius = 0.8 * self.radius * (1.0 + float(pose.beta_face[0]))
        center = torch.tensor([-0.15 * self.radius, 0.0, 0.0], dtype=torch.float64)
        mesh = uv_sphere(radius, rings, sectors)
        verts = _rigid(mesh.vertices + center, pose.r_face, pose.t_face)
        return TriangleMesh(vertices=verts, faces=mesh.faces)


def uv_sphere(radius: float, rings: int, sectors: int) -> TriangleMesh:
    verts = [[0.0, 0.0, radius]]
    for i in range(1, rings):
        phi = math.pi * i / rings
        for j in range(sectors):
            alpha = 2.0 * math.pi * j / sectors
            verts.append([radius * math.sin(phi) * math.cos(alpha),
                          radius * math.sin(phi) * math.sin(alpha),
                          radius * math.cos(phi)])
    verts.append([0.0, 0.0, -radius])
    bottom = len(verts) - 1
    ring = lambda i: [1 + (i - 1) * sectors + j for j in range(sectors)]

    faces = []
    for j in range(sectors):
        k = (j + 1) % sectors
        faces.append([0, ring(1)[j], ring(1)[k]])
        faces.append([bottom, ring(rings - 1)[k], ring(rings - 1)[j]])
    for i in range(1, rings - 1):
        a, b = ring(i), ring(i + 1)
        for j in range(sectors):
            k = (j + 1) % sectors
            faces.append([a[j], b[j], b[k]])
            faces.append([a[j], b[k], a[k]])
    return TriangleMesh(vertices=torch.tensor(verts, dtype=torch.float64),
                        faces=torch.tensor(faces, dtype=torch.long))


class FingerRig:
    """Closed three-segment tube; joint angles bend about the local x axis"""

    segments = 3
    theta_dim = 3

    def __init__(self, sides: int = 8, rings_per_segment: int = 4, radius: float = 0.01,
                 segment_length: float = 0.03):
        self.sides = sides
        self.rings_per_segment = rings_per_segment
        self.radius = radius
        self.segment_length = segment_length
        self.num_rings = self.segments * rings_per_segment + 1
        self.base_index = self.num_rings * sides
        self.tip_index = self.base_index + 1
        self.faces = self._build_faces()

    @property
    def num_vertices(self) -> int:
        return self.num_rings * self.sides + 2

    def _build_faces(self) -> Tensor:
        S = self.sides
        idx = lambda r, j: r * S + (j % S)
        faces = []
        for r in range(self.num_rings - 1):
            for j in range(S):
                faces.append([idx(r, j), idx(r, j + 1), idx(r + 1, j + 1)])
                faces.append([idx(r, j), idx(r + 1, j + 1), idx(r + 1, j)])
        last = self.num_rings - 1
        for j in range(S):
            faces.append([self.base_index, idx(0, j + 1), idx(0, j)])
            faces.append([self.tip_index, idx(last, j), idx(last, j + 1)])
        return torch.tensor(faces, dtype=torch.long)

    def _dims(self, beta: Optional[Tensor]):
        scale = 1.0 + (float(beta[0]) if beta is not None and len(beta) else 0.0)
        return self.radius * scale, self.segment_length * scale

    def _segment_transforms(self, theta: Tensor, length: float):
        """Per-segment (R, p) in hand-local coordinates"""
        transforms = []
        R = torch.eye(3, dtype=torch.float64)
        p = torch.zeros(3, dtype=torch.float64)
        for k in range(self.segments):
            angle = float(theta[k]) if k < theta.numel() else 0.0
            if k > 0:
                p = p + R @ torch.tensor([0.0, 0.0, length], dtype=torch.float64)
            R = R @ rotation_about_axis("x", angle)
            transforms.append((R, p))
        return transforms

    def local_vertices(self, theta: Tensor, beta: Optional[Tensor] = None) -> Tensor:
        radius, length = self._dims(beta)
        transforms = self._segment_transforms(theta, length)
        m = self.rings_per_segment

        def place(segment: int, local: Tensor) -> Tensor:
            R, p = transforms[segment]
            return local @ R.T + p

        verts = []
        for r in range(self.num_rings):
            axial = r * length / m
            ring = torch.tensor([
                [radius * math.cos(2 * math.pi * j / self.sides),
                 radius * math.sin(2 * math.pi * j / self.sides), 0.0]
                for j in range(self.sides)
            ], dtype=torch.float64)
            segment = min(r // m, self.segments - 1)
            local = ring + ring.new_tensor([0.0, 0.0, axial - segment * length])
            pos = place(segment, local)
            if r % m == 0 and 0 < r < self.num_rings - 1:
                prev = ring + ring.new_tensor([0.0, 0.0, axial - (segment - 1) * length])
                pos = 0.5 * (pos + place(segment - 1, prev))
            verts.append(pos)

        base = place(0, torch.zeros(1, 3, dtype=torch.float64))
        tip = place(self.segments - 1, torch.tensor([[0.0, 0.0, length + 0.5 * radius]], dtype=torch.float64))
        return torch.cat(verts + [base, tip], dim=0)

    def tip_local(self, theta: Tensor, beta: Optional[Tensor] = None) -> Tensor:
        return self.local_vertices(theta, beta)[self.tip_index]

    def build(self, pose: PoseState) -> TriangleMesh:
        verts = _rigid(self.local_vertices(pose.theta_hand, pose.beta_hand), pose.r_hand, pose.t_hand)
        return TriangleMesh(vertices=verts, faces=self.faces)

    def joint_rings(self) -> List[int]:
        return [k * self.rings_per_segment for k in range(self.segments)]


def rigs_from_spec(spec: SceneSpec) -> Tuple[FaceRig, FingerRig]:
    face = FaceRig(spec.face_rings, spec.face_sectors, spec.face_radius)
    finger = FingerRig(spec.finger_sides, spec.rings_per_segment, spec.finger_radius, spec.segment_length)
    return face, finger


# ================================
# CAMERAS
# ================================

def look_at(eye: Tensor, target: Tensor, up: Tensor) -> Tensor:
    """OpenCV world-to-camera (x right, y down, z forward)"""
    forward = target - eye
    forward = forward / forward.norm()
    right = torch.linalg.cross(forward, up)
    right = right / right.norm()
    down = torch.linalg.cross(forward, right)
    R = torch.stack([right, down, forward])
    M = torch.eye(4, dtype=torch.float64)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


def orbit_cameras(num_views: int, width: int, height: int, distance: float,
                  target: Sequence[float] = (0.02, 0.0, 0.04)) -> List[Camera]:
    """Views spread over the frontal arc, alternating elevation"""
    target = torch.tensor(target, dtype=torch.float64)
    up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    focal = 1.7 * min(width, height)
    cameras = []
    for v in range(num_views):
        azimuth = math.radians(-60.0 + 120.0 * v / max(num_views - 1, 1))
        elevation = math.radians(12.0 if v % 2 == 0 else -8.0)
        eye = target + distance * torch.tensor([
            math.sin(azimuth) * math.cos(elevation),
            math.sin(elevation),
            math.cos(azimuth) * math.cos(elevation),
        ], dtype=torch.float64)
        cameras.append(Camera(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                              world_to_camera=look_at(eye, target, up), width=width, height=height))
    return cameras


def project_points(points: Tensor, camera: Camera) -> Tuple[Tensor, Tensor]:
    p = points @ camera.rotation.T + camera.translation
    z = p[:, 2]
    z_safe = torch.where(z > Z_NEAR, z, torch.ones_like(z))
    uv = torch.stack([camera.fx * p[:, 0] / z_safe + camera.cx,
                      camera.fy * p[:, 1] / z_safe + camera.cy], dim=-1)
    return uv, z


def bounding_box(points: Tensor, camera: Camera) -> List[int]:
    """Pixel box (x0, y0, x1, y1) of projected vertices, clipped to the image; x1/y1 exclusive"""
    uv, z = project_points(points, camera)
    uv = uv[z > Z_NEAR]
    if uv.shape[0] == 0:
        return [0, 0, 0, 0]
    x0 = int(min(max(math.floor(float(uv[:, 0].min())), 0), camera.width))
    y0 = int(min(max(math.floor(float(uv[:, 1].min())), 0), camera.height))
    x1 = int(min(max(math.ceil(float(uv[:, 0].max())) + 1, 0), camera.width))
    y1 = int(min(max(math.ceil(float(uv[:, 1].max())) + 1, 0), camera.height))
    return [x0, y0, max(x1, x0), max(y1, y0)]


# ================================
# REFERENCE MESH RASTERIZER
# ================================

def rasterize_mesh(vertices: Tensor, faces: Tensor, colors: Tensor, camera: Camera,
                   chunk: int = 64) -> Tensor:
    """Z-buffered triangle rasterization with barycentric vertex-color interpolation"""
    H, W = camera.height, camera.width
    uv, z = project_points(vertices, camera)
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64), torch.arange(W, dtype=torch.float64),
                            indexing="ij")
    px, py = xs.reshape(-1), ys.reshape(-1)

    best_depth = torch.full((H * W,), float("inf"), dtype=torch.float64)
    best_face = torch.full((H * W,), -1, dtype=torch.long)
    best_bary = torch.zeros(H * W, 3, dtype=torch.float64)

    for start in range(0, faces.shape[0], chunk):
        f = faces[start:start + chunk]
        a, b, c = uv[f[:, 0]], uv[f[:, 1]], uv[f[:, 2]]
        za, zb, zc = z[f[:, 0]], z[f[:, 1]], z[f[:, 2]]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        ok = (area.abs() > 1e-12) & (za > Z_NEAR) & (zb > Z_NEAR) & (zc > Z_NEAR)
        area = torch.where(ok, area, torch.ones_like(area))

        edge = lambda p, q: ((q[:, None, 0] - p[:, None, 0]) * (py[None] - p[:, None, 1])
                             - (q[:, None, 1] - p[:, None, 1]) * (px[None] - p[:, None, 0]))
        w0 = edge(b, c) / area[:, None]
        w1 = edge(c, a) / area[:, None]
        w2 = edge(a, b) / area[:, None]
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & ok[:, None]
        depth = w0 * za[:, None] + w1 * zb[:, None] + w2 * zc[:, None]
        depth = torch.where(inside, depth, torch.full_like(depth, float("inf")))

        chunk_depth, chunk_arg = depth.min(dim=0)
        closer = chunk_depth < best_depth
        best_depth = torch.where(closer, chunk_depth, best_depth)
        best_face = torch.where(closer, chunk_arg + start, best_face)
        rows = torch.arange(H * W)
        bary = torch.stack([w0[chunk_arg, rows], w1[chunk_arg, rows], w2[chunk_arg, rows]], dim=-1)
        best_bary = torch.where(closer[:, None], bary, best_bary)

    image = torch.zeros(H * W, 3, dtype=torch.float64)
    hit = best_face >= 0
    corner_colors = colors[faces[best_face[hit]]]  # (P, 3 corners, 3 channels)
    image[hit] = (best_bary[hit][:, :, None] * corner_colors).sum(dim=1)
    return image.reshape(H, W, 3).clamp(0.0, 1.0)


def to_uint8(image: Tensor) -> Tensor:
    return torch.round(image.clamp(0.0, 1.0) * 255.0).to(torch.uint8)


# ================================
# GROUND-TRUTH APPEARANCE
# ================================

def _lambert(normals: Tensor) -> Tensor:
    light = torch.tensor(LIGHT_DIRECTION, dtype=torch.float64)
    light = light / light.norm()
    return AMBIENT + (1.0 - AMBIENT) * torch.clamp(normals @ light, min=0.0)


def face_albedo(rig: FaceRig, phase: float) -> Tensor:
    rest = rig.rest_vertices()
    x, y = rest[:, 0] / rig.radius, rest[:, 1] / rig.radius
    base = torch.tensor([0.86, 0.66, 0.56], dtype=torch.float64).expand(rest.shape[0], 3).clone()
    base = base + 0.06 * (torch.sin(9.0 * x + phase) * torch.sin(9.0 * y))[:, None]
    brow = (y > 0.25) & (y < 0.4) & (x.abs() > 0.1) & (x.abs() < 0.55)
    base[brow] = base[brow] * 0.55
    lips = (y < -0.35) & (y > -0.55) & (x.abs() < 0.3)
    base[lips] = torch.tensor([0.78, 0.38, 0.38], dtype=torch.float64)
    return base.clamp(0.0, 1.0)


def hand_albedo(rig: FingerRig, phase: float) -> Tensor:
    theta = torch.zeros(rig.segments, dtype=torch.float64)
    rest = rig.local_vertices(theta)
    axial = rest[:, 2] / (rig.segments * rig.segment_length)
    base = torch.tensor([0.92, 0.72, 0.62], dtype=torch.float64).expand(rest.shape[0], 3).clone()
    base = base + 0.05 * torch.sin(25.0 * axial + phase)[:, None]
    nail = (axial > 0.85) & (rest[:, 1] > 0.3 * rig.radius)
    base[nail] = torch.tensor([0.96, 0.86, 0.86], dtype=torch.float64)
    return base.clamp(0.0, 1.0)


def crease_shading(rig: FingerRig, theta: Tensor) -> Tensor:
    """Darkening at bent joints, per hand vertex"""
    factor = torch.ones(rig.num_vertices, dtype=torch.float64)
    for k, ring in enumerate(rig.joint_rings()):
        bend = min(0.6, 1.2 * abs(float(theta[k]))) if k < theta.numel() else 0.0
        for r, weight in ((ring, 1.0), (ring - 1, 0.5), (ring + 1, 0.5)):
            if 0 <= r < rig.num_rings:
                idx = torch.arange(r * rig.sides, (r + 1) * rig.sides)
                factor[idx] = factor[idx] * (1.0 - weight * bend)
    return factor


def contact_shadow(face_vertices: Tensor, hand_vertices: Tensor, width: float = 0.012) -> Tensor:
    d = torch.cdist(face_vertices, hand_vertices, compute_mode="donot_use_mm_for_euclid_dist").min(dim=1).values
    return 1.0 - 0.45 * torch.exp(-d ** 2 / (2 * width ** 2))


def skin_bulge(rest: Tensor, deformation: DeformationField, stiffness: Tensor, amount: float) -> Tensor:
    """Ring of outward skin displacement around the contact, absent from the PBD proxy"""
    if amount <= 0 or not deformation.contact_mask.any():
        return torch.zeros_like(rest)
    center = rest[deformation.contact_mask].mean(dim=0)
    normals = rest / rest.norm(dim=-1, keepdim=True)
    d2 = ((rest - center) ** 2).sum(-1)
    ring = torch.exp(-d2 / (2 * 0.015 ** 2)) * (1.0 - torch.exp(-d2 / (2 * 0.006 ** 2)))
    ring = torch.where(deformation.contact_mask, torch.zeros_like(ring), ring)
    return amount * (ring * (1.0 - stiffness))[:, None] * normals


# ================================
# DATASET MODEL
# ================================

@dataclass
class FrameRecord:
    index: int
    face_vertices: Tensor  # (V_face, 3)
    hand_vertices: Tensor  # (V_hand, 3)
    pose: PoseState
    interaction: Optional[bool]
    images: List[Tensor]  # per view, (H, W, 3) uint8
    hand_bboxes: List[List[int]]
    face_bboxes: List[List[int]]


@dataclass
class SceneDataset:
    spec: SceneSpec
    face_faces: Tensor
    hand_faces: Tensor
    region_mask: Tensor  # (F_face,) bool
    skull: TriangleMesh  # canonical-frame world coordinates
    cameras: List[Camera]
    frames: List[FrameRecord]
    canonical_frame: int = 0
    deformations: Dict[int, DeformationField] = field(default_factory=dict)

    @property
    def num_views(self) -> int:
        return len(self.cameras)

    def face_mesh(self, k: int) -> TriangleMesh:
        return TriangleMesh(vertices=self.frames[k].face_vertices, faces=self.face_faces)

    def hand_mesh(self, k: int) -> TriangleMesh:
        return TriangleMesh(vertices=self.frames[k].hand_vertices, faces=self.hand_faces)

    def interaction_flags(self) -> List[bool]:
        flags = []
        for frame in self.frames:
            if frame.interaction is None:
                logger.warning(f"⚠️ Frame {frame.index} has no interaction flag; treated as no contact")
                flags.append(False)
            else:
                flags.append(frame.interaction)
        return flags

    def image(self, k: int, view: int, dtype: torch.dtype = torch.float32) -> Tensor:
        return self.frames[k].images[view].to(dtype) / 255.0

    def validate(self):
        """Raise DatasetError on the first invariant breach"""
        if not self.frames:
            raise DatasetError("dataset has no frames")
        if not self.cameras:
            raise DatasetError("dataset has no cameras")
        if not 0 <= self.canonical_frame < len(self.frames):
            raise DatasetError(f"canonical frame {self.canonical_frame} out of range")
        if self.region_mask.shape[0] != self.face_faces.shape[0]:
            raise DatasetError("region mask does not match the face topology")
        num_face = int(self.face_faces.max()) + 1
        num_hand = int(self.hand_faces.max()) + 1
        for frame in self.frames:
            k = frame.index
            if frame.face_vertices.shape != (num_face, 3):
                raise DatasetError(f"face mesh has {frame.face_vertices.shape[0]} vertices, "
                                   f"topology needs {num_face}", frame=k)
            if frame.hand_vertices.shape != (num_hand, 3):
                raise DatasetError(f"hand mesh has {frame.hand_vertices.shape[0]} vertices, "
                                   f"topology needs {num_hand}", frame=k)
            if not torch.isfinite(frame.face_vertices).all() or not torch.isfinite(frame.hand_vertices).all():
                raise DatasetError("mesh contains non-finite vertices", frame=k)
            if len(frame.images) < 1:
                raise DatasetError("frame has no views", frame=k)
            if len(frame.images) != self.num_views:
                raise DatasetError(f"frame has {len(frame.images)} views, expected {self.num_views}", frame=k)
            if len(frame.hand_bboxes) != self.num_views or len(frame.face_bboxes) != self.num_views:
                raise DatasetError("bounding boxes missing for some views", frame=k)
            for v, camera in enumerate(self.cameras):
                if tuple(frame.images[v].shape) != (camera.height, camera.width, 3):
                    raise DatasetError(f"view {v} image is {tuple(frame.images[v].shape)}, camera is "
                                       f"{camera.width}x{camera.height}", frame=k)
                for box in (frame.hand_bboxes[v], frame.face_bboxes[v]):
                    x0, y0, x1, y1 = box
                    if not (0 <= x0 <= x1 <= camera.width and 0 <= y0 <= y1 <= camera.height):
                        raise DatasetError(f"bounding box {box} outside view {v}", frame=k)


# ================================
# GENERATION
# ================================

def scene_poses(spec: SceneSpec, face_rig: FaceRig, finger_rig: FingerRig) -> Tuple[List[PoseState], List[str]]:
    """Approach, contact and retreat phases of a fingertip pressing the cheek"""
    generator = make_generator(spec.seed)
    jitter = (0.5 + torch.rand(4, generator=generator, dtype=torch.float64)).tolist()
    beta_hand = torch.tensor(spec.beta_hand, dtype=torch.float64)
    beta_face = torch.tensor(spec.beta_face, dtype=torch.float64)

    n, c = spec.num_frames, spec.contact_frames
    approach = (n - c) // 2
    far = 0.12
    near = 0.0 if c > 0 else spec.d_max + 0.03

    poses, phases = [], []
    for k in range(n):
        if k < approach:
            gap = far + (near - far) * (k + 1) / (approach + 1)
            phase = "approach"
        elif k < approach + c:
            gap = -spec.max_depth * math.sin(math.pi * (k - approach + 1) / (c + 1))
            phase = "contact"
        else:
            steps = n - approach - c
            gap = near + (far - near) * (k - approach - c + 1) / (steps + 1)
            phase = "retreat"

        t = k / max(n - 1, 1)
        yaw = 0.12 * jitter[0] * math.sin(2 * math.pi * t)
        r_face = rotmat_to_quat(rotation_about_axis("y", float(yaw)))
        t_face = torch.zeros(3, dtype=torch.float64)
        theta_face = torch.tensor([0.12 * jitter[1] * math.sin(3 * math.pi * t)], dtype=torch.float64)
        expression = torch.tensor([
            0.8 * math.sin(2 * math.pi * t),
            0.6 * math.cos(2 * math.pi * t),
            0.5 * jitter[2] * math.sin(4 * math.pi * t),
        ], dtype=torch.float64)
        theta_hand = torch.tensor([
            0.15 + 0.1 * math.sin(2 * math.pi * t),
            0.25 + 0.15 * jitter[3] * math.sin(2 * math.pi * t + 1.0),
            0.2 + 0.1 * math.sin(2 * math.pi * t + 2.0),
        ], dtype=torch.float64)

        face_pose = PoseState.build(theta_hand, theta_face, expression,
                                    [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0], r_face, t_face,
                                    beta_hand, beta_face)
        point, normal = face_rig.contact_point(face_pose)
        tip = finger_rig.tip_local(theta_hand, beta_hand)
        r_hand = shortest_arc(tip / tip.norm(), -normal)
        t_hand = point + gap * normal - quat_to_rotmat(r_hand) @ tip
        poses.append(PoseState.build(theta_hand, theta_face, expression, r_hand, t_hand, r_face, t_face,
                                     beta_hand, beta_face))
        phases.append(phase)
    return poses, phases


def shortest_arc(u: Tensor, v: Tensor) -> Tensor:
    """Unit quaternion rotating unit vector u onto unit vector v"""
    q = torch.cat([(1.0 + u @ v).reshape(1), torch.linalg.cross(u, v)])
    if q[0] < 1e-9:
        axis = torch.linalg.cross(u, torch.tensor([1.0, 0.0, 0.0], dtype=u.dtype))
        if axis.norm() < 1e-6:
            axis = torch.linalg.cross(u, torch.tensor([0.0, 1.0, 0.0], dtype=u.dtype))
        q = torch.cat([torch.zeros(1, dtype=u.dtype), axis])
    return quat_normalize(q)


def interaction_flag(face: TriangleMesh, hand: TriangleMesh, d_max: float) -> bool:
    d = torch.cdist(face.vertices, hand.vertices, compute_mode="donot_use_mm_for_euclid_dist")
    return bool(d.min() < d_max)


def generate_synthetic_scene(spec: SceneSpec) -> SceneDataset:
    """Render a multi-view fingertip-on-cheek sequence from the proxy rigs"""
    face_rig, finger_rig = rigs_from_spec(spec)
    generator = make_generator(spec.seed + 1)
    phases_tex = torch.rand(2, generator=generator, dtype=torch.float64) * 2 * math.pi
    face_color = face_albedo(face_rig, float(phases_tex[0]))
    hand_color = hand_albedo(finger_rig, float(phases_tex[1]))

    poses, phases = scene_poses(spec, face_rig, finger_rig)
    cameras = orbit_cameras(spec.num_views, spec.width, spec.height, spec.camera_distance)
    canonical = poses[0]
    skull = face_rig.skull(canonical)
    stiffness = compute_stiffness(face_rig.build(canonical), skull)

    frames, deformations = [], {}
    for k, (pose, phase) in enumerate(zip(poses, phases)):
        face = face_rig.build(pose)
        hand = finger_rig.build(pose)
        deformation = pbd_resolve_collisions(face, hand, stiffness, iters=spec.pbd_iters)
        local_rest = face_rig.local_vertices(pose)
        bulge = skin_bulge(local_rest, deformation, stiffness, spec.bulge) @ quat_to_rotmat(pose.r_face).T
        deformed = face.vertices + deformation.vertex_offsets + bulge
        deformations[k] = deformation

        face_shade = _lambert(vertex_normals(deformed, face.faces)) * contact_shadow(deformed, hand.vertices)
        hand_shade = _lambert(vertex_normals(hand.vertices, hand.faces)) * crease_shading(finger_rig, pose.theta_hand)
        vertices = torch.cat([deformed, hand.vertices], dim=0)
        faces = torch.cat([face.faces, hand.faces + face.num_vertices], dim=0)
        colors = torch.cat([face_color * face_shade[:, None], hand_color * hand_shade[:, None]], dim=0)

        images = [to_uint8(rasterize_mesh(vertices, faces, colors, cam)) for cam in cameras]
        frames.append(FrameRecord(
            index=k,
            face_vertices=face.vertices,
            hand_vertices=hand.vertices,
            pose=pose,
            interaction=interaction_flag(face, hand, spec.d_max),
            images=images,
            hand_bboxes=[bounding_box(hand.vertices, cam) for cam in cameras],
            face_bboxes=[bounding_box(face.vertices, cam) for cam in cameras],
        ))
        logger.info(f"🎬 Frame {k} ({phase}): contact={frames[-1].interaction}, "
                    f"max PBD offset {float(deformation.vertex_offsets.norm(dim=-1).max()):.4f}")

    dataset = SceneDataset(
        spec=spec,
        face_faces=face_rig.faces,
        hand_faces=finger_rig.faces,
        region_mask=face_rig.region_mask(),
        skull=skull,
        cameras=cameras,
        frames=frames,
        deformations=deformations,
    )
    dataset.validate()
    logger.info(f"✅ Generated scene '{spec.name}': {len(frames)} frames x {len(cameras)} views")
    return dataset


# ================================
# FILE FORMATS
# ================================

def _format_rows(rows: Tensor) -> str:
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in rows.tolist())


def write_mesh_file(path: Path, vertices: Tensor):
    path.write_text(f"{MESH_MAGIC} {FORMAT_VERSION}\n{vertices.shape[0]}\n{_format_rows(vertices)}\n")


def read_mesh_file(path: Path, frame: Optional[int] = None) -> Tensor:
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read {path.name}: {e}", frame=frame)
    if not lines or lines[0].split() != [MESH_MAGIC, str(FORMAT_VERSION)]:
        raise DatasetError(f"{path.name} has a bad header", frame=frame)
    try:
        count = int(lines[1])
        rows = [[float(x) for x in line.split()] for line in lines[2:2 + count]]
    except (IndexError, ValueError) as e:
        raise DatasetError(f"{path.name} is malformed: {e}", frame=frame)
    if len(rows) != count or any(len(r) != 3 for r in rows):
        raise DatasetError(f"{path.name} is truncated: expected {count} vertices, read {len(rows)}", frame=frame)
    return torch.tensor(rows, dtype=torch.float64).reshape(count, 3)


def write_camera_file(path: Path, camera: Camera):
    path.write_text(
        f"{CAMERA_MAGIC} {FORMAT_VERSION}\n"
        f"{camera.width} {camera.height}\n"
        f"{repr(float(camera.fx))} {repr(float(camera.fy))} {repr(float(camera.cx))} {repr(float(camera.cy))}\n"
        f"{_format_rows(camera.world_to_camera)}\n"
    )


def read_camera_file(path: Path) -> Camera:
    try:
        lines = path.read_text().splitlines()
        if lines[0].split() != [CAMERA_MAGIC, str(FORMAT_VERSION)]:
            raise DatasetError(f"{path.name} has a bad header")
        width, height = (int(x) for x in lines[1].split())
        fx, fy, cx, cy = (float(x) for x in lines[2].split())
        matrix = torch.tensor([[float(x) for x in line.split()] for line in lines[3:7]], dtype=torch.float64)
        return Camera(fx=fx, fy=fy, cx=cx, cy=cy, world_to_camera=matrix, width=width, height=height)
    except (OSError, IndexError, ValueError, RuntimeError, ContractViolation) as e:
        raise DatasetError(f"cannot read camera {path.name}: {e}")


def write_png(path: Path, image: Tensor):
    Image.fromarray(image.cpu().numpy().astype(np.uint8), mode="RGB").save(path)


def read_png(path: Path, frame: Optional[int] = None) -> Tensor:
    try:
        with Image.open(path) as img:
            return torch.from_numpy(np.array(img.convert("RGB"), dtype=np.uint8))
    except OSError as e:
        raise DatasetError(f"cannot read image {path.name}: {e}", frame=frame)


def save_pose_sequence(path: Path, poses: List[PoseState]):
    Path(path).write_text(json.dumps({"version": FORMAT_VERSION, "poses": [p.to_dict() for p in poses]}))


def load_pose_sequence(path: Path) -> List[PoseState]:
    try:
        data = json.loads(Path(path).read_text())
        return [PoseState.from_dict(p) for p in data["poses"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"cannot read pose sequence {path}: {e}")


def save_deformation_fields(path: Path, fields: Dict[int, DeformationField]):
    """One offset file per frame plus a JSON summary of solver diagnostics"""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    summary = {}
    for k, fld in sorted(fields.items()):
        write_mesh_file(root / f"{k}", fld.vertex_offsets)
        summary[str(k)] = {
            "converged": fld.converged,
            "max_penetration": fld.max_penetration,
            "pinned_penetrating": fld.pinned_penetrating,
            "max_offset": float(fld.vertex_offsets.norm(dim=-1).max()) if fld.vertex_offsets.numel() else 0.0,
        }
    (root / "summary.json").write_text(json.dumps(summary, indent=2))


def save_dataset(dataset: SceneDataset, path):
    """Write the documented directory layout"""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "magic": SCENE_MAGIC,
        "version": FORMAT_VERSION,
        "spec": dataset.spec.model_dump(),
        "num_frames": len(dataset.frames),
        "num_views": dataset.num_views,
        "canonical_frame": dataset.canonical_frame,
        "face_faces": dataset.face_faces.tolist(),
        "hand_faces": dataset.hand_faces.tolist(),
        "region_mask": dataset.region_mask.tolist(),
        "skull": {"vertices": dataset.skull.vertices.tolist(), "faces": dataset.skull.faces.tolist()},
    }
    (root / "scene.meta").write_text(json.dumps(meta))
    for v, camera in enumerate(dataset.cameras):
        write_camera_file(root / f"cam_{v}", camera)

    for frame in dataset.frames:
        frame_dir = root / "frames" / str(frame.index)
        (frame_dir / "views").mkdir(parents=True, exist_ok=True)
        write_mesh_file(frame_dir / "mesh_face", frame.face_vertices)
        write_mesh_file(frame_dir / "mesh_hand", frame.hand_vertices)
        (frame_dir / "pose").write_text(json.dumps({
            "version": FORMAT_VERSION,
            "pose": frame.pose.to_dict(),
            "interaction": frame.interaction,
            "hand_bbox": frame.hand_bboxes,
            "face_bbox": frame.face_bboxes,
        }))
        for v, image in enumerate(frame.images):
            write_png(frame_dir / "views" / f"{v}.png", image)

    save_pose_sequence(root / "poses.json", [f.pose for f in dataset.frames])
    if dataset.deformations:
        save_deformation_fields(root / "deformation", dataset.deformations)
    logger.info(f"💾 Saved dataset to {root}")


def _load_frame(root: Path, k: int) -> FrameRecord:
    frame_dir = root / "frames" / str(k)
    if not frame_dir.is_dir():
        raise DatasetError("frame directory is missing", frame=k)
    face = read_mesh_file(frame_dir / "mesh_face", frame=k)
    hand = read_mesh_file(frame_dir / "mesh_hand", frame=k)
    try:
        data = json.loads((frame_dir / "pose").read_text())
        pose = PoseState.from_dict(data["pose"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ContractViolation) as e:
        raise DatasetError(f"bad pose file: {e}", frame=k)
    views = list((frame_dir / "views").glob("*.png"))
    bad = [p.name for p in views if not p.stem.isdigit()]
    if bad:
        raise DatasetError(f"unexpected view files {bad}; views are named <index>.png", frame=k)
    views.sort(key=lambda p: int(p.stem))
    images = [read_png(p, frame=k) for p in views]
    return FrameRecord(
        index=k,
        face_vertices=face,
        hand_vertices=hand,
        pose=pose,
        interaction=data.get("interaction"),
        images=images,
        hand_bboxes=data.get("hand_bbox", []),
        face_bboxes=data.get("face_bbox", []),
    )


def load_dataset(path, workers: int = 4) -> SceneDataset:
    """Read and validate a dataset directory; frames are loaded in parallel"""
    root = Path(path)
    try:
        meta = json.loads((root / "scene.meta").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot read scene.meta in {root}: {e}")
    if meta.get("magic") != SCENE_MAGIC:
        raise DatasetError("scene.meta has a bad magic")
    if meta.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported scene version {meta.get('version')}")

    try:
        spec = SceneSpec.model_validate(meta["spec"])
        cameras = [read_camera_file(root / f"cam_{v}") for v in range(meta["num_views"])]
        skull = TriangleMesh(vertices=torch.tensor(meta["skull"]["vertices"], dtype=torch.float64),
                             faces=torch.tensor(meta["skull"]["faces"], dtype=torch.long))
        face_faces = torch.tensor(meta["face_faces"], dtype=torch.long)
        hand_faces = torch.tensor(meta["hand_faces"], dtype=torch.long)
        region_mask = torch.tensor(meta["region_mask"], dtype=torch.bool)
        num_frames = int(meta["num_frames"])
    except (KeyError, ValueError, TypeError, ValidationError, ContractViolation) as e:
        raise DatasetError(f"scene.meta is malformed: {e}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        frames = list(pool.map(lambda k: _load_frame(root, k), range(num_frames)))

    dataset = SceneDataset(
        spec=spec,
        face_faces=face_faces,
        hand_faces=hand_faces,
        region_mask=region_mask,
        skull=skull,
        cameras=cameras,
        frames=frames,
        canonical_frame=int(meta.get("canonical_frame", 0)),
    )
    dataset.validate()
    logger.info(f"📂 Loaded dataset {root}: {len(frames)} frames x {len(cameras)} views")
    return dataset
