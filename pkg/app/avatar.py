# app/avatar.py - Face + hand Gaussian avatar composed per frame
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch
from torch import nn, Tensor

from app.binding import bind_initial_gaussians, compute_local_frames, to_world, world_positions
from app.config import TrainConfig
from app.dynamics import HandAppearanceNet, HandGeometryNet, hand_app_offsets, hand_geo_offsets
from app.interaction import InteractionNet, PointEncoder, aggregate_facet_offsets, build_point_cloud, \
    compute_stiffness, contact_weight, extract_geometric_feature, interaction_offsets, \
    pbd_resolve_collisions, sample_representative_gaussians
from app.models import DeformationField, GaussianOffsets, GaussianSet, LocalFrameSet, PoseState, \
    TriangleMesh, WorldGaussians
from app.scene import SceneDataset, SceneSpec, rigs_from_spec
from app.utils import frame_seed, make_generator

logger = logging.getLogger(__name__)


@dataclass
class Composition:
    """Everything one frame's losses need"""
    world: WorldGaussians  # face Gaussians first, then hand
    num_face: int
    face_offsets: GaussianOffsets
    hand_offsets: GaussianOffsets
    deformation: DeformationField
    face_frames: LocalFrameSet
    hand_frames: LocalFrameSet


class Avatar:
    """
    Facet-bound Gaussians for the face and the hand plus the networks that
    animate them.

    Shape parameters, stiffness and the non-rigid region belong to the avatar;
    a frame only supplies meshes and a PoseState.
    """

    def __init__(self, face: GaussianSet, hand: GaussianSet, networks: nn.ModuleDict,
                 config: TrainConfig, spec: SceneSpec, stiffness: Tensor, region_mask: Tensor,
                 face_canonical: LocalFrameSet, hand_canonical: LocalFrameSet):
        self.face = face
        self.hand = hand
        self.networks = networks
        self.config = config
        self.spec = spec
        self.stiffness = stiffness
        self.region_mask = region_mask
        self.face_canonical = face_canonical
        self.hand_canonical = hand_canonical
        self.pbd_cache: Dict[int, DeformationField] = {}

    # ================================
    # CONSTRUCTION
    # ================================

    @classmethod
    def create(cls, dataset: SceneDataset, config: TrainConfig,
               generator: Optional[torch.Generator] = None) -> "Avatar":
        k = dataset.canonical_frame
        face_mesh, hand_mesh = dataset.face_mesh(k), dataset.hand_mesh(k)
        net = config.network
        face = bind_initial_gaussians(face_mesh, config.n_per_face, net.point_feature_dim, generator)
        hand = bind_initial_gaussians(hand_mesh, config.n_per_face, net.point_feature_dim, generator)
        stiffness = compute_stiffness(face_mesh, dataset.skull)
        networks = build_networks(dataset.spec, config)
        logger.info(f"🧑 Avatar: {len(face)} face + {len(hand)} hand Gaussians, "
                    f"{sum(p.numel() for p in networks.parameters())} network weights")
        return cls(face=face, hand=hand, networks=networks, config=config, spec=dataset.spec,
                   stiffness=stiffness, region_mask=dataset.region_mask.clone(),
                   face_canonical=compute_local_frames(face_mesh),
                   hand_canonical=compute_local_frames(hand_mesh))

    def gaussian_sets(self) -> Dict[str, GaussianSet]:
        return {"face": self.face, "hand": self.hand}

    def set_gaussians(self, name: str, gaussians: GaussianSet):
        setattr(self, name, gaussians)

    def canonical_frames(self, name: str) -> LocalFrameSet:
        return self.face_canonical if name == "face" else self.hand_canonical

    def refresh_canonical_positions(self):
        """Re-derive every canonical position from the trained local position"""
        with torch.no_grad():
            for name, g in self.gaussian_sets().items():
                frames = self.canonical_frames(name)
                local = g.local_position.detach().to(frames.rotation.dtype)
                g.canonical_position = world_positions(local, g.parent_face, frames).to(g.local_position.dtype)

    def to(self, dtype: torch.dtype) -> "Avatar":
        for name, g in self.gaussian_sets().items():
            converted = GaussianSet(**{
                f: (t.to(dtype) if t.is_floating_point() else t) for f, t in g.tensors().items()
            })
            self.set_gaussians(name, converted)
        self.networks.to(dtype)
        self.stiffness = self.stiffness.to(dtype)
        return self

    # ================================
    # PER-FRAME COMPOSITION
    # ================================

    def deformation(self, face: TriangleMesh, hand: TriangleMesh, frame: Optional[int] = None) -> DeformationField:
        """PBD contact field, cached per dataset frame"""
        if not self.config.use_pbd:
            return DeformationField.zeros(face.num_vertices, face.vertices.dtype)
        if frame is not None and frame in self.pbd_cache:
            return self.pbd_cache[frame]
        result = pbd_resolve_collisions(face, hand, self.stiffness, iters=self.config.pbd_iters)
        if frame is not None:
            self.pbd_cache[frame] = result
        return result

    def geometric_feature(self, face_frames: LocalFrameSet, hand_frames: LocalFrameSet,
                          facet_offsets: Tensor, seed: int) -> Tensor:
        """Encode one sampled Gaussian per region facet and per hand facet"""
        generator = make_generator(seed)
        face_idx = sample_representative_gaussians(self.face, self.region_mask, generator)
        hand_mask = torch.ones(len(hand_frames), dtype=torch.bool)
        hand_idx = sample_representative_gaussians(self.hand, hand_mask, generator)
        with torch.no_grad():
            face_points = world_positions(self.face.local_position[face_idx], self.face.parent_face[face_idx],
                                          face_frames)
            hand_points = world_positions(self.hand.local_position[hand_idx], self.hand.parent_face[hand_idx],
                                          hand_frames)
        dtype = self.face.local_position.dtype
        if len(face_idx) + len(hand_idx) == 0:
            logger.warning("⚠️ No Gaussians left to encode; using a zero geometric feature")
            return torch.zeros(self.networks["encoder"].feat_dim, dtype=dtype)
        cloud = build_point_cloud(hand_points.to(dtype), face_points.to(dtype),
                                  facet_offsets[self.face.parent_face[face_idx]])
        return extract_geometric_feature(self.networks["encoder"], cloud)

    def compose(self, face_mesh: TriangleMesh, hand_mesh: TriangleMesh, pose: PoseState,
                frame: Optional[int] = None, dynamics: bool = True,
                seed_index: Optional[int] = None) -> Composition:
        """frame keys the PBD cache; seed_index (default: frame) keys representative sampling"""
        dtype = self.face.local_position.dtype
        deformation = self.deformation(face_mesh, hand_mesh, frame)
        face_mesh = face_mesh.with_vertices((face_mesh.vertices + deformation.vertex_offsets).to(dtype))
        hand_mesh = hand_mesh.with_vertices(hand_mesh.vertices.to(dtype))
        face_frames = compute_local_frames(face_mesh)
        hand_frames = compute_local_frames(hand_mesh)

        face_offsets, hand_offsets = GaussianOffsets(), GaussianOffsets()
        cfg = self.config
        if dynamics and (cfg.use_hand_mlp or cfg.use_interaction_mlp):
            facet_offsets = aggregate_facet_offsets(deformation, face_mesh).to(dtype)
            index = seed_index if seed_index is not None else frame
            seed = frame_seed(cfg.seed, index if index is not None else -1)
            feature = self.geometric_feature(face_frames, hand_frames, facet_offsets, seed)

            if cfg.use_hand_mlp:
                hand_offsets = (hand_geo_offsets(self.networks["hand_geo"], self.hand, pose)
                                + hand_app_offsets(self.networks["hand_app"], self.hand, pose, feature))
            if cfg.use_interaction_mlp:
                with torch.no_grad():
                    means = world_positions(self.face.local_position, self.face.parent_face, face_frames)
                weights = contact_weight(means, hand_mesh.vertices, cfg.d_max)
                face_offsets = interaction_offsets(self.networks["interaction"], self.face, pose,
                                                   facet_offsets, feature, weights, cfg.tau_def)

        world = to_world(self.face, face_frames, face_offsets).concat(to_world(self.hand, hand_frames, hand_offsets))
        return Composition(world=world, num_face=len(self.face), face_offsets=face_offsets,
                           hand_offsets=hand_offsets, deformation=deformation,
                           face_frames=face_frames, hand_frames=hand_frames)

    def compose_frame(self, dataset: SceneDataset, k: int, dynamics: bool = True) -> Composition:
        frame = dataset.frames[k]
        return self.compose(dataset.face_mesh(k), dataset.hand_mesh(k), frame.pose, frame=k, dynamics=dynamics)

    def compose_pose(self, pose: PoseState, index: Optional[int] = None, dynamics: bool = True) -> Composition:
        """Drive the avatar with a foreign pose; meshes are rebuilt with the avatar's own shape"""
        own = pose.with_shape(torch.tensor(self.spec.beta_hand, dtype=torch.float64),
                              torch.tensor(self.spec.beta_face, dtype=torch.float64))
        face_rig, finger_rig = rigs_from_spec(self.spec)
        return self.compose(face_rig.build(own), finger_rig.build(own), own, frame=None, dynamics=dynamics,
                            seed_index=index)


def build_networks(spec: SceneSpec, config: TrainConfig) -> nn.ModuleDict:
    face_rig, finger_rig = rigs_from_spec(spec)
    net = config.network
    networks = nn.ModuleDict({
        "hand_geo": HandGeometryNet(finger_rig.theta_dim, n_freq=net.n_freq, hidden=net.hidden,
                                    depth=net.hand_depth),
        "hand_app": HandAppearanceNet(finger_rig.theta_dim, net.point_feature_dim, net.geo_feature_dim,
                                      n_freq=net.n_freq, hidden=net.hidden, depth=net.interaction_depth),
        "interaction": InteractionNet(finger_rig.theta_dim, face_rig.theta_dim, face_rig.expression_dim,
                                      net.geo_feature_dim, n_freq=net.n_freq, n_freq_deform=net.n_freq_deform,
                                      hidden=net.hidden, depth=net.interaction_depth),
        "encoder": PointEncoder(in_channels=7, feat_dim=net.geo_feature_dim),
    })
    return networks
