import pytest
import torch

from app.binding import DensityStats, bind_initial_gaussians, compute_local_frames, densify_and_prune, \
    remap_optimizer_state, to_local, to_world, world_positions
from app.config import DensifyConfig
from app.models import GaussianOffsets, LocalFrameSet, TriangleMesh
from app.utils import DegenerateFacetError, make_generator, quat_normalize, quat_to_rotmat, random_rotation, \
    rotmat_to_quat
from conftest import slow


def _right_triangle() -> TriangleMesh:
    return TriangleMesh(vertices=torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                        faces=torch.tensor([[0, 1, 2]]))


def _patch(num_facets: int = 8) -> TriangleMesh:
    """Strip of num_facets triangles in a wavy sheet"""
    cols = num_facets // 2 + 1
    xs = torch.linspace(0.0, 1.0, cols)
    top = torch.stack([xs, torch.ones(cols), 0.1 * torch.sin(3 * xs)], dim=-1)
    bottom = torch.stack([xs, torch.zeros(cols), 0.1 * torch.cos(2 * xs)], dim=-1)
    vertices = torch.cat([bottom, top])
    faces = []
    for i in range(cols - 1):
        faces.append([i, i + 1, cols + i])
        faces.append([i + 1, cols + i + 1, cols + i])
    return TriangleMesh(vertices=vertices, faces=torch.tensor(faces))


def _rigid(mesh: TriangleMesh, R: torch.Tensor, t: torch.Tensor) -> TriangleMesh:
    return mesh.with_vertices(mesh.vertices @ R.T + t)


# ================================
# LOCAL FRAMES
# ================================

def test_unit_right_triangle_frame():
    frames = compute_local_frames(_right_triangle())
    assert torch.allclose(frames.origin[0], torch.tensor([1 / 3, 1 / 3, 0.0]))
    assert torch.allclose(frames.rotation[0][:, 2], torch.tensor([0.0, 0.0, 1.0]))
    assert float(frames.scale[0]) == pytest.approx(1.0)


def test_frames_are_orthonormal_right_handed():
    frames = compute_local_frames(_patch())
    R = frames.rotation
    eye = torch.eye(3).expand_as(R)
    assert torch.allclose(R.transpose(-1, -2) @ R, eye, atol=1e-12)
    assert torch.allclose(torch.linalg.det(R), torch.ones(R.shape[0]), atol=1e-12)


def test_frames_are_rigid_equivariant():
    mesh = _patch()
    gen = make_generator(1)
    base = compute_local_frames(mesh)
    for _ in range(1000):
        R0 = random_rotation(gen)
        t0 = torch.randn(3, generator=gen)
        moved = compute_local_frames(_rigid(mesh, R0, t0))
        assert torch.allclose(moved.rotation, R0 @ base.rotation, rtol=0.0, atol=1e-10)
        assert torch.allclose(moved.origin, base.origin @ R0.T + t0, rtol=0.0, atol=1e-10)
        assert torch.allclose(moved.scale, base.scale, rtol=0.0, atol=1e-10)


def test_uniform_scaling_doubles_k():
    mesh = _patch()
    base = compute_local_frames(mesh)
    doubled = compute_local_frames(mesh.with_vertices(2.0 * mesh.vertices))
    assert torch.allclose(doubled.scale, 2.0 * base.scale, atol=1e-12)
    assert torch.allclose(doubled.rotation, base.rotation, atol=1e-12)


def test_degenerate_facet_is_reported_with_index():
    vertices = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]])
    mesh = TriangleMesh(vertices=vertices, faces=torch.tensor([[0, 1, 2], [0, 1, 3]]))
    with pytest.raises(DegenerateFacetError) as err:
        compute_local_frames(mesh)
    assert err.value.facet == 1


# ================================
# BINDING
# ================================

def test_bind_counts_per_facet():
    mesh = _patch(2)
    g = bind_initial_gaussians(mesh, 20, point_feature_dim=8, generator=make_generator(0))
    assert len(g) == 40
    assert torch.bincount(g.parent_face).tolist() == [20, 20]
    assert g.point_feature.shape == (40, 8)


def test_single_gaussian_sits_on_centroid():
    mesh = _patch()
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0))
    frames = compute_local_frames(mesh)
    world = to_world(g, frames)
    assert torch.allclose(world.means, frames.origin, atol=1e-12)
    assert torch.allclose(g.canonical_position, world.means, atol=1e-12)


def test_identity_frame_keeps_local_parameters():
    frames = LocalFrameSet(rotation=torch.eye(3)[None], origin=torch.zeros(1, 3), scale=torch.ones(1))
    g = bind_initial_gaussians(_right_triangle(), 3, generator=make_generator(0))
    gen = make_generator(2)
    g.local_position = 0.1 * torch.randn(3, 3, generator=gen)
    g.rotation = quat_normalize(torch.randn(3, 4, generator=gen))
    world = to_world(g, frames)
    assert torch.allclose(world.means, g.local_position)
    assert torch.allclose(world.scales, torch.exp(g.log_scale))
    assert torch.allclose(quat_to_rotmat(world.rotations), quat_to_rotmat(g.rotation), atol=1e-12)


def test_world_means_follow_rigid_motion():
    mesh = _patch()
    g = bind_initial_gaussians(mesh, 2, generator=make_generator(0))
    g.local_position = 0.2 * torch.randn(len(g), 3, generator=make_generator(4))
    gen = make_generator(9)
    R0 = random_rotation(gen)
    t0 = torch.randn(3, generator=gen)
    before = to_world(g, compute_local_frames(mesh))
    after = to_world(g, compute_local_frames(_rigid(mesh, R0, t0)))
    assert torch.allclose(after.means, before.means @ R0.T + t0, atol=1e-10)
    assert torch.allclose(after.covariances, R0 @ before.covariances @ R0.T, atol=1e-10)


def test_world_and_local_are_inverse():
    mesh = _patch()
    frames = compute_local_frames(mesh)
    parent = torch.arange(mesh.num_faces)
    local = torch.randn(mesh.num_faces, 3, generator=make_generator(3))
    assert torch.allclose(to_local(world_positions(local, parent, frames), parent, frames), local, atol=1e-12)


def test_zero_offsets_are_bit_identical_to_no_offsets():
    mesh = _patch()
    g = bind_initial_gaussians(mesh, 2, generator=make_generator(0))
    frames = compute_local_frames(mesh)
    n = len(g)
    zeros = GaussianOffsets(d_position=torch.zeros(n, 3), d_scale=torch.zeros(n, 3),
                            d_rotation=torch.zeros(n, 4), d_color=torch.zeros(n, 3), d_opacity=torch.zeros(n))
    plain = to_world(g, frames)
    shifted = to_world(g, frames, zeros)
    for name in ("means", "scales", "rotations", "covariances", "colors", "opacities"):
        assert torch.equal(getattr(plain, name), getattr(shifted, name)), name


def test_world_rotation_composes_frame_and_local():
    mesh = _patch()
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0))
    g.rotation = quat_normalize(torch.randn(len(g), 4, generator=make_generator(8)))
    frames = compute_local_frames(mesh)
    world = to_world(g, frames)
    expected = frames.rotation @ quat_to_rotmat(g.rotation)
    assert torch.allclose(quat_to_rotmat(world.rotations), expected, atol=1e-10)
    assert torch.allclose(rotmat_to_quat(expected), world.rotations * torch.sign(world.rotations[:, :1]), atol=1e-9)


def test_to_world_gradients_match_finite_differences():
    mesh = _patch()
    frames = compute_local_frames(mesh)
    g = bind_initial_gaussians(mesh, 2, generator=make_generator(0))
    gen = make_generator(11)
    mu = (0.1 * torch.randn(len(g), 3, generator=gen)).requires_grad_(True)
    d_mu = (0.05 * torch.randn(len(g), 3, generator=gen)).requires_grad_(True)
    d_s = (0.05 * torch.randn(len(g), 3, generator=gen)).requires_grad_(True)

    def world(mu, d_mu, d_s):
        g.local_position = mu
        out = to_world(g, frames, GaussianOffsets(d_position=d_mu, d_scale=d_s))
        return out.means, out.covariances

    assert torch.autograd.gradcheck(world, (mu, d_mu, d_s), eps=1e-6, atol=1e-8, rtol=1e-4)


# ================================
# DENSITY CONTROL
# ================================

def _stats(grads: torch.Tensor) -> DensityStats:
    stats = DensityStats.zeros(grads.shape[0])
    stats.add(grads, torch.ones(grads.shape[0], dtype=torch.bool))
    return stats


def test_quiet_gaussians_are_untouched():
    mesh = _patch()
    g = bind_initial_gaussians(mesh, 2, generator=make_generator(0))
    result = densify_and_prune(g, _stats(torch.zeros(len(g))), DensifyConfig(min_opacity=0.01),
                               compute_local_frames(mesh))
    for name, t in g.tensors().items():
        assert torch.equal(getattr(result.gaussians, name), t), name
    assert result.origin.tolist() == list(range(len(g)))
    assert not result.fresh.any()


def test_prune_threshold_one_empties_the_set():
    mesh = _patch()
    g = bind_initial_gaussians(mesh, 2, generator=make_generator(0))
    result = densify_and_prune(g, _stats(torch.zeros(len(g))), DensifyConfig(min_opacity=1.0),
                               compute_local_frames(mesh))
    assert len(result.gaussians) == 0


def test_clone_keeps_parent_face():
    mesh = _patch(8)
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0))
    grads = torch.zeros(len(g))
    grads[7] = 1.0
    result = densify_and_prune(g, _stats(grads), DensifyConfig(dense_scale_limit=10.0),
                               compute_local_frames(mesh))
    assert result.cloned == 1
    assert len(result.gaussians) == len(g) + 1
    assert int(result.gaussians.parent_face[-1]) == 7
    assert bool(result.fresh[-1])


def test_split_children_inherit_parent_and_shrink():
    mesh = _patch(8)
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0))
    grads = torch.zeros(len(g))
    grads[3] = 1.0
    result = densify_and_prune(g, _stats(grads), DensifyConfig(dense_scale_limit=0.1),
                               compute_local_frames(mesh), make_generator(1))
    assert result.split == 1
    children = result.gaussians.select(result.fresh)
    assert len(children) == 2
    assert (children.parent_face == 3).all()
    assert torch.allclose(torch.exp(children.log_scale), torch.full((2, 3), 0.5 / 1.6))
    assert len(result.gaussians) == len(g) + 1


def test_optimizer_moments_follow_surviving_gaussians():
    mesh = _patch(4)
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0)).requires_grad_(True)
    optimizer = torch.optim.Adam([{"params": [g.local_position], "name": "face.local_position"}], lr=0.1)
    g.local_position.sum().backward()
    optimizer.step()
    moments = optimizer.state[g.local_position]["exp_avg"].clone()

    grads = torch.zeros(len(g))
    grads[2] = 1.0
    result = densify_and_prune(g, _stats(grads), DensifyConfig(dense_scale_limit=10.0),
                               compute_local_frames(mesh))
    fresh = result.gaussians.requires_grad_(True)
    remap_optimizer_state(optimizer, {"face.local_position": g.local_position},
                          {"face.local_position": fresh.local_position}, result.origin, result.fresh)

    assert optimizer.param_groups[0]["params"][0] is fresh.local_position
    state = optimizer.state[fresh.local_position]
    assert torch.equal(state["exp_avg"][:len(g)], moments)
    assert torch.equal(state["exp_avg"][-1], torch.zeros(3))


def test_growth_is_clipped_to_the_budget():
    mesh = _patch(8)
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0))
    grads = torch.zeros(len(g))
    grads[1:6] = torch.tensor([0.1, 0.5, 0.3, 0.9, 0.2])
    frames = compute_local_frames(mesh)

    result = densify_and_prune(g, _stats(grads), DensifyConfig(dense_scale_limit=10.0, max_gaussians=10), frames)
    assert result.cloned == 2
    assert len(result.gaussians) == 10
    assert sorted(result.gaussians.parent_face[result.fresh].tolist()) == [2, 4]

    full = densify_and_prune(g, _stats(grads), DensifyConfig(dense_scale_limit=10.0, max_gaussians=8), frames)
    assert len(full.gaussians) == 8
    assert not full.fresh.any()


def _random_densify_run(num_ops: int, seed: int):
    mesh = _patch(8)
    frames = compute_local_frames(mesh)
    gen = make_generator(seed)
    g = bind_initial_gaussians(mesh, 2, generator=gen)
    for _ in range(num_ops):
        if len(g) == 0:
            g = bind_initial_gaussians(mesh, 2, generator=gen)
        num = len(g)
        g.opacity_logit = 3.0 * torch.randn(num, generator=gen)
        config = DensifyConfig(grad_threshold=0.5,
                               min_opacity=0.2 * float(torch.rand(1, generator=gen)),
                               dense_scale_limit=0.05 + 0.9 * float(torch.rand(1, generator=gen)),
                               max_gaussians=int(torch.randint(1, 64, (1,), generator=gen)))
        result = densify_and_prune(g, _stats(torch.rand(num, generator=gen)), config, frames, gen)
        out = result.gaussians
        assert len(out) <= max(num, config.max_gaussians)
        if len(out):
            assert int(out.parent_face.min()) >= 0
            assert int(out.parent_face.max()) < mesh.num_faces
        assert torch.equal(out.parent_face, g.parent_face[result.origin])
        g = out


def test_random_densify_keeps_parent_faces_valid():
    _random_densify_run(300, seed=5)


@slow
def test_ten_thousand_densify_operations():
    _random_densify_run(10_000, seed=6)
