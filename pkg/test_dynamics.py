import math

import pytest
import torch
from torch import nn

from app.binding import bind_initial_gaussians, compute_local_frames, to_world
from app.config import TrainConfig
from app.dynamics import ADAM_BETAS, ADAM_EPS, HandAppearanceNet, HandGeometryNet, Mlp, adam_step, \
    build_optimizer, hand_app_offsets, hand_geo_offsets, mlp_forward, posenc, posenc_dim
from app.models import Camera, GaussianOffsets, PoseState, TriangleMesh
from app.rasterizer import render
from app.utils import ContractViolation, make_generator


def _pose(theta=(0.1, 0.2, 0.3)) -> PoseState:
    return PoseState.build(theta_hand=list(theta), theta_face=[0.0], expression=[0.0, 0.0, 0.0],
                           r_hand=[1.0, 0.0, 0.0, 0.0], t_hand=[0.0, 0.0, 0.1],
                           r_face=[1.0, 0.0, 0.0, 0.0], t_face=[0.0, 0.0, 0.0])


def _sheet() -> TriangleMesh:
    vertices = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.1],
                             [0.5, 1.5, 0.05]])
    return TriangleMesh(vertices=vertices, faces=torch.tensor([[0, 1, 2], [1, 3, 2], [2, 3, 4]]))


# ================================
# POSITIONAL ENCODING
# ================================

def test_posenc_at_origin():
    out = posenc(torch.zeros(1, 3), 4)
    sines = torch.cat([out[:, 3 + 6 * k: 6 + 6 * k] for k in range(4)], dim=1)
    cosines = torch.cat([out[:, 6 + 6 * k: 9 + 6 * k] for k in range(4)], dim=1)
    assert torch.equal(sines, torch.zeros_like(sines))
    assert torch.equal(cosines, torch.ones_like(cosines))


def test_posenc_without_frequencies_is_identity():
    x = torch.randn(5, 3, generator=make_generator(0))
    assert torch.equal(posenc(x, 0), x)


def test_posenc_width():
    assert posenc(torch.zeros(2, 3), 6).shape == (2, 39)
    assert posenc_dim(6) == 39


# ================================
# MLP
# ================================

def test_zero_init_outputs_zero():
    mlp = Mlp(7, 5, hidden=16, depth=4)
    x = torch.randn(10, 7, generator=make_generator(1))
    assert torch.equal(mlp_forward(mlp, x), torch.zeros(10, 5))


def test_identity_single_layer():
    mlp = Mlp(3, 3, depth=1, zero_init=False)
    with torch.no_grad():
        mlp.linears[0].weight.copy_(torch.eye(3))
        mlp.linears[0].bias.zero_()
    x = torch.randn(4, 3, generator=make_generator(2))
    assert torch.allclose(mlp_forward(mlp, x), x)


def test_hidden_layers_are_normalized_before_activation():
    torch.manual_seed(5)
    mlp = Mlp(6, 2, hidden=32, depth=4, zero_init=False)
    normalized = []
    hooks = [norm.register_forward_hook(lambda module, args, out: normalized.append(out))
             for norm in mlp.norms if isinstance(norm, nn.LayerNorm)]
    mlp(10.0 * torch.randn(12, 6, generator=make_generator(6)) + 3.0)
    for hook in hooks:
        hook.remove()

    assert len(normalized) == 3
    for h in normalized:
        assert torch.allclose(h.mean(dim=-1), torch.zeros(12), atol=1e-10)
        assert torch.allclose(h.var(dim=-1, unbiased=False), torch.ones(12), atol=1e-3)


def test_wrong_input_width_is_rejected():
    with pytest.raises(ContractViolation):
        mlp_forward(Mlp(3, 2, depth=2), torch.zeros(1, 4))


def test_mlp_weight_gradients_match_finite_differences():
    torch.manual_seed(0)
    mlp = Mlp(3, 2, hidden=8, depth=4, zero_init=False)
    x = torch.randn(6, 3, generator=make_generator(3))
    target = torch.randn(6, 2, generator=make_generator(4))

    def loss() -> torch.Tensor:
        return ((mlp(x) - target) ** 2).sum()

    loss().backward()
    h = 1e-6
    for param in mlp.parameters():
        numeric = torch.zeros_like(param)
        with torch.no_grad():
            for idx in range(param.numel()):
                original = float(param.view(-1)[idx])
                param.view(-1)[idx] = original + h
                f_plus = float(loss())
                param.view(-1)[idx] = original - h
                f_minus = float(loss())
                param.view(-1)[idx] = original
                numeric.view(-1)[idx] = (f_plus - f_minus) / (2 * h)
        assert torch.allclose(param.grad, numeric, rtol=1e-4, atol=1e-7)


# ================================
# HAND NETWORKS
# ================================

def test_zero_init_hand_networks_give_zero_offsets():
    g = bind_initial_gaussians(_sheet(), 4, point_feature_dim=8, generator=make_generator(0))
    geo = hand_geo_offsets(HandGeometryNet(3, n_freq=2, hidden=16), g, _pose())
    app = hand_app_offsets(HandAppearanceNet(3, 8, 32, n_freq=2, hidden=16), g, _pose(),
                           torch.randn(32, generator=make_generator(1)))
    for offsets in (geo, app):
        for name in GaussianOffsets.NAMES:
            value = getattr(offsets, name)
            assert value is None or torch.count_nonzero(value) == 0


def test_zero_init_rendering_matches_static_model():
    mesh = _sheet()
    g = bind_initial_gaussians(mesh, 2, generator=make_generator(0))
    frames = compute_local_frames(mesh)
    offsets = hand_geo_offsets(HandGeometryNet(3, n_freq=2, hidden=16), g, _pose())
    assert torch.equal(to_world(g, frames).covariances, to_world(g, frames, offsets).covariances)
    assert torch.equal(to_world(g, frames).means, to_world(g, frames, offsets).means)


def test_batch_matches_per_gaussian_evaluation():
    torch.manual_seed(1)
    g = bind_initial_gaussians(_sheet(), 3, generator=make_generator(0))
    g.canonical_position = torch.randn(len(g), 3, generator=make_generator(5))
    net = HandGeometryNet(3, n_freq=2, hidden=16)
    with torch.no_grad():
        for head in net.heads.values():
            head.weight.normal_()
    batch = hand_geo_offsets(net, g, _pose())
    for i in range(len(g)):
        single = hand_geo_offsets(net, g.select(torch.tensor([i])), _pose())
        assert torch.allclose(single.d_position[0], batch.d_position[i], atol=1e-12)


def _train_one_step(net, offsets_fn):
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-2)
    offsets = offsets_fn()
    loss = sum(((getattr(offsets, name) - 0.5) ** 2).sum() for name in GaussianOffsets.NAMES
               if getattr(offsets, name) is not None)
    loss.backward()
    optimizer.step()


def test_geometry_offsets_depend_on_pose_after_training():
    torch.manual_seed(2)
    g = bind_initial_gaussians(_sheet(), 2, generator=make_generator(0))
    net = HandGeometryNet(3, n_freq=2, hidden=16)
    _train_one_step(net, lambda: hand_geo_offsets(net, g, _pose()))
    with torch.no_grad():
        a = hand_geo_offsets(net, g, _pose((0.1, 0.2, 0.3))).d_position
        b = hand_geo_offsets(net, g, _pose((0.9, -0.4, 0.6))).d_position
    assert not torch.allclose(a, b)


def test_appearance_offsets_depend_on_point_feature():
    torch.manual_seed(3)
    g = bind_initial_gaussians(_sheet(), 1, point_feature_dim=8, generator=make_generator(0))
    g = g.select(torch.tensor([0, 0]))
    g.point_feature = torch.randn(2, 8, generator=make_generator(6))
    net = HandAppearanceNet(3, 8, 16, n_freq=2, hidden=16)
    _train_one_step(net, lambda: hand_app_offsets(net, g, _pose()))
    with torch.no_grad():
        out = hand_app_offsets(net, g, _pose())
    assert not torch.allclose(out.d_color[0], out.d_color[1])


def test_opacity_offset_is_clamped():
    mesh = _sheet()
    g = bind_initial_gaussians(mesh, 1, generator=make_generator(0))
    frames = compute_local_frames(mesh)
    up = to_world(g, frames, GaussianOffsets(d_opacity=torch.full((len(g),), 5.0)))
    down = to_world(g, frames, GaussianOffsets(d_opacity=torch.full((len(g),), -5.0)))
    assert torch.equal(up.opacities, torch.ones(len(g)))
    assert torch.equal(down.opacities, torch.zeros(len(g)))


# ================================
# ADAM
# ================================

def _scalar_optimizer(w: torch.Tensor, lr: float = 0.1, name: str = "net.w"):
    return torch.optim.Adam([{"params": [w], "lr": lr, "name": name}], betas=ADAM_BETAS, eps=ADAM_EPS)


def test_zero_gradient_leaves_parameters():
    w = torch.tensor([1.0, -2.0], requires_grad=True)
    optimizer = _scalar_optimizer(w)
    w.grad = torch.zeros(2)
    assert adam_step(optimizer, 0)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0]))


def test_two_step_trace_matches_hand_calculation():
    w = torch.tensor([1.0], requires_grad=True)
    optimizer = _scalar_optimizer(w)
    b1, b2 = ADAM_BETAS
    expected, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        (w ** 2).sum().backward()
        adam_step(optimizer, t)
        g = 2 * expected
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        expected -= 0.1 * m_hat / (math.sqrt(v_hat) + ADAM_EPS)
        assert float(w) == pytest.approx(expected, abs=1e-12)
    assert float(w) < 1.0


def test_non_finite_gradient_skips_the_update():
    w = torch.tensor([1.0], requires_grad=True)
    optimizer = _scalar_optimizer(w)
    w.grad = torch.tensor([float("nan")])
    assert not adam_step(optimizer, 0)
    assert float(w) == 1.0
    assert w.grad is None
    assert len(optimizer.state) == 0


def test_rotation_groups_are_renormalized():
    q = torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5]], requires_grad=True)
    optimizer = _scalar_optimizer(q, name="face.rotation")
    q.grad = torch.tensor([[0.3, -0.2, 0.1, 0.0], [0.0, 0.4, 0.0, -0.1]])
    adam_step(optimizer, 0)
    assert torch.allclose(q.detach().norm(dim=-1), torch.ones(2), atol=1e-12)


def test_position_schedule_sets_learning_rate():
    w = torch.zeros(3, requires_grad=True)
    optimizer = _scalar_optimizer(w, name="hand.local_position")
    w.grad = torch.ones(3)
    adam_step(optimizer, 10, position_lr=lambda step: 1e-3 * step)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(1e-2)


def test_optimizer_groups_are_named_per_tensor():
    g = bind_initial_gaussians(_sheet(), 2, generator=make_generator(0)).requires_grad_(True)
    net = HandGeometryNet(3, n_freq=1, hidden=8)
    optimizer = build_optimizer({"hand": g}, {"hand_geo": net}, TrainConfig())
    names = [group["name"] for group in optimizer.param_groups]
    assert names == ["hand.local_position", "hand.log_scale", "hand.rotation", "hand.color_raw",
                     "hand.opacity_logit", "hand.point_feature", "net.hand_geo"]
    assert all(len(group["params"]) == 1 for group in optimizer.param_groups[:-1])


# ================================
# END TO END
# ================================

def test_image_gradient_reaches_network_weights():
    torch.manual_seed(4)
    mesh = _sheet()
    g = bind_initial_gaussians(mesh, 4, generator=make_generator(0))
    g = g.select(torch.arange(10))
    g.log_scale = torch.full((10, 3), math.log(3.0))
    frames = compute_local_frames(mesh)
    world_to_camera = torch.eye(4)
    world_to_camera[:3, 3] = torch.tensor([-0.5, -0.6, 3.0])
    cam = Camera(fx=16.0, fy=16.0, cx=7.5, cy=7.5, world_to_camera=world_to_camera, width=16, height=16)
    weights = torch.randn(16, 16, 3, generator=make_generator(7))
    net = HandGeometryNet(3, n_freq=1, hidden=8, depth=3)

    def loss() -> torch.Tensor:
        image = render(to_world(g, frames, hand_geo_offsets(net, g, _pose())), cam).image
        return (image * weights).sum()

    loss().backward()
    h = 1e-5
    for name in ("d_position", "d_scale"):
        weight = net.heads[name].weight
        analytic = weight.grad.clone()
        numeric = torch.zeros_like(weight)
        with torch.no_grad():
            for idx in range(weight.numel()):
                original = float(weight.view(-1)[idx])
                weight.view(-1)[idx] = original + h
                f_plus = float(loss())
                weight.view(-1)[idx] = original - h
                f_minus = float(loss())
                weight.view(-1)[idx] = original
                numeric.view(-1)[idx] = (f_plus - f_minus) / (2 * h)
        assert analytic.abs().max() > 0
        assert torch.allclose(analytic, numeric, rtol=1e-3, atol=1e-8), name
