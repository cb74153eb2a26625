import pytest
import torch

from app.gaussians import covariance_from_scale_rotation
from app.models import Camera, WorldGaussians
from app.rasterizer import BLUR, project, render, render_backward, render_reference
from app.utils import ContractViolation, make_generator, quat_normalize


def _camera(size: int = 16, focal: float = 16.0) -> Camera:
    c = (size - 1) / 2.0
    return Camera(fx=focal, fy=focal, cx=c, cy=c, world_to_camera=torch.eye(4), width=size, height=size)


def _scene(num: int, generator: torch.Generator, scale=(0.002, 0.02), spread: float = 0.12) -> WorldGaussians:
    means = torch.cat([
        spread * (2 * torch.rand(num, 2, generator=generator) - 1),
        0.5 + torch.rand(num, 1, generator=generator),
    ], dim=1)
    lo, hi = scale
    scales = lo + (hi - lo) * torch.rand(num, 3, generator=generator)
    rotations = quat_normalize(torch.randn(num, 4, generator=generator))
    return WorldGaussians(
        means=means,
        scales=scales,
        rotations=rotations,
        covariances=covariance_from_scale_rotation(scales, rotations),
        colors=torch.rand(num, 3, generator=generator),
        opacities=0.2 + 0.7 * torch.rand(num, generator=generator),
    )


def _single(mean, scale: float, color, opacity: float) -> WorldGaussians:
    scales = torch.full((1, 3), scale)
    rotations = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
    return WorldGaussians(means=torch.tensor([mean]), scales=scales, rotations=rotations,
                          covariances=covariance_from_scale_rotation(scales, rotations),
                          colors=torch.tensor([color]), opacities=torch.tensor([opacity]))


# ================================
# PROJECTION
# ================================

def test_on_axis_mean_hits_principal_point():
    cam = _camera()
    proj = project(torch.tensor([[0.0, 0.0, 2.0]]), torch.eye(3)[None] * 1e-4, cam)
    assert torch.allclose(proj.mean2d[0], torch.tensor([cam.cx, cam.cy]))
    assert bool(proj.valid[0])


def test_isotropic_projection_on_axis():
    cam = _camera(focal=20.0)
    sigma, depth = 0.01, 0.5
    proj = project(torch.tensor([[0.0, 0.0, depth]]), (sigma ** 2 * torch.eye(3))[None], cam)
    expected = ((20.0 * sigma / depth) ** 2 + BLUR) * torch.eye(2)
    assert torch.allclose(proj.cov2d[0], expected, atol=1e-12)


def test_projection_matches_dense_jacobian_off_axis():
    cam = _camera(focal=20.0)
    mean = torch.tensor([0.05, -0.03, 0.7])
    cov = covariance_from_scale_rotation(torch.tensor([0.01, 0.02, 0.005]),
                                         quat_normalize(torch.tensor([0.9, 0.1, -0.3, 0.2])))
    x, y, z = mean.tolist()
    J = torch.tensor([[20.0 / z, 0.0, -20.0 * x / z ** 2], [0.0, 20.0 / z, -20.0 * y / z ** 2]])
    proj = project(mean[None], cov[None], cam)
    assert torch.allclose(proj.cov2d[0], J @ cov @ J.T + BLUR * torch.eye(2), atol=1e-12)


def test_doubling_depth_halves_extent():
    cam = _camera(focal=20.0)
    cov = (0.02 ** 2 * torch.eye(3))[None]
    near = project(torch.tensor([[0.0, 0.0, 0.5]]), cov, cam).cov2d[0] - BLUR * torch.eye(2)
    far = project(torch.tensor([[0.0, 0.0, 1.0]]), cov, cam).cov2d[0] - BLUR * torch.eye(2)
    assert torch.allclose(far.diagonal().sqrt(), 0.5 * near.diagonal().sqrt(), atol=1e-12)


def test_behind_camera_is_culled():
    out = render(_single([0.0, 0.0, -1.0], 0.05, [1.0, 1.0, 1.0], 0.9), _camera())
    assert torch.equal(out.image, torch.zeros(16, 16, 3))
    assert float(out.radii[0]) == 0.0
    assert not bool(out.visibility[0])


# ================================
# FORWARD
# ================================

def test_empty_set_renders_background():
    out = render(WorldGaussians.empty(torch.float64), _camera())
    assert torch.equal(out.image, torch.zeros(16, 16, 3))
    bg = torch.tensor([0.2, 0.4, 0.6])
    out = render(WorldGaussians.empty(torch.float64), _camera(), background=bg)
    assert torch.allclose(out.image, bg.expand(16, 16, 3))


def test_opaque_gaussian_centered_on_pixel_shows_its_color():
    cam = Camera(fx=16.0, fy=16.0, cx=8.0, cy=8.0, world_to_camera=torch.eye(4), width=16, height=16)
    out = render(_single([0.0, 0.0, 1.0], 0.05, [0.3, 0.6, 0.9], 1.0), cam)
    assert torch.allclose(out.image[8, 8], torch.tensor([0.3, 0.6, 0.9]), atol=1e-12)


def test_half_transparent_white_over_opaque_black():
    cam = Camera(fx=16.0, fy=16.0, cx=8.0, cy=8.0, world_to_camera=torch.eye(4), width=16, height=16)
    front = _single([0.0, 0.0, 1.0], 0.05, [1.0, 1.0, 1.0], 0.5)
    back = _single([0.0, 0.0, 2.0], 0.1, [0.0, 0.0, 0.0], 0.999)
    out = render(back.concat(front), cam)
    assert torch.allclose(out.image[8, 8], torch.full((3,), 0.5), atol=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_tile_renderer_matches_brute_force_oracle(seed):
    gen = make_generator(seed)
    cam = _camera(size=32, focal=32.0)
    scene = _scene(int(torch.randint(1, 51, (1,), generator=gen)), gen)
    tiled = render(scene, cam).image
    assert torch.allclose(tiled, render_reference(scene, cam), atol=1e-5)


def test_tile_size_does_not_change_the_image():
    gen = make_generator(4)
    cam = _camera(size=40, focal=40.0)
    scene = _scene(30, gen)
    a = render(scene, cam, tile_size=16).image
    b = render(scene, cam, tile_size=8).image
    assert torch.allclose(a, b, atol=1e-12)


def test_identical_inputs_render_identically():
    scene = _scene(20, make_generator(6))
    cam = _camera(size=32, focal=32.0)
    assert torch.equal(render(scene, cam).image, render(scene, cam).image)


def test_visibility_requires_contribution():
    scene = _scene(10, make_generator(8))
    scene.opacities[0] = 0.0
    out = render(scene, _camera(size=32, focal=32.0))
    assert not bool(out.visibility[0])
    assert torch.equal(out.visibility, out.contributions > 1e-3)


# ================================
# BACKWARD
# ================================

def _wide_scene(generator: torch.Generator) -> WorldGaussians:
    """Footprints larger than the image: no pixel sits on a 3-sigma edge"""
    scene = _scene(5, generator, scale=(1.2, 1.6), spread=0.1)
    scene.opacities = 0.2 + 0.3 * torch.rand(5, generator=generator)
    return scene


def _inner(scene: WorldGaussians, cam: Camera, weights: torch.Tensor) -> float:
    return float((render(scene, cam).image * weights).sum())


def test_zero_image_gradient_gives_zero_gradients():
    cam = _camera()
    out = render(_scene(5, make_generator(2)), cam, track_gradients=True)
    grads = render_backward(torch.zeros(16, 16, 3), out.state)
    for g in (grads.means, grads.covariances, grads.colors, grads.opacities, grads.means2d):
        assert torch.count_nonzero(g) == 0


def test_color_gradient_is_alpha():
    cam = Camera(fx=16.0, fy=16.0, cx=8.0, cy=8.0, world_to_camera=torch.eye(4), width=16, height=16)
    out = render(_single([0.0, 0.0, 1.0], 0.05, [0.5, 0.5, 0.5], 0.7), cam, track_gradients=True)
    pixel = torch.zeros(16, 16, 3)
    pixel[8, 8, 1] = 1.0
    grads = render_backward(pixel, out.state)
    assert float(grads.colors[0, 1]) == pytest.approx(0.7, abs=1e-12)
    assert float(grads.colors[0, 0]) == 0.0


def test_gradients_match_central_differences():
    gen = make_generator(13)
    cam = _camera()
    scene = _wide_scene(gen)
    weights = torch.randn(16, 16, 3, generator=gen)
    out = render(scene, cam, track_gradients=True)
    grads = render_backward(weights, out.state)

    h = 1e-4
    for name, analytic in (("means", grads.means), ("covariances", grads.covariances),
                           ("colors", grads.colors), ("opacities", grads.opacities)):
        base = getattr(scene, name)
        numeric = torch.zeros_like(base)
        for idx in range(base.numel()):
            plus, minus = base.clone(), base.clone()
            plus.view(-1)[idx] += h
            minus.view(-1)[idx] -= h
            f_plus = _inner(WorldGaussians(**{**scene.__dict__, name: plus}), cam, weights)
            f_minus = _inner(WorldGaussians(**{**scene.__dict__, name: minus}), cam, weights)
            numeric.view(-1)[idx] = (f_plus - f_minus) / (2 * h)
        assert torch.allclose(analytic, numeric, rtol=1e-3, atol=1e-6), name


def test_backward_contract_violations():
    cam = _camera()
    scene = _scene(3, make_generator(1))
    with pytest.raises(ContractViolation):
        render_backward(torch.zeros(16, 16, 3), None)

    out = render(scene, cam, track_gradients=True)
    with pytest.raises(ContractViolation):
        render_backward(torch.zeros(8, 8, 3), out.state)

    render_backward(torch.ones(16, 16, 3), out.state)
    with pytest.raises(ContractViolation):
        render_backward(torch.ones(16, 16, 3), out.state)


def test_viewspace_norm_scales_pixel_gradient():
    cam = _camera()
    out = render(_scene(4, make_generator(3)), cam, track_gradients=True)
    grads = render_backward(torch.ones(16, 16, 3), out.state)
    expected = (grads.means2d * torch.tensor([8.0, 8.0])).norm(dim=-1)
    assert torch.allclose(grads.viewspace_norm, expected)
