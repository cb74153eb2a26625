import json

import pytest
import torch
from pydantic import ValidationError

from app.models import Camera
from app.scene import SceneSpec, bounding_box, generate_synthetic_scene, load_dataset, load_pose_sequence, \
    rasterize_mesh, read_mesh_file, save_dataset, to_uint8
from app.utils import ConfigError, DatasetError

SMALL = dict(num_frames=6, contact_frames=2, num_views=2, width=24, height=24, pbd_iters=10)


@pytest.fixture(scope="module")
def scene():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield generate_synthetic_scene(SceneSpec(**SMALL))
    finally:
        torch.set_default_dtype(previous)


@pytest.fixture
def saved(scene, tmp_path):
    root = tmp_path / "scene"
    save_dataset(scene, root)
    return root


# ================================
# SPEC
# ================================

def test_contact_frames_cannot_exceed_frames():
    with pytest.raises(ValidationError):
        SceneSpec(num_frames=2, contact_frames=3)


def test_tiny_images_are_rejected():
    with pytest.raises(ValidationError):
        SceneSpec(width=8)


def test_unreadable_spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        SceneSpec.from_file(path)
    path.write_text(json.dumps({"num_views": 0}))
    with pytest.raises(ConfigError):
        SceneSpec.from_file(path)


# ================================
# GENERATION
# ================================

def test_generated_scene_shape(scene):
    assert len(scene.frames) == 6
    assert scene.num_views == 2
    for frame in scene.frames:
        assert len(frame.images) == 2
        assert frame.images[0].shape == (24, 24, 3)
        assert frame.images[0].dtype == torch.uint8
    assert scene.region_mask.shape[0] == scene.face_faces.shape[0]
    assert scene.region_mask.any()


def test_contact_phase_is_flagged(scene):
    flags = scene.interaction_flags()
    assert not flags[0]
    assert flags[2] and flags[3]
    assert not flags[5]


def test_contact_frames_deform_the_face(scene):
    assert torch.count_nonzero(scene.deformations[0].vertex_offsets) == 0
    assert float(scene.deformations[2].vertex_offsets.norm(dim=-1).max()) > 0.0
    assert all(d.converged for d in scene.deformations.values())


def test_no_contact_frames_gives_all_false_flags():
    spec = SceneSpec(**{**SMALL, "contact_frames": 0, "num_frames": 3, "num_views": 1})
    dataset = generate_synthetic_scene(spec)
    assert dataset.interaction_flags() == [False, False, False]


def test_generation_is_deterministic(scene):
    again = generate_synthetic_scene(SceneSpec(**SMALL))
    for a, b in zip(scene.frames, again.frames):
        assert torch.equal(a.face_vertices, b.face_vertices)
        assert all(torch.equal(x, y) for x, y in zip(a.images, b.images))


def test_face_is_in_every_view(scene):
    for frame in scene.frames:
        for box in frame.face_bboxes:
            x0, y0, x1, y1 = box
            assert x1 > x0 and y1 > y0


# ================================
# IMAGING HELPERS
# ================================

def _camera() -> Camera:
    return Camera(fx=10.0, fy=10.0, cx=8.0, cy=8.0, world_to_camera=torch.eye(4), width=16, height=16)


def test_bounding_box_is_exclusive_and_clipped():
    points = torch.tensor([[-0.1, -0.1, 1.0], [0.1, 0.2, 1.0]])
    assert bounding_box(points, _camera()) == [7, 7, 10, 11]
    assert bounding_box(torch.tensor([[-5.0, -5.0, 1.0], [5.0, 5.0, 1.0]]), _camera()) == [0, 0, 16, 16]
    assert bounding_box(torch.tensor([[0.0, 0.0, -1.0]]), _camera()) == [0, 0, 0, 0]


def test_mesh_rasterizer_fills_triangle():
    vertices = torch.tensor([[-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [0.0, 1.0, 1.0]])
    colors = torch.tensor([[0.2, 0.4, 0.6]]).repeat(3, 1)
    image = rasterize_mesh(vertices, torch.tensor([[0, 1, 2]]), colors, _camera())
    assert torch.allclose(image[8, 8], torch.tensor([0.2, 0.4, 0.6]))
    assert torch.equal(image[0, 0], torch.zeros(3))


def test_to_uint8_rounds_and_clamps():
    assert to_uint8(torch.tensor([-0.5, 0.0, 0.5, 1.2])).tolist() == [0, 0, 128, 255]


# ================================
# DATASET IO
# ================================

def test_save_load_roundtrip(scene, saved):
    loaded = load_dataset(saved, workers=2)
    assert loaded.spec == scene.spec
    assert torch.equal(loaded.face_faces, scene.face_faces)
    assert torch.equal(loaded.region_mask, scene.region_mask)
    for a, b in zip(loaded.cameras, scene.cameras):
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
        assert torch.equal(a.world_to_camera, b.world_to_camera)
    for a, b in zip(loaded.frames, scene.frames):
        assert torch.equal(a.face_vertices, b.face_vertices)
        assert torch.equal(a.hand_vertices, b.hand_vertices)
        assert torch.equal(a.pose.t_hand, b.pose.t_hand)
        assert a.interaction == b.interaction
        assert a.hand_bboxes == b.hand_bboxes
        assert all(torch.equal(x, y) for x, y in zip(a.images, b.images))
    assert (saved / "deformation" / "summary.json").exists()


def test_pose_sequence_file(scene, saved):
    poses = load_pose_sequence(saved / "poses.json")
    assert len(poses) == len(scene.frames)
    assert torch.equal(poses[3].theta_hand, scene.frames[3].pose.theta_hand)


def test_truncated_mesh_names_the_frame(saved):
    path = saved / "frames" / "1" / "mesh_face"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(DatasetError) as err:
        load_dataset(saved)
    assert err.value.frame == 1
    with pytest.raises(DatasetError):
        read_mesh_file(path, frame=1)


def test_missing_view_names_the_frame(saved):
    (saved / "frames" / "2" / "views" / "1.png").unlink()
    with pytest.raises(DatasetError) as err:
        load_dataset(saved)
    assert err.value.frame == 2


def test_corrupt_image_names_the_frame(saved):
    (saved / "frames" / "0" / "views" / "0.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError) as err:
        load_dataset(saved)
    assert err.value.frame == 0


def test_bad_scene_magic(saved):
    meta = json.loads((saved / "scene.meta").read_text())
    meta["magic"] = "SOMETHING-ELSE"
    (saved / "scene.meta").write_text(json.dumps(meta))
    with pytest.raises(DatasetError):
        load_dataset(saved)


def test_missing_interaction_flag_means_no_contact(saved):
    path = saved / "frames" / "3" / "pose"
    data = json.loads(path.read_text())
    del data["interaction"]
    path.write_text(json.dumps(data))
    loaded = load_dataset(saved)
    assert loaded.frames[3].interaction is None
    assert loaded.interaction_flags()[3] is False
