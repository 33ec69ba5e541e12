import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from erf.data import DataError, build_pyramid, load_nerf_synthetic, save_nerf_synthetic
from erf.render import Camera, pixel_directions
from erf.synthetic import CAMERA_ANGLE_X, make_scene, make_synthetic_scene, render_analytic


def test_constant_image_is_constant_on_every_level():
    levels = build_pyramid(np.full((12, 7, 3), 0.3))
    assert len(levels) == 5
    for img in levels:
        np.testing.assert_allclose(img, 0.3, atol=1e-7)


def test_two_by_two_pyramid():
    img = np.array([[0.0, 0.0], [1.0, 1.0]])[:, :, None].repeat(3, axis=2)
    levels = build_pyramid(img)
    assert len(levels) == 2
    np.testing.assert_allclose(levels[1], 0.5)


def test_level_count_for_800_pixels():
    levels = build_pyramid(np.zeros((800, 800, 3), dtype=np.float32))
    assert len(levels) - 1 == 10
    assert [lv.shape[0] for lv in levels] == [800, 400, 200, 100, 50, 25, 13, 7, 4, 2, 1]


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_power_of_two_pyramid_preserves_mean(a, b, seed):
    img = np.random.default_rng(seed).random((2 ** a, 2 ** b, 3))
    for level in build_pyramid(img):
        assert abs(level.mean() - img.mean()) <= 1e-6


@given(st.integers(1, 40), st.integers(1, 40))
@settings(max_examples=30, deadline=None)
def test_pyramid_dims_halve_with_ceiling(h, w):
    levels = build_pyramid(np.zeros((h, w, 3)))
    for prev, cur in zip(levels, levels[1:]):
        assert cur.shape[:2] == (-(-prev.shape[0] // 2), -(-prev.shape[1] // 2))
    assert levels[-1].shape[:2] == (1, 1)


def write_dataset(root, frames, angle=CAMERA_ANGLE_X, size=8):
    (root / "train").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, pose in enumerate(frames):
        rgba = np.zeros((size, size, 4), dtype=np.uint8)
        rgba[..., 0] = 255
        rgba[: size // 2, :, 3] = 255
        Image.fromarray(rgba, "RGBA").save(root / "train" / f"r_{k}.png")
        entries.append({"file_path": f"./train/r_{k}", "transform_matrix": pose})
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": angle,
                                                            "frames": entries}))


def test_focal_length_from_field_of_view(tmp_path):
    write_dataset(tmp_path, [np.eye(4).tolist()], size=800)
    ds = load_nerf_synthetic(tmp_path)
    cam = ds.cameras[0]
    assert cam.fx == pytest.approx(1111.111, abs=1e-3)
    assert cam.fy == cam.fx and (cam.cx, cam.cy) == (400.0, 400.0)


def test_identity_pose_looks_down_negative_z(tmp_path):
    write_dataset(tmp_path, [np.eye(4).tolist()])
    cam = load_nerf_synthetic(tmp_path).cameras[0]
    o, d = pixel_directions(cam, 0, np.array([cam.cx - 0.5]), np.array([cam.cy - 0.5]))
    np.testing.assert_allclose(o[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(d[0], [0.0, 0.0, -1.0], atol=1e-12)


def test_alpha_is_composited_over_the_chosen_background(tmp_path):
    write_dataset(tmp_path, [np.eye(4).tolist()])
    white = load_nerf_synthetic(tmp_path).image(0)
    black = load_nerf_synthetic(tmp_path, white_background=False).image(0)
    np.testing.assert_allclose(white[:4], np.broadcast_to([1.0, 0.0, 0.0], (4, 8, 3)))
    np.testing.assert_allclose(white[4:], 1.0)
    np.testing.assert_allclose(black[4:], 0.0)


def test_truncated_json_names_the_file(tmp_path):
    write_dataset(tmp_path, [np.eye(4).tolist()])
    path = tmp_path / "transforms_train.json"
    path.write_text(path.read_text()[:-20])
    with pytest.raises(DataError, match="transforms_train.json"):
        load_nerf_synthetic(tmp_path)


def test_non_rigid_rotation_is_rejected(tmp_path):
    pose = np.eye(4)
    pose[0, 0] = 1.01
    write_dataset(tmp_path, [pose.tolist()])
    with pytest.raises(DataError, match="rigid"):
        load_nerf_synthetic(tmp_path)


def test_missing_directory_and_image(tmp_path):
    with pytest.raises(DataError):
        load_nerf_synthetic(tmp_path / "absent")
    write_dataset(tmp_path, [np.eye(4).tolist()])
    (tmp_path / "train" / "r_0.png").unlink()
    with pytest.raises(DataError, match="missing image"):
        load_nerf_synthetic(tmp_path)


def test_saved_dataset_loads_back(tmp_path, tiny_cube):
    ds, _ = tiny_cube
    save_nerf_synthetic(ds, tmp_path)
    back = load_nerf_synthetic(tmp_path)
    assert back.split == ds.split
    for a, b in zip(ds.cameras, back.cameras):
        np.testing.assert_allclose(a.pose, b.pose, atol=1e-12)
        assert a.fx == pytest.approx(b.fx, rel=1e-9)
    np.testing.assert_allclose(back.image(0), ds.image(0), atol=0.5 / 255 + 1e-6)


def test_synthetic_scene_needs_training_views():
    with pytest.raises(ValueError):
        make_synthetic_scene("checkered_cube", 0, 1, 8)
    with pytest.raises(ValueError):
        make_synthetic_scene("teapot", 1, 1, 8)


def test_synthetic_scene_is_deterministic():
    a, _ = make_synthetic_scene("sphere", 3, 1, 16, 4)
    b, _ = make_synthetic_scene("sphere", 3, 1, 16, 4)
    for x, y in zip(a.pyramids, b.pyramids):
        assert x[0].tobytes() == y[0].tobytes()
    for x, y in zip(a.cameras, b.cameras):
        assert x.pose.tobytes() == y.pose.tobytes()


def test_frontal_checker_squares_have_projected_size():
    scene = make_scene("checkered_cube")
    res = 270
    cam = Camera.look_at([0.0, 0.0, 3.2], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                         0.5 * res / np.tan(0.5 * CAMERA_ANGLE_X), res, res)
    img, depth = render_analytic(scene, cam, supersample=1)
    row = res // 2
    # the +z face sits at distance 2.7 straight ahead (half a pixel off axis)
    assert depth[row, row] == pytest.approx(2.7, abs=1e-5)
    line = img[row]
    edges = np.nonzero(np.abs(np.diff(line, axis=0)).sum(axis=1) > 0.1)[0] + 0.5
    square = cam.fx * 0.25 / 2.7
    expected = cam.cx + square * np.arange(-2, 3) - 0.5
    assert len(edges) == 5
    np.testing.assert_allclose(edges, expected, atol=1.0)
