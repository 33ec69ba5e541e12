import numpy as np

from erf.edit import edit_cut, edit_recolor
from erf.render import Camera, render_image
from erf.scene import Aabb, create_dense_grid, init_random

Y00 = 0.28209479177387814
RB_SWAP = [[0, 0, 1], [0, 1, 0], [1, 0, 0]]


def red_cube(depth=3):
    """Opaque red cube |x| < 0.5 inside [-1, 1]^3 on a grey background."""
    model = create_dense_grid(Aabb([-1.0] * 3, [1.0] * 3), depth, 1, 4, dtype=np.float64)
    svo = model.svo
    inside = np.abs(svo.centers()).max(axis=1) < 0.5
    svo.params[:, 0] = np.where(inside, 3.0, -3.0)
    svo.params[:, 4:7] = np.array([0.9, 0.1, 0.1]) / Y00
    svo.border[4:7] = 0.0
    model.background.texels[:] = 0.5
    model.touch()
    return model


def front_camera(res=32):
    return Camera.look_at([0.0, -3.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 1.2 * res, res, res)


def render(model, cam):
    return render_image(model, cam, 0, "color", seed=0)


def test_identity_recolor_leaves_model_unchanged():
    model = init_random(create_dense_grid(Aabb([-1.0] * 3, [1.0] * 3), 2, 3, 4), 0)
    out = edit_recolor(model, model.aabb, np.eye(3))
    assert out.params.tobytes() == model.params.tobytes()


def test_recolor_outside_the_scene_is_a_no_op():
    model = red_cube(2)
    out = edit_recolor(model, Aabb([5.0] * 3, [6.0] * 3), RB_SWAP)
    assert out.params.tobytes() == model.params.tobytes()


def test_recolor_does_not_modify_its_input():
    model = red_cube(2)
    before = model.params.copy()
    edit_recolor(model, model.aabb, RB_SWAP)
    assert model.params.tobytes() == before.tobytes()


def test_swapping_red_and_blue_turns_red_object_blue():
    model = red_cube()
    cam = front_camera()
    red = render(model, cam)
    blue = render(edit_recolor(model, model.aabb, RB_SWAP), cam)
    centre = red[14:18, 14:18]
    assert np.all(centre[..., 0] > 0.8) and np.all(centre[..., 2] < 0.2)
    np.testing.assert_allclose(blue, red[..., ::-1], atol=1e-9)


def test_recolor_applies_to_sh_gradients_too():
    model = create_dense_grid(Aabb([-1.0] * 3, [1.0] * 3), 1, 2, 4, dtype=np.float64)
    init_random(model, 3)
    svo = model.svo
    svo.params[:, 4:] = np.random.default_rng(0).normal(size=svo.params[:, 4:].shape)
    mix = np.random.default_rng(1).normal(size=(3, 3))
    out = edit_recolor(model, model.aabb, mix)
    c = svo.channels
    for part in range(4):
        cols = slice(4 + part * c, 4 + (part + 1) * c)
        src = svo.params[:, cols].reshape(-1, 3, 4)
        np.testing.assert_allclose(out.svo.params[:, cols].reshape(-1, 3, 4),
                                   np.einsum("ij,njk->nik", mix, src), atol=1e-12)


def test_cut_with_empty_box_is_a_no_op():
    model = red_cube(2)
    out = edit_cut(model, Aabb([5.0] * 3, [6.0] * 3))
    assert out.params.tobytes() == model.params.tobytes()


def test_cut_everything_renders_as_free_space():
    model = red_cube()
    cam = front_camera()
    out = edit_cut(model, model.aabb)
    assert out.svo.n_nodes == model.svo.n_nodes
    # every opacity plane now equals the border plane
    free = model.copy()
    free.svo.params[:, 0:4] = free.svo.border[0:4]
    free.touch()
    for mode in ("opacity", "color"):
        np.testing.assert_array_equal(render_image(out, cam, 0, mode, seed=0),
                                      render_image(free, cam, 0, mode, seed=0))
    # each sample carries only the border opacity f(-0.5) = 3.35e-4
    opacity = render_image(out, cam, 0, "opacity", seed=0)
    assert opacity.max() < 0.03
    np.testing.assert_allclose(render(out, cam), 0.5, atol=0.03 * 0.4)


def test_cutting_half_the_cube_halves_its_silhouette():
    model = red_cube()
    cam = front_camera(48)
    full = render_image(model, cam, 0, "opacity", seed=0) > 0.5
    cut = edit_cut(model, Aabb([0.0, -1.0, -1.0], [1.0, 1.0, 1.0]))
    half = render_image(cut, cam, 0, "opacity", seed=0) > 0.5
    assert full.sum() > 100
    assert abs(half.sum() / full.sum() - 0.5) < 0.1
    cols = np.nonzero(half.any(axis=0))[0]
    # the +x half is gone; the camera looks along +y with +x to the right
    assert cols.max() <= cam.cx + 1
