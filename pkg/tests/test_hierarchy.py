import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erf import _kernels
from erf.config import Config
from erf.hierarchy import (hysteresis_select, merge, merge_with_mapping, probe_opacity,
                           required_nodes, structure_phase, subdivide)
from erf.optimize import OptState
from erf.render import Camera
from erf.scene import Aabb, create_dense_grid

from conftest import random_model

UNIT_CUBE = Aabb([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


def level_field(svo, depth, points):
    points = np.ascontiguousarray(points, dtype=np.float64)
    return _kernels.level_field_and_grad(svo.children, svo.lut, svo.params, svo.border,
                                         svo.root_min, svo.root_side, int(depth), points,
                                         svo.channels)


def near_camera(fx=100.0):
    return Camera.look_at([0.5, 0.5, 3.0], [0.5, 0.5, 0.5], [0.0, 1.0, 0.0], fx, 100, 100)


def grid_coords(n):
    return np.array([(i, j, k) for i in range(n) for j in range(n) for k in range(n)])


# required-node search

def test_all_transparent_gives_empty_required_set():
    model = random_model(depth=2, seed=0)
    model.svo.params[:, 0] = -5.0
    assert not required_nodes(model.svo).any()


def test_single_confident_node_gains_its_26_neighbours():
    coords = grid_coords(8)
    values = np.zeros(len(coords))
    centre = np.nonzero(np.all(coords == (4, 4, 4), axis=1))[0][0]
    values[centre] = 0.8
    mask = hysteresis_select(coords, values, 8)
    assert mask.sum() == 27
    assert np.all(np.abs(coords[mask] - 4).max(axis=1) <= 1)


def test_single_confident_node_in_a_corner():
    coords = grid_coords(4)
    values = np.zeros(len(coords))
    values[0] = 0.9
    assert hysteresis_select(coords, values, 4).sum() == 8


def test_hysteresis_chain():
    # 0.8 - 0.1 - 0.1 - 0.02 along x: three visited, then one ring of dilation
    coords = np.array([(i, 0, 0) for i in range(8)])
    values = np.array([0.8, 0.1, 0.1, 0.02, 0.0, 0.0, 0.0, 0.0])
    mask = hysteresis_select(coords, values, 8)
    assert mask.tolist() == [True] * 4 + [False] * 4
    # a gap below the low threshold stops the search before the 0.1 run
    values = np.array([0.8, 0.02, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0])
    assert hysteresis_select(coords, values, 8).tolist() == [True, True] + [False] * 6


def test_below_high_threshold_never_seeds():
    coords = grid_coords(4)
    values = np.full(len(coords), 0.74)
    assert not hysteresis_select(coords, values, 4).any()


def test_probe_reads_constrained_opacity_maximum():
    model = create_dense_grid(UNIT_CUBE, 1, 1, dtype=np.float64)
    model.svo.params[:, 0] = 0.5
    model.svo.border[0] = 0.5
    np.testing.assert_allclose(probe_opacity(model.svo), 0.5, atol=1e-12)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=15, deadline=None)
def test_required_set_is_monotone_in_opacity(seed):
    rng = np.random.default_rng(seed)
    model = random_model(depth=2, bands=1, seed=seed % 97)
    svo = model.svo
    svo.params[:, 0] = rng.uniform(-0.2, 1.2, svo.n_nodes)
    svo.params[:, 1:4] = rng.normal(scale=0.3, size=(svo.n_nodes, 3))
    before = required_nodes(svo)
    raised = model.copy()
    raised.svo.params[:, 0] += rng.uniform(0.0, 0.5, svo.n_nodes) * (rng.random(svo.n_nodes) < 0.5)
    after = required_nodes(raised.svo)
    assert np.all(after[before])


# merge

def test_merge_with_nothing_required_collapses_to_root():
    svo = random_model(depth=3).svo
    assert merge(svo, np.zeros(svo.n_nodes, dtype=bool)).n_nodes == 1


def test_merge_with_all_leaves_required_is_identity():
    svo = random_model(depth=3).svo
    out = merge(svo, svo.is_leaf)
    assert out.n_nodes == svo.n_nodes
    assert out.params.tobytes() == svo.params.tobytes()


def test_merge_single_required_leaf_keeps_its_branch():
    svo = random_model(depth=3).svo
    required = np.zeros(svo.n_nodes, dtype=bool)
    leaf = svo.find(3, (5, 2, 7))
    required[leaf] = True
    out, source = merge_with_mapping(svo, required)
    assert out.n_nodes == 1 + 8 + 8 + 8
    assert leaf in source
    kept = out.find(3, (5, 2, 7))
    np.testing.assert_array_equal(out.params[kept], svo.params[leaf])
    assert out.find(3, (0, 0, 0)) is None or out.find(3, (0, 0, 0)) < 0


@given(st.integers(0, 10 ** 6), st.floats(0.0, 0.3))
@settings(max_examples=30, deadline=None)
def test_merge_keeps_required_and_full_sibling_groups(seed, rate):
    rng = np.random.default_rng(seed)
    svo = random_model(depth=3, bands=1).svo
    required = rng.random(svo.n_nodes) < rate
    out, source = merge_with_mapping(svo, required)
    assert set(np.nonzero(required)[0]) <= set(source.tolist())
    np.testing.assert_array_equal(out.params, svo.params[source])
    counts = np.bincount(out.parents[1:], minlength=out.n_nodes)
    assert set(np.unique(counts)) <= {0, 8}


# subdivision

def test_far_cameras_block_subdivision():
    svo = random_model(depth=2, box=UNIT_CUBE).svo
    out, changed = subdivide(svo, svo.is_leaf, [near_camera(fx=1.0)])
    assert not changed and out is svo


def test_unseen_leaves_are_not_subdivided():
    svo = random_model(depth=2, box=UNIT_CUBE).svo
    away = Camera.look_at([0.5, 0.5, 3.0], [0.5, 0.5, 6.0], [0.0, 1.0, 0.0], 100.0, 100, 100)
    assert not subdivide(svo, svo.is_leaf, [away])[1]


def test_no_required_leaf_means_no_change():
    svo = random_model(depth=2, box=UNIT_CUBE).svo
    assert not subdivide(svo, np.zeros(svo.n_nodes, dtype=bool), [near_camera()])[1]


@pytest.mark.parametrize("seed", range(5))
def test_subdivision_reproduces_affine_parent_field(seed):
    rng = np.random.default_rng(seed)
    model = create_dense_grid(UNIT_CUBE, 2, 2, dtype=np.float64)
    svo = model.svo
    a = rng.normal(size=3)
    b = rng.normal()
    svo.params[:, 0] = svo.centers() @ a + b
    svo.params[:, 1:4] = a
    c = svo.channels
    sa = rng.normal(size=(3, c))
    sb = rng.normal(size=c)
    svo.params[:, 4:4 + c] = svo.centers() @ sa + sb
    for axis in range(3):
        svo.params[:, 4 + (axis + 1) * c:4 + (axis + 2) * c] = sa[axis]
    out, changed = subdivide(svo, svo.is_leaf, [near_camera()])
    assert changed and out.max_depth == 3
    pos = rng.uniform(0.25, 0.75, (200, 3))
    vals, grads = level_field(out, 3, pos)
    np.testing.assert_allclose(vals[:, 0], pos @ a + b, atol=1e-10)
    np.testing.assert_allclose(vals[:, 1:], pos @ sa + sb, atol=1e-10)
    np.testing.assert_allclose(grads[:, :, 0], np.broadcast_to(a, (200, 3)), atol=1e-10)


def test_child_rows_take_parent_level_value_and_gradient():
    svo = random_model(depth=2, bands=2, seed=9, box=UNIT_CUBE).svo
    rng = np.random.default_rng(0)
    svo.params[:, 1:4] = rng.normal(scale=0.5, size=(svo.n_nodes, 3))
    required = np.zeros(svo.n_nodes, dtype=bool)
    required[rng.choice(np.nonzero(svo.is_leaf)[0], 10, replace=False)] = True
    out, changed = subdivide(svo, required, [near_camera()])
    assert changed and out.n_nodes == svo.n_nodes + 80
    fresh = np.nonzero(out.depth == 3)[0]
    centers = out.centers(fresh)
    vals, grads = level_field(svo, 2, centers)
    c = svo.channels
    rows = out.params[fresh]
    np.testing.assert_allclose(rows[:, 0], vals[:, 0], atol=1e-10)
    np.testing.assert_allclose(rows[:, 1:4], grads[:, :, 0], atol=1e-10)
    np.testing.assert_allclose(rows[:, 4:4 + c], vals[:, 1:], atol=1e-10)
    for axis in range(3):
        np.testing.assert_allclose(rows[:, 4 + (axis + 1) * c:4 + (axis + 2) * c],
                                   grads[:, axis, 1:], atol=1e-10)


def test_node_budget_caps_subdivision_with_warning(caplog):
    svo = random_model(depth=2, box=UNIT_CUBE).svo
    svo.params[:, 0] = np.linspace(-1.0, 1.0, svo.n_nodes)
    with caplog.at_level(logging.WARNING, logger="erf.hierarchy"):
        out, changed = subdivide(svo, svo.is_leaf, [near_camera()], node_budget=svo.n_nodes + 20)
    assert changed and out.n_nodes == svo.n_nodes + 16
    assert "budget" in caplog.text
    # the two most opaque candidates win
    peak = probe_opacity(svo, np.nonzero(svo.is_leaf)[0])
    best = np.nonzero(svo.is_leaf)[0][np.argsort(-peak)[:2]]
    parents = set(out.parents[out.depth == 3].tolist())
    assert parents == {out.find(2, tuple(svo.coords[i])) for i in best}


# structure phase

def surface_model(scene, cfg):
    from erf.pipeline import initial_model
    model = initial_model(scene.aabb, cfg, 0)
    svo = model.svo
    # the eight finest cells around the centre are opaque
    inner = np.abs(svo.centers()).max(axis=1) < 0.5
    svo.params[:, 0] = np.where(inner & (svo.depth == cfg.init_depth), 2.0, -1.0)
    model.touch()
    return model


def test_structure_phase_resets_optimizer_after_refinement(tiny_cube):
    ds, scene = tiny_cube
    cfg = Config(sh_bands=1, init_depth=2)
    model = surface_model(scene, cfg)
    before = model.svo.n_nodes
    opt = OptState.create(model.n_params, lr=0.01)
    opt.step = 40
    opt.m[:] = 1.0
    opt.v[:] = 1.0
    model, opt, done = structure_phase(model, opt, ds, cfg)
    assert not done
    assert model.svo.max_depth == 3 and model.svo.n_nodes != before
    assert opt.step == 0 and opt.m.shape == (model.n_params,)
    assert not opt.m.any() and not opt.v.any() and opt.lr == 0.01


def test_structure_phase_on_empty_scene_is_done(tiny_cube):
    ds, scene = tiny_cube
    cfg = Config(sh_bands=1, init_depth=2)
    model = surface_model(scene, cfg)
    model.svo.params[:, 0] = -3.0
    model, opt, done = structure_phase(model, None, ds, cfg)
    assert done and model.svo.n_nodes == 1


def test_structure_phase_stops_at_camera_resolution(tiny_cube):
    ds, scene = tiny_cube
    cfg = Config(sh_bands=1, init_depth=2)
    model = surface_model(scene, cfg)
    done, rounds = False, 0
    while not done:
        model, _, done = structure_phase(model, None, ds, cfg)
        rounds += 1
        assert rounds < 10
    # every centre is at least 3.2 - sqrt(3) from every camera
    finest = model.svo.root_side / 2 ** model.svo.max_depth
    slope = min(ds.cameras[i].pixel_slope(0) for i in ds.train)
    assert finest >= (3.2 - np.sqrt(3.0)) * slope
    assert model.svo.max_depth > cfg.init_depth
