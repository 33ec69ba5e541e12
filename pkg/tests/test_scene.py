import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erf.render import render_rays, slab_interval
from erf.scene import (Aabb, SceneModel, create_dense_grid, full_tree_nodes, init_opacity_bound,
                       init_random, node_lookup)
from erf.hierarchy import merge

from conftest import UNIT_BOX, random_model

UNIT_CUBE = Aabb([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


def test_dense_grid_depth_one():
    model = create_dense_grid(UNIT_CUBE, 1, 3)
    svo = model.svo
    assert svo.n_nodes == 9
    leaves = np.nonzero(svo.is_leaf)[0]
    assert leaves.shape[0] == 8
    assert all(svo.node(i).side == 0.5 for i in leaves)
    assert np.all(model.params == 0.0)


def test_dense_grid_depth_three_node_count():
    assert create_dense_grid(UNIT_CUBE, 3, 1).svo.n_nodes == 585


def test_dense_grid_rejects_budget_overflow():
    with pytest.raises(ValueError, match="budget"):
        create_dense_grid(UNIT_CUBE, 12, 1, node_budget=2 ** 24)


def test_dense_grid_rejects_bad_arguments():
    with pytest.raises(ValueError):
        create_dense_grid(UNIT_CUBE, 0, 1)
    with pytest.raises(ValueError):
        create_dense_grid(UNIT_CUBE, 1, 5)


@pytest.mark.parametrize("depth", range(0, 7))
def test_full_tree_node_count(depth):
    assert full_tree_nodes(depth) == (8 ** (depth + 1) - 1) // 7


def test_non_cubic_aabb_gets_enclosing_centred_root():
    box = Aabb([0.0, -1.0, 2.0], [4.0, 1.0, 3.0])
    svo = create_dense_grid(box, 1, 1).svo
    assert svo.root_side == 4.0
    np.testing.assert_allclose(svo.root_min + 2.0, box.center)


def test_child_centres_are_octants_of_parent():
    svo = create_dense_grid(UNIT_CUBE, 2, 1).svo
    for i in np.nonzero(~svo.is_leaf)[0]:
        node = svo.node(i)
        kids = np.array([svo.node(c).center for c in node.children])
        offsets = (kids - node.center) / (node.side / 4.0)
        assert np.all(np.abs(np.abs(offsets) - 1.0) < 1e-12)
        assert np.unique(np.sign(offsets), axis=0).shape[0] == 8
        assert all(svo.node(c).side == node.side / 2 for c in node.children)


def test_init_random_is_deterministic():
    a = random_model(depth=2, seed=1, dtype=np.float32)
    b = random_model(depth=2, seed=1, dtype=np.float32)
    assert a.params.tobytes() == b.params.tobytes()
    c = random_model(depth=2, seed=2, dtype=np.float32)
    assert a.params.tobytes() != c.params.tobytes()


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_init_band0_in_range_and_gradients_zero(seed):
    model = random_model(depth=1, bands=3, seed=seed)
    svo = model.svo
    nb2 = 9
    c = svo.channels
    sh = svo.params[:, 4:4 + c].reshape(-1, 3, nb2)
    assert np.all((sh[:, :, 0] >= 0.2475) & (sh[:, :, 0] <= 0.5025))
    assert np.all(np.abs(sh[:, :, 1:]) <= 0.025)
    assert np.all(svo.params[:, 1:4] == 0.0)
    assert np.all(svo.params[:, 4 + c:] == 0.0)
    tex = model.background.texels
    assert np.all((tex >= 0.0) & (tex <= 1.0))


def test_init_band0_mean_over_many_draws():
    means = []
    for seed in (3, 4):
        model = random_model(depth=4, bands=1, seed=seed)
        band0 = model.svo.params[:, 4:7].ravel()
        assert band0.size >= 10 ** 4
        means.append(band0)
    draws = np.concatenate(means)
    while draws.size < 10 ** 5:
        model = random_model(depth=4, bands=1, seed=int(draws.size))
        draws = np.concatenate([draws, model.svo.params[:, 4:7].ravel()])
    assert 0.365 <= draws.mean() <= 0.385


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
@pytest.mark.parametrize("seed", [0, 7])
def test_init_diagonal_ray_opacity_at_most_five_percent(depth, seed):
    # worst case: every node at the upper bound of the init law
    model = create_dense_grid(UNIT_BOX, depth, 1, 4, dtype=np.float64)
    init_random(model, seed)
    model.svo.params[:, 0] = init_opacity_bound("opacity", depth, model.svo.root_side)
    d = np.ones(3) / np.sqrt(3.0)
    origins = np.array([[-1.5, -1.5, -1.5]])
    dirs = d[None, :]
    t0, t1, hit = slab_interval(origins, dirs, model.aabb.min, model.aabb.max)
    for stream in range(5):
        out = render_rays(model, origins, dirs, t0, t1, hit, 1e-9, 8, seed=seed, stream=stream)
        assert out.opacity[0] <= 0.05


def test_node_lookup_root_centre():
    svo = create_dense_grid(UNIT_CUBE, 2, 1).svo
    node = node_lookup(svo, [0.5, 0.5, 0.5], 0)
    assert node.index == 0 and node.depth == 0


def test_node_lookup_returns_requested_depth():
    svo = create_dense_grid(UNIT_CUBE, 3, 1).svo
    node = node_lookup(svo, [0.1, 0.6, 0.9], 3)
    assert node.depth == 3
    assert np.all(np.abs(node.center - [0.1, 0.6, 0.9]) <= node.side / 2)


def test_node_lookup_falls_back_to_deepest_ancestor():
    svo = create_dense_grid(UNIT_CUBE, 2, 1).svo
    required = np.zeros(svo.n_nodes, dtype=bool)
    target = svo.find(2, (0, 0, 0))
    required[target] = True
    pruned = merge(svo, required)
    # (0.9, 0.9, 0.9) lies under a depth-1 leaf whose children were pruned
    node = node_lookup(pruned, [0.9, 0.9, 0.9], 5)
    assert node.depth == 1
    assert node_lookup(pruned, [0.05, 0.05, 0.05], 5).depth == 2


def test_node_lookup_outside_is_none():
    svo = create_dense_grid(UNIT_CUBE, 1, 1).svo
    assert node_lookup(svo, [1.5, 0.5, 0.5], 0) is None


def test_every_non_root_node_has_allocated_parent_and_seven_siblings():
    svo = merge(random_model(depth=3).svo, np.random.default_rng(0).random(585) < 0.05)
    parents = svo.parents
    assert parents[0] == -1
    assert np.all(parents[1:] >= 0)
    counts = np.bincount(parents[1:], minlength=svo.n_nodes)
    assert set(np.unique(counts)) <= {0, 8}


def test_model_params_are_views_of_flat_buffer():
    model = random_model(depth=1)
    model.params[0] = 42.0
    assert model.svo.params[0, 0] == 42.0
    model.params[-1] = -3.0
    assert model.background.texels[-1, -1, -1, -1] == -3.0
    assert isinstance(model.copy(), SceneModel)
