import numpy as np
import pytest

from hgmmreg.geom import eig_sym3
from hgmmreg.gmmtree import (GmmTree, ModelConfig, ModelError, build_flat_gmm, build_tree,
                             check_moment_matching, fit_flat_mixture, fit_weighted_gmm, load_tree,
                             node_complexity, save_tree)

from conftest import CORNERS, make_blobs


def _match(means, centers):
    # index of the nearest fitted mean for every true center
    d = np.linalg.norm(means[None, :, :] - centers[:, None, :], axis=2)
    return d.argmin(axis=1)


def test_blob_cube_root_level(blobs):
    tree = build_tree(blobs, ModelConfig(max_level=1))
    assert len(tree) == 8
    idx = _match(tree.means, CORNERS)
    assert len(set(idx)) == 8
    sample_means = blobs.reshape(8, 1000, 3).mean(axis=1)
    tol = 3 * 0.01 / np.sqrt(1000)
    assert np.abs(tree.means[idx] - sample_means).max() <= tol
    assert np.abs(tree.weights - 1 / 8).max() <= 0.02


def test_identical_points():
    tree = build_tree(np.ones((500, 3)), ModelConfig(max_level=2))
    assert np.allclose(tree.means, 1.0)
    assert np.allclose(tree.complexity, 1 / 3)
    assert np.all(tree.covs[:, [0, 1, 2], [0, 1, 2]] > 0)


def test_plane_components_are_flat(plane):
    tree = build_tree(plane, ModelConfig(max_level=2))
    top = tree.level == 0
    # total least squares normal of the whole plane
    normal = np.linalg.svd(plane - plane.mean(axis=0))[2][2]
    assert np.all(tree.complexity[top] <= 0.01)
    assert np.all(np.abs(np.abs(tree.mixture.axes[top, 2] @ normal) - 1) <= 1e-3)


def test_tree_invariants(object_5k):
    tree = build_tree(object_5k, ModelConfig(max_level=3))
    assert check_moment_matching(tree) == []
    assert abs(tree.absolute_weights()[tree.level == 0].sum() - 1) <= 1e-9
    for i in range(-1, len(tree)):
        ch = tree.children(i)
        if len(ch):
            assert abs(tree.weights[list(ch)].sum() - 1) <= 1e-9
            if i >= 0:
                assert np.all(tree.level[list(ch)] == tree.level[i] + 1)
    assert len(tree.leaves()) <= 8 ** 3
    assert np.all((tree.complexity >= 0) & (tree.complexity <= 1 / 3))
    for j in range(0, len(tree), 7):
        e = eig_sym3(tree.covs[j])
        assert np.linalg.norm(e.reconstruct() - tree.covs[j]) <= 1e-9 * np.linalg.norm(tree.covs[j])


def test_min_points_makes_leaves():
    pts = make_blobs(n_per=40)
    tree = build_tree(pts, ModelConfig(max_level=3, min_points_per_node=32))
    # 40-point blobs can be split at most once more into children of >= 32 expected points
    assert all(tree.is_leaf(i) for i in range(len(tree)) if tree.level[i] >= 1)


def test_build_deterministic(object_5k):
    cfg = ModelConfig(max_level=2, rng_seed=7)
    a, b = build_tree(object_5k, cfg), build_tree(object_5k, cfg)
    for x, y in [(a.weights, b.weights), (a.means, b.means), (a.covs, b.covs), (a.parent, b.parent)]:
        assert np.array_equal(x, y)


def test_serialization_round_trip(tmp_path, object_5k):
    tree = build_tree(object_5k, ModelConfig(max_level=2))
    save_tree(tree, tmp_path / "tree.json")
    back = load_tree(tmp_path / "tree.json")
    assert isinstance(back, GmmTree)
    assert np.array_equal(back.means, tree.means) and np.array_equal(back.covs, tree.covs)
    assert np.array_equal(back.level, tree.level) and back.max_level == tree.max_level


def test_build_errors():
    with pytest.raises(ModelError):
        build_tree(np.zeros((0, 3)))
    with pytest.raises(ModelError):
        build_tree(np.zeros((7, 3)))
    with pytest.raises((ModelError, ValueError)):
        build_tree(np.full((100, 3), np.nan))
    with pytest.raises(ValueError):
        ModelConfig(max_level=0)


def test_node_complexity():
    assert node_complexity(np.array([1.0, 1.0, 1.0])) == pytest.approx(1 / 3)
    assert node_complexity(np.array([1.0, 1.0, 0.0])) == 0.0
    assert node_complexity(np.array([0.5, 0.3, 0.2])) == pytest.approx(0.2)
    assert node_complexity(eig_sym3(np.diag([2.0, 1.0, 1.0]))) == pytest.approx(0.25)
    with pytest.raises(ModelError):
        node_complexity(np.zeros(3))


def test_flat_single_component():
    pts = np.random.default_rng(0).standard_normal((2000, 3)) * [1.0, 0.5, 0.2]
    comps = build_flat_gmm(pts, 1)
    assert len(comps) == 1 and comps[0].weight == pytest.approx(1.0)
    assert np.allclose(comps[0].mean, pts.mean(axis=0), atol=1e-12)
    # regularization only lifts eigenvalues below the floor, none here
    assert np.allclose(comps[0].cov, np.cov(pts.T, bias=True), atol=1e-12)


def test_flat_two_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal([0, 0, 0], 0.05, (500, 3))
    b = rng.normal([1, 0, 0], 0.05, (500, 3))
    comps = build_flat_gmm(np.concatenate([a, b]), 2)
    means = np.array([c.mean for c in comps])
    oracle = np.array([a.mean(axis=0), b.mean(axis=0)])
    idx = _match(means, oracle)
    assert np.abs(means[idx] - oracle).max() <= 3 * 0.05 / np.sqrt(500)
    assert sum(c.weight for c in comps) == pytest.approx(1.0, abs=1e-9)


def test_flat_blob_cube(blobs):
    comps = build_flat_gmm(blobs, 8)
    means = np.array([c.mean for c in comps])
    idx = _match(means, CORNERS)
    assert len(set(idx)) == 8
    sample_means = blobs.reshape(8, 1000, 3).mean(axis=1)
    assert np.abs(means[idx] - sample_means).max() <= 3 * 0.01 / np.sqrt(1000)


def test_flat_errors(blobs):
    with pytest.raises(ModelError):
        build_flat_gmm(blobs, 0)
    with pytest.raises(ModelError):
        build_flat_gmm(blobs[:5], 6)


@pytest.mark.parametrize("seed", range(5))
def test_em_likelihood_ascent(seed, object_5k):
    _, ll = fit_flat_mixture(object_5k, 16, ModelConfig(rng_seed=seed))
    assert np.all(np.diff(ll) >= -1e-9)


def test_weighted_em_ascent():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3000, 3)) * [2, 1, 0.3]
    w = rng.uniform(0, 1, 3000)
    means = x[rng.choice(3000, 8, replace=False)]
    covs = np.repeat(np.eye(3)[None] * 0.5, 8, axis=0)
    fit = fit_weighted_gmm(x, w, means, covs, np.full(8, 1 / 8), 20, 1e-6)
    assert np.all(np.diff(fit.loglik) >= -1e-9)
