import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivforest import kernels
from ivforest.errors import ValidationError
from ivforest.forest import (ForestModel, TreeParams, default_mtry, depth_weights,
                             draw_subsamples, forest_weights, grow_forest, variable_importance)

BACKENDS = ["numba", "numpy"]


def _data(n=400, p=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = (X[:, 0] > 0) + 0.1 * rng.normal(size=n)
    cluster = np.arange(n) // 2
    return X, y, cluster



@pytest.mark.parametrize("backend", BACKENDS)
def test_constant_target_predicts_constant(backend):
    X, _, _ = _data()
    y = np.full(X.shape[0], 2.5)
    m = grow_forest(X, y, TreeParams(n_trees=20, seed=1), backend=backend)
    assert np.all(m.predict(X, backend=backend) == 2.5)
    assert m.flags["constant_target"]


def test_step_signal_oob_mse():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(2000, 3))
    y = (X[:, 0] > 0) + 0.01 * rng.normal(size=2000)
    m = grow_forest(X, y, TreeParams(n_trees=200, seed=2))
    pred = m.predict(X, oob=True)
    assert np.mean((pred - y) ** 2) < 0.05


def test_single_unsplittable_tree_predicts_estimation_mean():
    X, y, _ = _data(n=60)
    m = grow_forest(X, y, TreeParams(n_trees=1, bag_size=1, min_node_size=60))
    tree = m.tree(0)
    assert tree.leaves.tolist() == [0]
    np.testing.assert_allclose(m.predict(X), y[tree.est_rows].mean(), rtol=0, atol=1e-14)


def test_single_tree_weights_uniform_over_estimation_sample():
    X, y, _ = _data(n=60)
    m = grow_forest(X, y, TreeParams(n_trees=1, bag_size=1, min_node_size=60))
    a = forest_weights(m, X[0])
    est = m.tree(0).est_rows
    np.testing.assert_allclose(a[est], 1.0 / est.size, rtol=1e-14)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(a) == est.size


def test_two_region_weights_stay_local():
    rng = np.random.default_rng(8)
    n = 1000
    region = rng.integers(0, 2, n)
    X = np.column_stack([np.where(region == 1, 5.0, -5.0) + rng.normal(size=n),
                         rng.normal(size=n)])
    y = region + 0.1 * rng.normal(size=n)
    m = grow_forest(X, y, TreeParams(n_trees=200, seed=0))
    a = forest_weights(m, np.array([-5.0, 0.0]))
    assert a[region == 1].sum() < 0.05
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


def test_weights_reproduce_prediction():
    X, y, cl = _data()
    m = grow_forest(X, y, TreeParams(n_trees=40, seed=5), cluster_id=cl)
    for i in (0, 17, 101):
        a = forest_weights(m, X[i])
        assert a @ y == pytest.approx(m.predict(X[i:i + 1])[0], abs=1e-12)
        a_oob = forest_weights(m, X[i], oob_row=i)
        assert a_oob[i] == 0.0
        assert a_oob @ y == pytest.approx(m.predict(X, oob=True)[i], abs=1e-12)


def test_weighted_rows_change_leaf_means():
    X, y, _ = _data()
    w = np.where(X[:, 1] > 0, 3.0, 1.0)
    m = grow_forest(X, y, TreeParams(n_trees=20, seed=5), weights=w)
    a = forest_weights(m, X[3])
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    assert a @ y == pytest.approx(m.predict(X[3:4])[0], abs=1e-12)


def test_no_splits_importance_zero():
    X, y, _ = _data(n=60)
    m = grow_forest(X, y, TreeParams(n_trees=4, min_node_size=60))
    assert np.all(variable_importance(m) == 0)


def test_importance_ranks_signal_feature():
    X, y, _ = _data(n=1000)
    m = grow_forest(X, y, TreeParams(n_trees=100, seed=1))
    vi = variable_importance(m)
    assert np.argmax(vi) == 0
    assert vi.sum() == pytest.approx(1.0)


def test_importance_excludes_features():
    X, y, _ = _data(n=1000)
    m = grow_forest(X, y, TreeParams(n_trees=50, seed=1))
    vi = variable_importance(m, exclude=np.array([True, False, False]))
    assert vi[0] == 0 and 0 < vi.sum() <= 1.0 + 1e-12


def test_depth_weights():
    np.testing.assert_allclose(depth_weights(4), np.array([1, 1 / 4, 1 / 9, 1 / 16]) / (1 + 1 / 4 + 1 / 9 + 1 / 16))


@pytest.mark.parametrize("p, expected", [(1, 1), (5, 5), (30, 26), (100, 30)])
def test_default_mtry(p, expected):
    assert default_mtry(p) == expected


@pytest.mark.parametrize("kw", [dict(n_trees=0), dict(subsample_fraction=0), dict(honesty_fraction=1.0),
                                dict(min_node_size=0), dict(alpha=0.5), dict(mtry=0), dict(bag_size=0)])
def test_tree_params_validation(kw):
    with pytest.raises(ValidationError):
        TreeParams(**kw)


def test_tree_count_rounded_to_bags():
    assert TreeParams(n_trees=10, bag_size=4).n_trees == 12


def test_mtry_larger_than_p():
    X, y, _ = _data()
    with pytest.raises(ValidationError, match="mtry"):
        grow_forest(X, y, TreeParams(n_trees=4, mtry=5))


def test_predict_checks_width():
    X, y, _ = _data()
    m = grow_forest(X, y, TreeParams(n_trees=4))
    with pytest.raises(ValidationError):
        m.predict(X[:, :2])


def test_save_load_round_trip(tmp_path):
    X, y, cl = _data()
    m = grow_forest(X, y, TreeParams(n_trees=8, seed=2), cluster_id=cl)
    m.save(tmp_path / "a.npz")
    m.save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = ForestModel.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(back.predict(X), m.predict(X))
    assert back.params == m.params


# structural invariants over randomised configurations

configs = st.fixed_dictionaries({
    "n": st.integers(30, 200), "p": st.integers(1, 4), "seed": st.integers(0, 10_000),
    "bag": st.sampled_from([1, 2, 4]), "mns": st.integers(1, 8),
    "hh": st.integers(1, 3), "frac": st.sampled_from([0.3, 0.5, 0.8]),
})


def _grow(cfg, backend=None, seed=None):
    rng = np.random.default_rng(cfg["seed"])
    n, p = cfg["n"], cfg["p"]
    X = np.round(rng.normal(size=(n, p)), 1)
    y = X[:, 0] + rng.normal(size=n)
    cl = np.arange(n) // cfg["hh"]
    params = TreeParams(n_trees=8, seed=cfg["seed"] if seed is None else seed, bag_size=cfg["bag"],
                        min_node_size=cfg["mns"], subsample_fraction=cfg["frac"])
    return grow_forest(X, y, params, cluster_id=cl, backend=backend), X, y, cl


@given(configs)
def test_honesty_and_cluster_subsampling(cfg):
    m, X, y, cl = _grow(cfg)
    for t in range(m.n_trees):
        tree = m.tree(t)
        s, e = set(tree.split_rows), set(tree.est_rows)
        assert s and e and not (s & e)
        cs, ce = set(cl[tree.split_rows]), set(cl[tree.est_rows])
        assert not (cs & ce)
        used = np.isin(cl, list(cs | ce))
        assert set(np.flatnonzero(used)) == s | e
        assert m.bag_member[m.tree_bag[t], list(s | e)].all()


@given(configs)
def test_leaves_nonempty_and_routing_consistent(cfg):
    m, X, y, cl = _grow(cfg)
    for t in range(m.n_trees):
        tree = m.tree(t)
        leaves = tree.leaves
        populated = set(tree.leaf_rows())
        assert populated == set(leaves.tolist())
        np.testing.assert_array_equal(tree.apply(X[tree.est_rows]), tree.est_leaf)
        assert (m.leaf_weight[m.node_off[t] + leaves] > 0).all()


@given(configs, st.integers(0, 29))
def test_weights_normalised(cfg, i):
    m, X, y, cl = _grow(cfg)
    a = forest_weights(m, X[i % cfg["n"]])
    assert (a >= 0).all()
    assert abs(a.sum() - 1.0) <= 1e-12


@given(configs)
def test_seed_determinism(cfg):
    a, X, _, _ = _grow(cfg)
    b, _, _, _ = _grow(cfg)
    for k in ForestModel._ARRAYS:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    c, _, _, _ = _grow(cfg, seed=cfg["seed"] + 1)
    assert not np.array_equal(a.split_rows, c.split_rows) or not np.array_equal(a.feature, c.feature)


@given(configs)
def test_backends_grow_identical_trees(cfg):
    a, X, _, _ = _grow(cfg, backend="numba")
    b, _, _, _ = _grow(cfg, backend="numpy")
    for k in ("feature", "threshold", "left", "right", "depth", "node_off", "est_leaf", "leaf_mean"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    np.testing.assert_allclose(a.predict(X, backend="numba"), b.predict(X, backend="numpy"),
                               rtol=1e-12, atol=1e-12)


def test_subsample_bag_structure():
    cl = np.arange(100) // 2
    params = TreeParams(n_trees=8, bag_size=4, seed=1)
    split, soff, est, eoff, member, seeds = draw_subsamples(cl, params)
    assert member.shape == (2, 100)
    # a bag holds half the clusters; every row in a tree is a bag member
    assert member[0].sum() <= 50 * 2 and member[0].sum() % 2 == 0
    for t in range(8):
        rows = np.concatenate([split[soff[t]:soff[t + 1]], est[eoff[t]:eoff[t + 1]]])
        assert member[t // 4, rows].all()
    assert len(set(seeds.tolist())) == 8


def test_backend_switch_names():
    assert kernels.get_backend("numpy") is kernels.numpy_backend
    with pytest.raises(ValueError):
        kernels.get_backend("cuda")
