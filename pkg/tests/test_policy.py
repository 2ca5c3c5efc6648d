import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivforest.errors import ValidationError
from ivforest.policy import (allocate_capacity, learn_policy_tree, profile_allocation,
                             rewards_from_scores)
from ivforest.synth import brute_force_policy_oracle


def test_allocation_small_fixture():
    res = allocate_capacity(np.array([5.0, 1.0, 3.0]), 2)
    assert res.selected.tolist() == [0, 2]
    assert res.objective == 8 and res.certified


def test_allocation_everyone():
    r = np.array([-1.0, 2.0, 0.5])
    res = allocate_capacity(r, 3)
    assert res.selected.tolist() == [0, 1, 2] and res.objective == math.fsum(r)


def test_allocation_matches_sort_oracle(rng):
    r = rng.normal(size=5000)
    res = allocate_capacity(r, 1234)
    oracle = np.sort(np.argsort(-r, kind="stable")[:1234])
    np.testing.assert_array_equal(res.selected, oracle)


def test_allocation_ties_break_on_unit_id():
    r = np.array([1.0, 2.0, 1.0, 1.0])
    res = allocate_capacity(r, 2, unit_id=np.array([40, 10, 30, 20]))
    assert res.selected.tolist() == [1, 3]


def test_milp_solver_agrees(rng):
    r = rng.normal(size=60)
    a = allocate_capacity(r, 17)
    b = allocate_capacity(r, 17, solver="milp")
    assert a.objective == pytest.approx(b.objective, abs=1e-9)
    assert b.certified


@pytest.mark.parametrize("K", [0, -1, 4, 2.0])
def test_allocation_rejects_bad_k(K):
    with pytest.raises(ValidationError):
        allocate_capacity(np.ones(3), K)


@given(st.lists(st.integers(-50, 50), min_size=2, max_size=40))
def test_allocation_increments_are_order_statistics(vals):
    r = np.array(vals, float) / 8
    desc = np.sort(r)[::-1]
    for K in range(1, len(r)):
        gain = allocate_capacity(r, K + 1).objective - allocate_capacity(r, K).objective
        assert gain == desc[K]


def test_all_negative_rewards_constant_no_offer(rng):
    X = rng.normal(size=(40, 2))
    tree = learn_policy_tree(X, -rng.random(40) - 0.1)
    assert tree.depth == 0 and tree.nodes[0].action == 0
    assert tree.flags["constant"] and tree.flags["no_improving_split"]
    assert tree.objective == 0


def test_three_row_fixture():
    tree = learn_policy_tree(np.array([[1.0], [2.0], [3.0]]), np.array([1.0, -1.0, 2.0]))
    assert tree.objective == 3
    assert tree.predict(np.array([[1.0], [2.0], [3.0]])).tolist() == [1, 0, 1]
    assert brute_force_policy_oracle(np.array([1.0, 2.0, 3.0]), [1.0, -1.0, 2.0]) == 3


def test_depth_limit():
    with pytest.raises(ValidationError, match="exponential"):
        learn_policy_tree(np.zeros((4, 1)), np.ones(4), depth=3)
    with pytest.raises(ValidationError):
        learn_policy_tree(np.zeros((4, 1)), np.ones(4), depth=0)


def test_rule_recovery():
    rng = np.random.default_rng(5)
    n = 2000
    X = np.column_stack([rng.uniform(0, 4, n), rng.normal(size=n), rng.normal(size=n)])
    inside = (X[:, 0] <= 2) & (X[:, 1] > 0)
    r = np.where(inside, 1.0, -1.0) + 0.3 * rng.normal(size=n)
    tree = learn_policy_tree(X, r)
    assert np.mean((tree.predict(X) == 1) == inside) >= 0.99


def test_allowed_features_restrict_splits(rng):
    X = rng.normal(size=(100, 3))
    r = np.where(X[:, 0] > 0, 1.0, -1.0)
    tree = learn_policy_tree(X, r, ["a", "b", "c"], allowed=["b", "c"])
    used = {nd.feature for nd in tree.nodes if not nd.is_leaf}
    assert used <= {1, 2}
    assert tree.flags["allowed_features"] == ["b", "c"]


def test_direction_flips_sign():
    s = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(rewards_from_scores(s, "minimize"), -s)
    with pytest.raises(ValidationError):
        rewards_from_scores(s, "sideways")


@given(st.integers(0, 10_000))
def test_sign_flip_mirrors_actions(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(30, 2)), 1)
    r = rng.integers(-8, 9, 30) / 4
    a = learn_policy_tree(X, r, depth=1)
    assert a.objective == brute_force_policy_oracle(X, r, 1)
    b = learn_policy_tree(X, -r, depth=1)
    assert b.objective == brute_force_policy_oracle(X, -r, 1)


@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(1, 3))
def test_depth2_equals_oracle(seed, n, p):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 6, size=(n, p)).astype(float)
    r = rng.integers(-16, 17, n) / 8
    tree = learn_policy_tree(X, r)
    assert tree.objective == brute_force_policy_oracle(X, r, 2)
    assert math.fsum(r[tree.predict(X) == 1]) == tree.objective


@pytest.mark.parametrize("seed", range(5))
def test_backends_same_tree(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    r = rng.normal(size=80)
    a = learn_policy_tree(X, r, backend="numba")
    b = learn_policy_tree(X, r, backend="numpy")
    assert a.to_dict() == b.to_dict()


def test_render_and_json(tmp_path):
    X = np.array([[1.0], [2.0], [3.0]])
    tree = learn_policy_tree(X, np.array([1.0, -1.0, 2.0]), ["visits"])
    text = tree.render()
    assert "visits <= " in text and "-> treat" in text and "-> no offer" in text
    tree.to_json(tmp_path / "t.json")
    d = json.loads((tmp_path / "t.json").read_text())
    assert d["objective"] == 3 and d["nodes"][0]["feature"] == "visits"
    leaves = [nd for nd in d["nodes"] if "action" in nd]
    assert sum(nd["n"] for nd in leaves) == 3


def test_profile_identical_sets_zero(rng):
    X = rng.normal(size=(30, 2))
    sel = np.arange(30) < 10
    out = profile_allocation(X, ["a", "b"], sel, sel, np.arange(30))
    assert (out["difference"] == 0).all()
    assert out.attrs["overlap"] == 10


def test_profile_top_reward_units(rng):
    r = rng.normal(size=2000)
    res = allocate_capacity(r, 300)
    out = profile_allocation(r[:, None], ["reward"], res.selected, np.ones(2000, bool),
                             np.arange(2000))
    assert out["difference"][0] > 0 and out["p_value"][0] < 0.01


def test_profile_empty_set(rng):
    with pytest.raises(ValidationError):
        profile_allocation(rng.normal(size=(5, 1)), ["a"], np.zeros(5, bool), np.ones(5, bool),
                           np.arange(5))
