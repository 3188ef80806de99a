import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ractd import dataenv as de
from ractd import ndgrad as nd
from ractd.reward import (RewardConfig, RewardModel, plan_goal_reward, returns_to_go, reward_training_set,
                          smoothed_goal_reward, sparse_goal_reward, train_reward)


def test_returns_to_go_examples():
    np.testing.assert_array_equal(returns_to_go([1, 1, 1], 0.0), [1, 1, 1])
    np.testing.assert_array_equal(returns_to_go([1, 1, 1], 1.0), [3, 2, 1])
    np.testing.assert_allclose(returns_to_go([2, 0, 5], 0.5), [3.25, 2.5, 5])
    with pytest.raises(ValueError):
        returns_to_go([], 0.9)
    with pytest.raises(ValueError):
        returns_to_go([1.0], 1.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_returns_to_go_limits(r):
    np.testing.assert_array_equal(returns_to_go(r, 0.0), r)
    np.testing.assert_allclose(returns_to_go(r, 1.0), np.cumsum(r[::-1])[::-1], atol=1e-9)
    assert returns_to_go(r, 0.7)[-1] == r[-1]


def test_sparse_goal_reward():
    assert sparse_goal_reward([1.0, 2.0], (1.0, 2.0), 0.3) == 1.0
    assert sparse_goal_reward([5.0, 2.0], (1.0, 2.0), 0.3) == 0.0
    assert sparse_goal_reward([3.0, 4.0], (0.0, 0.0), 5.0) == 1.0
    with pytest.raises(ValueError):
        sparse_goal_reward([0, 0], (0, 0), 0.0)


def test_smoothed_goal_reward_is_half_on_the_boundary():
    pos = np.array([[1.5, 2.0], [1.0, 2.0], [4.0, 2.0]])
    r = np.ravel(smoothed_goal_reward(pos, np.array([1.0, 2.0]), 0.5, 0.05))
    assert r[0] == pytest.approx(0.5) and r[1] > 0.85 and r[2] < 1e-6


def test_plan_goal_reward_gradient():
    rng = np.random.default_rng(0)
    mean, std = np.array([1.0, 2.0]), np.array([0.5, 2.0])
    fn = plan_goal_reward(mean, std, 0.5, 0.2)
    cond = rng.standard_normal((3, 4))
    plan = rng.standard_normal((3, 6)) * 0.3
    tape = nd.Tape()
    v = tape.variable(plan)
    g = tape.gradient(nd.mean(fn(cond, v)), v)
    num = nd.numerical_gradient(lambda p: float(nd.mean(fn(cond, p))), plan)
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_constant_reward_gamma_zero_converges():
    spec = de.bimodal_reach_spec(zones=((0.0, 0.0, 100.0, 2.0),))
    ds = de.gen_offline_dataset(spec, [("random", 1.0)], 40, 0)
    model = train_reward(ds, 1, RewardConfig(gamma=0.0, hidden=(16,), steps=300), 0)
    assert model.heldout_mse < 1e-3
    pred = model.predict(np.zeros((4, 2)), np.zeros((4, 2)))
    np.testing.assert_allclose(pred, 2.0, atol=1e-6)


@pytest.fixture(scope="module")
def bimodal_model():
    spec = de.bimodal_reach_spec()
    train = de.gen_offline_dataset(spec, [("expert", 0.5), ("medium", 0.5)], 200, 0)
    model = train_reward(train, 1, RewardConfig(gamma=0.9, steps=1500, truncation_margin=16), 0)
    return spec, train, model


def test_reward_model_ranks_modes_on_held_out_episodes(bimodal_model):
    spec, _, model = bimodal_model
    held = de.gen_offline_dataset(spec, [("expert", 0.5), ("medium", 0.5)], 60, 99)
    C, A, rtg, _, w = reward_training_set(held, 1, 0.9, 1, 16)
    pred = model.predict(C, A)
    tags = np.array(held.tags())[w.episode]
    wins = total = 0
    for n in np.unique(w.anchor):
        hi = pred[(w.anchor == n) & (tags == "expert")]
        lo = pred[(w.anchor == n) & (tags == "medium")]
        wins += int(np.sum(hi[:, None] > lo[None, :]))
        total += hi.size * lo.size
    assert wins / total >= 0.95


def test_truncation_margin_drops_late_windows(bimodal_model):
    _, train, _ = bimodal_model
    _, _, _, _, full = reward_training_set(train, 1, 0.9)
    _, _, _, _, cut = reward_training_set(train, 1, 0.9, 1, 16)
    assert cut.anchor.max() == len(train.episodes[0]) - 17
    assert len(cut) == len(full) - 16 * len(train.episodes)
    with pytest.raises(ValueError):
        reward_training_set(train, 1, 0.9, 1, 100)


def test_reward_action_gradient_and_clip(bimodal_model):
    _, _, model = bimodal_model
    rng = np.random.default_rng(0)
    hist = rng.standard_normal((5, 2))
    acts = rng.uniform(-0.8, 0.8, (5, 8))
    tape = nd.Tape()
    v = tape.variable(acts)
    g = tape.gradient(nd.mean(model.standardized(hist, v)), v)
    num = nd.numerical_gradient(lambda a: float(nd.mean(model.standardized(hist, a))), acts)
    rel = np.max(np.abs(g - num)) / np.max(np.abs(num))
    assert rel < 1e-5
    assert np.all(g[:, 2:] == 0)
    far = acts.copy()
    far[:, 0] = 50.0
    edge = acts.copy()
    edge[:, 0] = model.action_hi[0]
    np.testing.assert_array_equal(model.standardized(hist, far), model.standardized(hist, edge))


def test_reward_checkpoint_round_trip_and_seed(tmp_path, bimodal_model):
    _, train, model = bimodal_model
    model.save(tmp_path / "r.ckpt")
    back = RewardModel.load(tmp_path / "r.ckpt")
    x = np.zeros((2, 2))
    np.testing.assert_array_equal(back.predict(x, x), model.predict(x, x))
    cfg = RewardConfig(steps=30, hidden=(8,))
    a = train_reward(train, 1, cfg, 4)
    b = train_reward(train, 1, cfg, 4)
    np.testing.assert_array_equal(a.params.weights, b.params.weights)
