import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ractd import dataenv as de


def test_zero_action_keeps_state():
    spec = de.bimodal_reach_spec()
    s = np.array([0.3, -0.2])
    nxt, r, done, clamped = de.env_step(spec, s, np.zeros(2))
    np.testing.assert_array_equal(nxt, s)
    assert r == 0 and not done and not clamped


def test_out_of_bound_action_is_clamped_and_flagged():
    spec = de.bimodal_reach_spec()
    nxt, _, _, clamped = de.env_step(spec, np.zeros(2), np.array([5.0, 0.0]))
    assert clamped
    np.testing.assert_allclose(nxt, [spec.dt * spec.action_bound, 0.0])


@pytest.mark.parametrize("zone", [0, 1])
def test_straight_line_policy_accrues_zone_rate(zone):
    spec = de.bimodal_reach_spec(start_noise=0.0)
    x, y, radius, rate = spec.zones[zone]
    target = np.array([x, y])
    s = np.zeros(2)
    total, steps = 0.0, 0
    for t in range(spec.horizon):
        a = np.clip((target - s) / spec.dt, -1, 1)
        s, r, done, _ = de.env_step(spec, s, a, t=t)
        total += r
        steps += 1
        if done:
            break
    # travel at full speed along the diagonal, then sit on the zone centre
    travel = int(np.ceil((np.hypot(x, y) - radius) / (spec.dt * np.sqrt(2)) - 1e-9))
    assert steps == spec.horizon
    assert total == pytest.approx(rate * (spec.horizon - travel + 1))


def test_done_at_horizon_and_on_goal():
    spec = de.bimodal_reach_spec()
    assert de.env_step(spec, np.zeros(2), np.zeros(2), t=spec.horizon - 1)[2]
    assert not de.env_step(spec, np.zeros(2), np.zeros(2), t=spec.horizon - 2)[2]
    maze = de.maze_spec(32)
    near = np.array(maze.goal) - np.array([0.1, 0.0])
    _, r, done, _ = de.env_step(maze, near, np.zeros(2))
    assert r == 1.0 and done


def test_maze_walls_block_motion():
    spec = de.maze_spec(32)
    s = de.cell_center((1, 1))
    # (1, 0) is a wall in every layout
    nxt, _, _, _ = de.env_step(spec, s, np.array([-1.0, 0.0]))
    for _ in range(10):
        nxt, _, _, _ = de.env_step(spec, nxt, np.array([-1.0, 0.0]))
    assert de.cell_of(nxt) == (1, 1)


@pytest.mark.parametrize("name", ["umaze", "medium", "large"])
def test_maze_goal_reachable_from_every_free_cell(name):
    spec = de.maze_spec(maze=name)
    goal = de.cell_of(spec.goal)
    for c in de.free_cells(spec):
        assert de.shortest_path(spec, c, goal)


def test_bimodal_dataset_masses_and_separation():
    spec = de.bimodal_reach_spec()
    ds = de.gen_offline_dataset(spec, [("expert", 0.5), ("medium", 0.5)], 200, 0)
    r = ds.returns()
    thr = 0.5 * (r[np.array(ds.tags()) == "expert"].mean() + r[np.array(ds.tags()) == "medium"].mean())
    assert abs(np.mean(r > thr) - 0.5) <= 0.07
    hi, lo = r[r > thr], r[r <= thr]
    assert hi.mean() >= 5 * lo.mean()
    counts, _ = np.histogram(r, bins=10)
    assert counts[0] > 0 and counts[-1] > 0 and counts[4:6].sum() < 0.1 * len(r)


def test_single_policy_dataset_is_unimodal():
    ds = de.gen_offline_dataset(de.bimodal_reach_spec(), [("expert", 1.0)], 50, 1)
    r = ds.returns()
    assert set(ds.tags()) == {"expert"}
    assert r.std() < 0.15 * r.mean()


def test_mixture_validation_and_counts():
    spec = de.bimodal_reach_spec()
    with pytest.raises(ValueError):
        de.gen_offline_dataset(spec, [("expert", 0.6), ("medium", 0.6)], 10, 0)
    ds = de.gen_offline_dataset(spec, [("expert", 1 / 3), ("medium", 1 / 3), ("random", 1 / 3)], 10, 0)
    tags = ds.tags()
    assert len(tags) == 10 and sorted(tags.count(t) for t in set(tags)) == [3, 3, 4]
    with pytest.raises(ValueError):
        de.make_policy("greedy", spec)


def test_dataset_file_round_trip_and_determinism(tmp_path):
    spec = de.bimodal_reach_spec()
    a = de.gen_offline_dataset(spec, [("expert", 0.5), ("medium", 0.5)], 20, 3)
    b = de.gen_offline_dataset(spec, [("expert", 0.5), ("medium", 0.5)], 20, 3)
    a.save(tmp_path / "a.jsonl")
    b.save(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    de.OfflineDataset.load(tmp_path / "a.jsonl").save(tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()


def test_window_counts_and_padding():
    spec = de.bimodal_reach_spec()
    ds = de.gen_offline_dataset(spec, [("expert", 1.0)], 3, 0)
    L = len(ds.episodes[0])
    w, _ = de.window_dataset(ds, 1, 16)
    assert len(w) == 3 * (L - 16 + 1) and not w.padded.any()
    w4, _ = de.window_dataset(ds, 4, 8)
    assert w4.state_history.shape[1:] == (4, 2) and w4.actions.shape[1:] == (8, 2)
    first = w4.anchor == 0
    assert np.all(w4.padded[first]) and not np.any(w4.padded[w4.anchor >= 3])
    np.testing.assert_array_equal(w4.state_history[first][0, 0], w4.state_history[first][0, 3])
    with pytest.raises(ValueError):
        de.window_dataset(ds, 1, L + 1)


def test_windows_never_cross_episodes():
    ds = de.gen_offline_dataset(de.bimodal_reach_spec(), [("expert", 0.5), ("random", 0.5)], 6, 0)
    w, _ = de.window_dataset(ds, 2, 4)
    for i in range(len(w)):
        e = ds.episodes[w.episode[i]]
        n = w.anchor[i]
        np.testing.assert_array_equal(w.actions[i], e.actions[n:n + 4])
        np.testing.assert_array_equal(w.state_history[i, -1], e.states[n])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_normalize_inverse_and_floor(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((20, 3)) * rng.uniform(0.1, 5, 3) + rng.standard_normal(3)
    x[:, 2] = 4.0
    mu, sd = x.mean(0), x.std(0)
    z = de.normalize(x, mu, sd)
    assert np.all(np.isfinite(z))
    np.testing.assert_allclose(de.denormalize(z, mu, sd), x, atol=1e-12)
    assert np.max(np.abs(z.mean(0))) < 1e-10
    np.testing.assert_allclose(z[:, :2].std(0), 1.0)
    assert np.all(z[:, 2] == 0)


def test_reverse_dynamics_recovers_linear_actions():
    spec = de.bimodal_reach_spec(zones=())
    ds = de.gen_offline_dataset(spec, [("random", 1.0)], 100, 0)
    rd = de.train_reverse_dynamics(ds, de.RegressionConfig((32,), "identity", 2000, 1e-2), 0)
    e = ds.episodes[0]
    pred = rd(e.states[:-1], e.states[1:])
    assert np.mean((pred - e.actions[:-1]) ** 2) < 1e-4
    assert rd.heldout_mse < 1e-4


def test_reverse_dynamics_zero_actions_and_seed():
    spec = de.bimodal_reach_spec(zones=())
    rest = de.EpisodeRecord(np.zeros((10, 2)) + 0.3, np.zeros((10, 2)), np.zeros(10), "rest")
    moving = de.EpisodeRecord(np.linspace(0, 1, 20)[:, None].repeat(2, 1), np.zeros((20, 2)), np.zeros(20), "x")
    ds = de.OfflineDataset(spec, [rest, moving])
    cfg = de.RegressionConfig((8,), "mish", 200, 1e-2)
    a = de.train_reverse_dynamics(ds, cfg, 1)
    b = de.train_reverse_dynamics(ds, cfg, 1)
    np.testing.assert_array_equal(a.params.weights, b.params.weights)
    assert np.max(np.abs(a(np.zeros((5, 2)), np.ones((5, 2))))) < 1e-6


def test_maze_eval_starts_within_reach():
    spec = de.maze_spec(64)
    starts = de.maze_eval_starts(spec, 30, 0)
    goal = de.cell_of(spec.goal)
    for s in starts:
        hops = len(de.shortest_path(spec, de.cell_of(s), goal)) - 1
        assert 2 <= hops <= spec.horizon // 5


def test_state_plan_windows_shape():
    spec = de.maze_spec(32)
    ds = de.gen_offline_dataset(spec, [("waypoint", 1.0)], 4, 0, episode_length=64)
    W, C = de.state_plan_windows(ds, 32, 4, every=8)
    assert W.shape[1:] == (9, 2) and C.shape[1:] == (2, 2)
    np.testing.assert_array_equal(C[:, 0], W[:, 0])
    np.testing.assert_array_equal(C[:, 1], W[:, -1])
    with pytest.raises(ValueError):
        de.state_plan_windows(ds, 30, 4)
