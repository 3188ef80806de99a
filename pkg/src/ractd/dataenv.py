"""Synthetic point-mass environments, scripted behaviour policies, offline
dataset files, planning windows, normalization and reverse dynamics."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad as nd
from .reward import returns_to_go, sparse_goal_reward

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6

MAZES = {
    # '#' wall, '.' free; one cell = one unit, origin at the lower-left corner
    "umaze": [
        "#####",
        "#...#",
        "###.#",
        "#...#",
        "#####",
    ],
    "medium": [
        "#######",
        "#.....#",
        "#.###.#",
        "#...#.#",
        "###.#.#",
        "#.....#",
        "#######",
    ],
    "large": [
        "#########",
        "#.......#",
        "#.#####.#",
        "#.#...#.#",
        "#.#.#.#.#",
        "#...#...#",
        "#.#####.#",
        "#.......#",
        "#########",
    ],
}
MAZE_FOR_HORIZON = {32: "umaze", 64: "medium", 96: "large"}


@dataclass
class EnvSpec:
    dynamics: str = "bimodal-reach"
    state_dim: int = 2
    action_dim: int = 2
    action_bound: float = 1.0
    horizon: int = 32
    dt: float = 0.25
    process_noise: float = 0.0
    start: tuple = (0.0, 0.0)
    start_noise: float = 0.05
    # bimodal-reach: zones as (x, y, radius, rate)
    zones: tuple = ((-1.5, 1.5, 0.4, 1.0), (1.5, 1.5, 0.4, 10.0))
    # pointmass-maze
    maze: str = ""
    goal: tuple | None = None
    goal_radius: float = 0.3
    behavior_noise: float = 0.1

    def __post_init__(self):
        if self.dynamics not in ("bimodal-reach", "pointmass-maze"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")
        if not np.isfinite(self.action_bound) or self.action_bound <= 0:
            raise ValueError("action bound must be finite and positive")
        self.start = tuple(self.start)
        self.zones = tuple(tuple(z) for z in self.zones)
        if self.goal is not None:
            self.goal = tuple(self.goal)

    def to_dict(self):
        return asdict(self)

    @property
    def layout(self) -> np.ndarray:
        """Boolean wall grid indexed [row_from_bottom, col]."""
        rows = MAZES[self.maze]
        return np.array([[c == "#" for c in r] for r in rows[::-1]])


def bimodal_reach_spec(**kw) -> EnvSpec:
    # wide behaviour noise gives the return model action coverage around both zones
    kw.setdefault("behavior_noise", 0.5)
    return EnvSpec(**kw)


def maze_spec(horizon: int = 32, **kw) -> EnvSpec:
    name = kw.pop("maze", MAZE_FOR_HORIZON.get(horizon, "umaze"))
    spec = EnvSpec(dynamics="pointmass-maze", horizon=horizon, maze=name, dt=0.25, start_noise=0.1,
                   zones=(), **kw)
    if spec.goal is None:
        free = free_cells(spec)
        spec.goal = tuple(float(v) for v in cell_center(free[-1]))
    return spec


def free_cells(spec: EnvSpec) -> list[tuple[int, int]]:
    walls = spec.layout
    return [(r, c) for r in range(walls.shape[0]) for c in range(walls.shape[1]) if not walls[r, c]]


def cell_center(cell) -> np.ndarray:
    r, c = cell
    return np.array([c + 0.5, r + 0.5])


def cell_of(pos) -> tuple[int, int]:
    return int(np.floor(pos[1])), int(np.floor(pos[0]))


def _blocked(walls, pos, margin=0.1) -> bool:
    # the point mass has a small radius so it cannot hug walls exactly
    for dx in (-margin, margin):
        for dy in (-margin, margin):
            r, c = int(np.floor(pos[1] + dy)), int(np.floor(pos[0] + dx))
            if r < 0 or c < 0 or r >= walls.shape[0] or c >= walls.shape[1] or walls[r, c]:
                return True
    return False


def zone_reward(spec: EnvSpec, pos) -> float:
    for x, y, radius, rate in spec.zones:
        if np.hypot(pos[0] - x, pos[1] - y) <= radius:
            return float(rate)
    return 0.0


def env_step(spec: EnvSpec, state, action, rng=None, t: int | None = None):
    """Advance one step.  Returns ``(next_state, reward, done, clamped)``.

    ``done`` is set on the final step of the horizon (when ``t`` is given) or
    on reaching the goal of a maze.
    """
    state = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    clipped = np.clip(a, -spec.action_bound, spec.action_bound)
    clamped = bool(np.any(clipped != a))
    nxt = state + spec.dt * clipped
    if spec.process_noise > 0 and rng is not None:
        nxt = nxt + spec.process_noise * rng.standard_normal(nxt.shape)
    done = t is not None and t + 1 >= spec.horizon
    if spec.dynamics == "bimodal-reach":
        reward = zone_reward(spec, nxt)
    else:
        walls = spec.layout
        # resolve each axis separately so motion slides along walls
        trial = state.copy()
        for ax in range(2):
            cand = trial.copy()
            cand[ax] = nxt[ax]
            if not _blocked(walls, cand):
                trial = cand
        nxt = trial
        reward = sparse_goal_reward(nxt, spec.goal, spec.goal_radius)
        done = done or reward > 0
    return nxt, reward, done, clamped


# -- behaviour policies -------------------------------------------------------------

class ZonePolicy:
    """Proportional controller toward one reward zone, with action noise."""

    def __init__(self, spec: EnvSpec, zone: int, gain: float = 2.0, noise: float = 0.1):
        self.target = np.array(spec.zones[zone][:2])
        self.gain, self.noise, self.bound = gain, noise, spec.action_bound

    def __call__(self, state, rng, t):
        a = self.gain * (self.target - state) + self.noise * rng.standard_normal(2)
        return np.clip(a, -self.bound, self.bound)


class RandomPolicy:
    def __init__(self, spec: EnvSpec):
        self.bound, self.dim = spec.action_bound, spec.action_dim

    def __call__(self, state, rng, t):
        return rng.uniform(-self.bound, self.bound, size=self.dim)


def shortest_path(spec: EnvSpec, start_cell, goal_cell) -> list[tuple[int, int]]:
    walls = spec.layout
    prev = {start_cell: None}
    q = deque([start_cell])
    while q:
        cur = q.popleft()
        if cur == goal_cell:
            break
        r, c = cur
        for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nb[0] < walls.shape[0] and 0 <= nb[1] < walls.shape[1] and not walls[nb] and nb not in prev:
                prev[nb] = cur
                q.append(nb)
    if goal_cell not in prev:
        return []
    path, cur = [], goal_cell
    while cur is not None:
        path.append(cur)
        cur = prev[cur]
    return path[::-1]


class WaypointPolicy:
    """Maze wanderer: follow BFS paths to randomly drawn goal cells."""

    def __init__(self, spec: EnvSpec, gain: float = 3.0, noise: float = 0.2, goal_cell=None):
        self.spec, self.gain, self.noise = spec, gain, noise
        self.cells = free_cells(spec)
        self.fixed_goal = goal_cell
        self.path: list = []

    def __call__(self, state, rng, t):
        cur = cell_of(state)
        if not self.path or cur == self.path[-1] and np.linalg.norm(state - cell_center(cur)) < 0.2:
            goal = self.fixed_goal or self.cells[rng.integers(len(self.cells))]
            self.path = shortest_path(self.spec, cur, goal)[1:] or [goal]
        while len(self.path) > 1 and (cur == self.path[0]):
            self.path.pop(0)
        if cur == self.path[0] and len(self.path) == 1:
            target = cell_center(self.path[0])
        else:
            target = cell_center(self.path[0])
        a = self.gain * (target - state) + self.noise * rng.standard_normal(2)
        return np.clip(a, -self.spec.action_bound, self.spec.action_bound)


def make_policy(name: str, spec: EnvSpec):
    if name == "expert":
        return ZonePolicy(spec, int(np.argmax([z[3] for z in spec.zones])), noise=spec.behavior_noise)
    if name == "medium":
        return ZonePolicy(spec, int(np.argmin([z[3] for z in spec.zones])), noise=spec.behavior_noise)
    if name == "random":
        return RandomPolicy(spec)
    if name == "waypoint":
        return WaypointPolicy(spec, noise=max(spec.behavior_noise, 0.2))
    raise ValueError(f"unknown behaviour policy {name!r}")


def reset(spec: EnvSpec, rng) -> np.ndarray:
    if spec.dynamics == "pointmass-maze":
        cells = free_cells(spec)
        base = cell_center(cells[rng.integers(len(cells))])
    else:
        base = np.array(spec.start, dtype=np.float64)
    return base + spec.start_noise * rng.uniform(-1, 1, size=spec.state_dim)


# -- datasets -----------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    tag: str

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if not len(self.states) == len(self.actions) == len(self.rewards):
            raise ValueError("states, actions and rewards must have equal length")

    def __len__(self):
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def rollout_policy(spec: EnvSpec, policy, rng, length: int | None = None, tag: str = "") -> EpisodeRecord:
    length = length or spec.horizon
    s = reset(spec, rng)
    S, A, R = [], [], []
    for t in range(length):
        a = policy(s, rng, t)
        s2, r, done, _ = env_step(spec, s, a, rng, t if spec.dynamics == "bimodal-reach" else None)
        S.append(s)
        A.append(a)
        R.append(r)
        s = s2
        # maze data keeps wandering past the goal so long windows exist
        if done and spec.dynamics == "bimodal-reach":
            break
    return EpisodeRecord(np.array(S), np.array(A), np.array(R), tag)


@dataclass
class OfflineDataset:
    spec: EnvSpec
    episodes: list[EpisodeRecord]
    meta: dict = field(default_factory=dict)

    def returns(self) -> np.ndarray:
        return np.array([e.total_return for e in self.episodes])

    def tags(self) -> list[str]:
        return [e.tag for e in self.episodes]

    def to_lines(self) -> list[str]:
        header = {"spec": self.spec.to_dict(), "meta": self.meta, "stats": compute_stats(self)}
        lines = [json.dumps(header, sort_keys=True)]
        for e in self.episodes:
            lines.append(json.dumps({"states": e.states.tolist(), "actions": e.actions.tolist(),
                                     "rewards": e.rewards.tolist(), "tag": e.tag}, sort_keys=True))
        return lines

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().split("\n") if ln]
        header = json.loads(lines[0])
        eps = []
        for ln in lines[1:]:
            d = json.loads(ln)
            sd = header["spec"]["state_dim"]
            ad = header["spec"]["action_dim"]
            eps.append(EpisodeRecord(np.array(d["states"], dtype=np.float64).reshape(-1, sd),
                                     np.array(d["actions"], dtype=np.float64).reshape(-1, ad),
                                     d["rewards"], d["tag"]))
        return cls(EnvSpec(**header["spec"]), eps, header.get("meta", {}))


def gen_offline_dataset(spec: EnvSpec, mixture, n_episodes: int, seed: int,
                        episode_length: int | None = None) -> OfflineDataset:
    """Roll out scripted policies; ``mixture`` is a list of (policy name, fraction).

    Episode ``i`` uses its own stream seeded by ``(seed, i)`` so datasets are
    reproducible independent of generation order.
    """
    names = [m[0] for m in mixture]
    fracs = np.array([float(m[1]) for m in mixture])
    if np.any(fracs < 0) or not np.isclose(fracs.sum(), 1.0):
        raise ValueError("mixture fractions must be non-negative and sum to 1")
    raw = fracs * n_episodes
    counts = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - counts), kind="stable")[: n_episodes - counts.sum()]:
        counts[j] += 1
    assign = np.repeat(np.arange(len(names)), counts)
    assign = np.random.default_rng([seed, 2 ** 31]).permutation(assign)
    episodes = []
    for i, j in enumerate(assign):
        rng = np.random.default_rng([seed, i])
        policy = make_policy(names[j], spec)
        episodes.append(rollout_policy(spec, policy, rng, episode_length, names[j]))
    meta = {"mixture": [[n, float(f)] for n, f in mixture], "n_episodes": n_episodes, "seed": seed}
    return OfflineDataset(spec, episodes, meta)


def compute_stats(dataset: OfflineDataset) -> dict:
    S = np.concatenate([e.states for e in dataset.episodes])
    A = np.concatenate([e.actions for e in dataset.episodes])
    return {"state_mean": S.mean(0).tolist(), "state_std": S.std(0).tolist(),
            "action_mean": A.mean(0).tolist(), "action_std": A.std(0).tolist()}


def normalize(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / np.maximum(std, STD_FLOOR)


def denormalize(x, mean, std):
    return np.asarray(x, dtype=np.float64) * np.maximum(std, STD_FLOOR) + mean


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def from_stats(cls, stats: dict) -> "Normalizer":
        return cls(*(np.asarray(stats[k], dtype=np.float64)
                     for k in ("state_mean", "state_std", "action_mean", "action_std")))

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("state_mean", "state_std", "action_mean", "action_std")}

    def states(self, s):
        return normalize(s, self.state_mean, self.state_std)

    def actions(self, a):
        return normalize(a, self.action_mean, self.action_std)

    def states_inv(self, s):
        return denormalize(s, self.state_mean, self.state_std)

    def actions_inv(self, a):
        return denormalize(a, self.action_mean, self.action_std)


@dataclass
class PlanWindows:
    """Stacked training windows: ``state_history`` (N, h, ds), ``actions`` (N, c, da)."""

    state_history: np.ndarray
    actions: np.ndarray
    anchor: np.ndarray
    episode: np.ndarray
    padded: np.ndarray
    rtg: np.ndarray | None = None

    def __len__(self):
        return len(self.anchor)

    def subset(self, rows) -> "PlanWindows":
        return PlanWindows(self.state_history[rows], self.actions[rows], self.anchor[rows], self.episode[rows],
                           self.padded[rows], None if self.rtg is None else self.rtg[rows])

    def flat(self, norm: Normalizer):
        """Normalized (X, condition) pair: flattened action windows and histories."""
        X = norm.actions(self.actions).reshape(len(self), -1)
        C = norm.states(self.state_history).reshape(len(self), -1)
        return X, C


def window_dataset(dataset: OfflineDataset, h: int, c: int, gamma: float | None = None):
    """All windows with c actions inside one episode; histories are front-padded
    by repeating the first state (flagged in ``padded``)."""
    if h < 1 or c < 1:
        raise ValueError("h and c must be >= 1")
    shortest = min(len(e) for e in dataset.episodes)
    if c > shortest:
        raise ValueError(f"c={c} exceeds the shortest episode ({shortest} steps)")
    SH, AC, AN, EP, PD, RT = [], [], [], [], [], []
    for ei, e in enumerate(dataset.episodes):
        rtg = returns_to_go(e.rewards, gamma) if gamma is not None else None
        for n in range(len(e) - c + 1):
            idx = np.arange(n - h + 1, n + 1)
            PD.append(bool(idx[0] < 0))
            SH.append(e.states[np.maximum(idx, 0)])
            AC.append(e.actions[n:n + c])
            AN.append(n)
            EP.append(ei)
            if rtg is not None:
                RT.append(rtg[n])
    windows = PlanWindows(np.array(SH), np.array(AC), np.array(AN), np.array(EP), np.array(PD),
                          np.array(RT) if RT else None)
    return windows, Normalizer.from_stats(compute_stats(dataset))


# -- state-sequence planning windows for the maze ------------------------------------

def state_plan_windows(dataset: OfflineDataset, horizon: int, stride: int = 4, every: int = 1):
    """Waypoint sequences ``s_n, s_{n+stride}, ..., s_{n+horizon}``.

    Returns (waypoints (N, horizon//stride + 1, ds), start/goal condition (N, 2, ds)).
    """
    if horizon % stride:
        raise ValueError("horizon must be a multiple of stride")
    W, C = [], []
    for e in dataset.episodes:
        for n in range(0, len(e) - horizon, every):
            wp = e.states[n:n + horizon + 1:stride]
            W.append(wp)
            C.append(np.stack([wp[0], wp[-1]]))
    return np.array(W), np.array(C)


# -- reverse dynamics ----------------------------------------------------------------

@dataclass
class ReverseDynamics:
    params: nd.NetworkParams
    norm: Normalizer
    heldout_mse: float = float("nan")

    def __call__(self, s, s_next):
        s = np.atleast_2d(s)
        s_next = np.atleast_2d(s_next)
        X = np.concatenate([self.norm.states(s), self.norm.states(s_next)], axis=1)
        return self.norm.actions_inv(nd.mlp_forward(self.params, X))


@dataclass
class RegressionConfig:
    hidden: tuple = (64, 64)
    act: str = "mish"
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256


def train_reverse_dynamics(dataset: OfflineDataset, config: RegressionConfig, rng) -> ReverseDynamics:
    S, S2, A = [], [], []
    for e in dataset.episodes:
        if len(e) < 2:
            continue
        S.append(e.states[:-1])
        S2.append(e.states[1:])
        A.append(e.actions[:-1])
    S, S2, A = np.concatenate(S), np.concatenate(S2), np.concatenate(A)
    norm = Normalizer.from_stats(compute_stats(dataset))
    X = np.concatenate([norm.states(S), norm.states(S2)], axis=1)
    params, _, mse = nd.fit_regressor(X, norm.actions(A), config.hidden, config.act, config.steps,
                                      config.lr, config.batch_size, rng)
    return ReverseDynamics(params, norm, mse)


def maze_eval_starts(spec: EnvSpec, n: int, seed: int, max_cells: int | None = None) -> np.ndarray:
    """Start positions whose shortest path to the goal fits the horizon.

    A cell takes about five steps at the scripted speed, so paths are capped
    at ``horizon // 5`` cells.
    """
    max_cells = max_cells or max(2, spec.horizon // 5)
    goal_cell = cell_of(spec.goal)
    ok = [c for c in free_cells(spec) if 2 <= len(shortest_path(spec, c, goal_cell)) - 1 <= max_cells]
    if not ok:
        raise ValueError("no start cell within reach of the goal")
    rng = np.random.default_rng([seed, 3])
    picks = rng.integers(0, len(ok), size=n)
    return np.array([cell_center(ok[i]) for i in picks]) + spec.start_noise * rng.uniform(-1, 1, (n, 2))
