"""Return-to-go targets and a frozen, differentiable reward model trained
separately from the planner, plus sparse and smoothed goal rewards."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd

log = logging.getLogger(__name__)


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    """Discounted suffix sums, computed by the backward recursion."""
    r = np.asarray(getattr(rewards, "rewards", rewards), dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("empty episode")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    out = np.empty_like(r)
    acc = 0.0
    for n in range(r.size - 1, -1, -1):
        acc = r[n] + gamma * acc
        out[n] = acc
    return out


def sparse_goal_reward(state, goal, radius: float) -> float:
    """1 inside the closed ball around ``goal``, else 0."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    goal = np.asarray(goal, dtype=np.float64)
    d = np.linalg.norm(np.asarray(state, dtype=np.float64)[:goal.size] - goal)
    return 1.0 if d <= radius else 0.0


def smoothed_goal_reward(positions, goal, radius: float, temperature: float = 0.05):
    """sigmoid((radius^2 - d^2) / temperature); tape-aware in ``positions`` (N, 2)."""
    d2 = nd.sq_dist(positions, np.broadcast_to(goal, np.shape(nd.value_of(positions))))
    return nd.activation(nd.mul(nd.sub(radius ** 2, d2), 1.0 / temperature), "sigmoid")


def plan_goal_reward(state_mean, state_std, radius: float, temperature: float = 0.05, state_dim: int = 2):
    """Reward function for normalized waypoint plans: mean smoothed goal reward
    over waypoints, with the goal read from the (start, goal) condition."""
    mean = np.asarray(state_mean, dtype=np.float64)
    std = np.maximum(np.asarray(state_std, dtype=np.float64), 1e-6)

    def fn(condition, plan):
        cond = np.asarray(condition, dtype=np.float64)
        goal = cond[:, -state_dim:] * std + mean
        width = np.shape(nd.value_of(plan))[1]
        k = width // state_dim
        total = 0.0
        for j in range(k):
            pos = nd.add(nd.mul(nd.take_cols(plan, j * state_dim, (j + 1) * state_dim), std), mean)
            total = nd.add(total, smoothed_goal_reward(pos, goal, radius, temperature))
        return nd.mul(total, 1.0 / k)

    return fn


@dataclass
class RewardModel:
    """R(state history, actions) -> standardized return-to-go.

    Inputs are in the planner's normalized coordinates; ``n_actions`` leading
    actions of a window are read.
    """

    params: nd.NetworkParams
    history_dim: int
    action_dim: int
    n_actions: int = 1
    rtg_mean: float = 0.0
    rtg_std: float = 1.0
    gamma: float = 0.99
    heldout_mse: float = float("nan")
    action_lo: list | None = None
    action_hi: list | None = None

    def standardized(self, history, actions):
        """Differentiable in ``actions`` (a tape variable or array).

        Actions are clamped to the normalized action box first, so the
        prediction never extrapolates past what the environment executes.
        """
        a = nd.take_cols(actions, 0, self.n_actions * self.action_dim)
        if self.action_lo is not None:
            lo = np.tile(self.action_lo, self.n_actions)
            hi = np.tile(self.action_hi, self.n_actions)
            a = nd.clip(a, lo, hi)
        h = np.asarray(history, dtype=np.float64).reshape(np.shape(nd.value_of(a))[0], -1)
        return nd.take_cols(nd.mlp_forward(self.params, a, h), 0, 1)

    def predict(self, history, actions) -> np.ndarray:
        """Return-to-go in reward units."""
        z = self.standardized(np.atleast_2d(history), np.atleast_2d(actions))
        return z[:, 0] * self.rtg_std + self.rtg_mean

    def as_reward_fn(self):
        return lambda condition, x: self.standardized(condition, x)

    def meta(self) -> dict:
        return {"history_dim": self.history_dim, "action_dim": self.action_dim, "n_actions": self.n_actions,
                "rtg_mean": self.rtg_mean, "rtg_std": self.rtg_std, "gamma": self.gamma,
                "heldout_mse": self.heldout_mse, "action_lo": self.action_lo, "action_hi": self.action_hi}

    def save(self, path, **extra) -> str:
        return nd.save_checkpoint(path, self.params, kind="reward", **self.meta(), **extra)

    @classmethod
    def load(cls, path) -> "RewardModel":
        params, meta = nd.load_checkpoint(path)
        keys = ("history_dim", "action_dim", "n_actions", "rtg_mean", "rtg_std", "gamma", "heldout_mse",
                "action_lo", "action_hi")
        return cls(params, **{k: meta[k] for k in keys if k in meta})


@dataclass
class RewardConfig:
    gamma: float = 0.99
    hidden: tuple = (64, 64)
    act: str = "mish"
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256
    n_actions: int = 1
    holdout: float = 0.1
    truncation_margin: int = 0


def reward_training_set(dataset, h: int, gamma: float, n_actions: int = 1, truncation_margin: int = 0):
    """Normalized (history, leading actions, rtg) arrays plus the normalizer.

    Windows anchored fewer than ``truncation_margin`` steps before their
    episode ends are dropped: the time limit cuts their return short, and a
    model that does not see time would learn that late states are worse.
    """
    from .dataenv import window_dataset

    windows, norm = window_dataset(dataset, h, n_actions, gamma=gamma)
    if truncation_margin > 0:
        lengths = np.array([len(e) for e in dataset.episodes])
        keep = lengths[windows.episode] - windows.anchor > truncation_margin
        if not keep.any():
            raise ValueError(f"truncation_margin={truncation_margin} leaves no windows")
        windows = windows.subset(keep)
    X, C = windows.flat(norm)
    return C, X, windows.rtg, norm, windows


def train_reward(dataset, h: int, config: RewardConfig, rng) -> RewardModel:
    """Squared-error regression of standardized return-to-go with Adam.

    The held-out MSE is reported in standardized units.
    """
    rng = np.random.default_rng(rng)
    C, A, rtg, norm, _ = reward_training_set(dataset, h, config.gamma, config.n_actions,
                                                  config.truncation_margin)
    mu = float(rtg.mean())
    sd = float(max(rtg.std(), 1e-6))
    z = (rtg - mu) / sd
    # the network sees actions as input and the history as a per-layer condition
    perm = rng.permutation(len(A))
    n_hold = int(round(config.holdout * len(A))) if len(A) >= 10 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    params = nd.init_mlp(A.shape[1], config.hidden, 1, C.shape[1], config.act, rng)

    def loss_fn(w, rng):
        idx = train[rng.integers(0, len(train), size=min(config.batch_size, len(train)))]
        pred = nd.mlp_forward(params, A[idx], C[idx], w)
        return nd.mean(nd.sq_dist(pred, z[idx, None])), {}

    w, _ = nd.minimize(params.weights, loss_fn, config.steps, rng, lr=config.lr)
    params = params.copy(w)
    mse = float(np.mean((nd.mlp_forward(params, A[hold], C[hold])[:, 0] - z[hold]) ** 2)) if n_hold else float("nan")
    log.info("reward model held-out mse %.4g", mse)
    bound = dataset.spec.action_bound
    lo = norm.actions(np.full(dataset.spec.action_dim, -bound)).tolist()
    hi = norm.actions(np.full(dataset.spec.action_dim, bound)).tolist()
    return RewardModel(params, C.shape[1], dataset.spec.action_dim, config.n_actions, mu, sd, config.gamma, mse,
                       lo, hi)
