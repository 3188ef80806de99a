"""Closed- and open-loop rollouts, return histograms, reports, the sampler
timing benchmark and the ablation driver."""
from __future__ import annotations

import csv
import io
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataenv as de
from .reward import sparse_goal_reward
from .student import multi_step_sample
from .teacher import ddim_sample, ddpm_sample, heun_sample

log = logging.getLogger(__name__)


@dataclass
class RolloutResult:
    total_return: float
    rewards: np.ndarray
    nfe_per_action: int
    wall_per_action: float
    success: bool = False
    high_mode: bool = False
    steps: int = 0

    def as_row(self) -> dict:
        return {"total_return": self.total_return, "nfe_per_action": self.nfe_per_action,
                "wall_per_action": self.wall_per_action, "success": self.success,
                "high_mode": self.high_mode, "steps": self.steps}


class SamplerError(RuntimeError):
    pass


# -- samplers ------------------------------------------------------------------------

class Sampler:
    """Uniform wrapper: ``sampler(condition (B, c), rng) -> (x (B, d), nfe)``.

    ``kind`` is one of ``student`` (``steps`` jumps), ``heun``, ``ddpm``,
    ``ddim``.  NFE comes from the model's own call counter.
    """

    def __init__(self, kind: str, model, steps: int = 1, sigmas=None, name: str | None = None):
        if kind not in ("student", "heun", "ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {kind!r}")
        self.kind, self.model, self.steps = kind, model, int(steps)
        if kind == "student" and sigmas is None:
            sigmas = default_resample_sigmas(self.steps)
        self.sigmas = tuple(sigmas or ())
        self.name = name or (kind if kind in ("student", "heun") else f"{kind}-{steps}")

    def __call__(self, condition, rng):
        cond = None if condition is None else np.atleast_2d(condition)
        n = 1 if cond is None else len(cond)
        m = self.model
        if self.kind == "student":
            return multi_step_sample(m, cond, self.sigmas, rng, n)
        shape = (n, m.x_dim)
        if self.kind == "heun":
            return heun_sample(m, cond, rng, shape=shape)
        if self.kind == "ddpm":
            return ddpm_sample(m, m.schedule, self.steps, cond, rng, shape=shape)
        return ddim_sample(m, m.schedule, self.steps, cond, rng=rng, shape=shape)


def default_resample_sigmas(m: int):
    """Intermediate noise levels for an m-jump student sampler, in ascending order."""
    if m < 1:
        raise ValueError("need at least one step")
    if m == 1:
        return ()
    return tuple(np.geomspace(0.2, 1.0, m - 1))


class WindowPlanner:
    """Maps raw state histories to raw action windows through a sampler."""

    def __init__(self, sampler, norm: de.Normalizer, h: int, c: int, action_dim: int):
        self.sampler, self.norm, self.h, self.c, self.action_dim = sampler, norm, h, c, action_dim

    def __call__(self, history, rng):
        cond = self.norm.states(np.asarray(history)).reshape(1, -1)
        x, nfe = self.sampler(cond, rng)
        acts = self.norm.actions_inv(np.asarray(x).reshape(self.c, self.action_dim))
        return acts, nfe


class ScriptedPlanner:
    """Adapter turning a scripted behaviour policy into a planner (NFE 0)."""

    def __init__(self, policy):
        self.policy = policy

    def __call__(self, history, rng):
        return np.asarray(self.policy(np.asarray(history)[-1], rng, 0))[None], 0


def mode_threshold(spec: de.EnvSpec, n: int = 50, seed: int = 0) -> float:
    """Midpoint between the expert and medium scripted policies' mean returns."""
    ds = de.gen_offline_dataset(spec, [("expert", 0.5), ("medium", 0.5)], n, seed)
    r, tags = ds.returns(), np.array(ds.tags())
    return 0.5 * (r[tags == "expert"].mean() + r[tags == "medium"].mean())


def closed_loop_rollout(planner, spec: de.EnvSpec, seed: int, h: int = 1, threshold: float | None = None):
    """Replan at every step and execute only the first action of the window."""
    rng = np.random.default_rng([seed, 7])
    s = de.reset(spec, rng)
    hist = deque([s] * h, maxlen=h)
    rewards, nfes, walls = [], [], []
    for t in range(spec.horizon):
        t0 = time.perf_counter()
        try:
            acts, nfe = planner(np.array(hist), rng)
        except Exception as exc:
            raise SamplerError(f"sampler failed at step {t}: {exc}") from exc
        walls.append(time.perf_counter() - t0)
        nfes.append(nfe)
        s, r, done, _ = de.env_step(spec, s, acts[0], rng, t)
        rewards.append(r)
        hist.append(s)
        if done:
            break
    rewards = np.array(rewards)
    total = float(rewards.sum())
    nfe = int(round(np.mean(nfes)))
    return RolloutResult(total, rewards, nfe, float(np.median(walls)),
                         high_mode=bool(threshold is not None and total > threshold), steps=len(rewards))


def evaluate_closed_loop(planner, spec, seeds, h=1, threshold=None):
    return [closed_loop_rollout(planner, spec, int(sd), h, threshold) for sd in seeds]


# -- open loop -----------------------------------------------------------------------

class PlanSampler:
    """(start, goal) raw states -> raw waypoint plan via a sampler on normalized data."""

    def __init__(self, sampler, norm: de.Normalizer, state_dim: int = 2):
        self.sampler, self.norm, self.state_dim = sampler, norm, state_dim

    def __call__(self, start, goal, rng):
        cond = self.norm.states(np.stack([start, goal])).reshape(1, -1)
        x, nfe = self.sampler(cond, rng)
        return self.norm.states_inv(np.asarray(x).reshape(-1, self.state_dim)), nfe


def interpolate_plan(plan, stride: int) -> np.ndarray:
    """Per-step targets by linear interpolation between waypoints."""
    plan = np.asarray(plan, dtype=np.float64)
    k = len(plan) - 1
    t = np.arange(k * stride + 1) / stride
    return np.stack([np.interp(t, np.arange(k + 1), plan[:, j]) for j in range(plan.shape[1])], axis=1)


def open_loop_rollout(plan_sampler, reverse_dynamics, spec: de.EnvSpec, seed: int, start=None,
                      goal=None, stride: int = 1):
    """Generate one plan, then track it with the reverse-dynamics model
    (no replanning).  Success when the goal ball is reached."""
    rng = np.random.default_rng([seed, 11])
    goal = np.asarray(spec.goal if goal is None else goal, dtype=np.float64)
    s = de.reset(spec, rng) if start is None else np.asarray(start, dtype=np.float64)
    t0 = time.perf_counter()
    plan, nfe = plan_sampler(s, goal, rng)
    wall = time.perf_counter() - t0
    targets = interpolate_plan(plan, stride)
    rewards = []
    success = False
    for t in range(spec.horizon):
        if t + 1 >= len(targets):
            break
        a = reverse_dynamics(s, targets[t + 1])[0]
        s, r, done, _ = de.env_step(spec, s, a, rng, t)
        rewards.append(r)
        if sparse_goal_reward(s, goal, spec.goal_radius) > 0:
            success = True
            break
    rewards = np.array(rewards)
    return RolloutResult(float(rewards.sum()), rewards, max(int(nfe), 0), wall, success=success,
                         steps=len(rewards))


# -- reports -------------------------------------------------------------------------

def normalized_score(ret, random_return: float, expert_return: float):
    return 100.0 * (np.asarray(ret, dtype=np.float64) - random_return) / (expert_return - random_return)


def reward_histogram(returns, bins=20, threshold: float | None = None, range_=None) -> dict:
    """Binned returns and the masses below / above the mode threshold."""
    r = np.asarray([getattr(x, "total_return", x) for x in returns], dtype=np.float64)
    if r.size < 30:
        raise ValueError("need at least 30 rollouts for a histogram")
    counts, edges = np.histogram(r, bins=bins, range=range_)
    out = {"edges": edges.tolist(), "counts": counts.tolist()}
    if threshold is not None:
        out["high_mass"] = float(np.mean(r > threshold))
        out["low_mass"] = 1.0 - out["high_mass"]
    return out


def histogram_csv(hist: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["left", "right", "count"])
    e = hist["edges"]
    for i, c in enumerate(hist["counts"]):
        w.writerow([repr(e[i]), repr(e[i + 1]), c])
    return buf.getvalue()


@dataclass
class EvalReport:
    mean_return: float
    stderr_return: float
    n_rollouts: int
    high_mode_fraction: float
    success_rate: float
    mean_score: float
    nfe_per_action: float
    wall_p50: float
    wall_p90: float
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    TIMING = ("wall_p50", "wall_p90")

    @classmethod
    def from_rollouts(cls, rollouts, config_hash="", random_return=0.0, expert_return=1.0, **extra):
        if len(rollouts) < 2:
            raise ValueError("standard error needs at least 2 rollouts")
        r = np.array([x.total_return for x in rollouts])
        walls = np.array([x.wall_per_action for x in rollouts])
        return cls(float(r.mean()), float(r.std(ddof=1) / np.sqrt(r.size)), int(r.size),
                   float(np.mean([x.high_mode for x in rollouts])), float(np.mean([x.success for x in rollouts])),
                   float(normalized_score(r, random_return, expert_return).mean()),
                   float(np.mean([x.nfe_per_action for x in rollouts])),
                   float(np.percentile(walls, 50)), float(np.percentile(walls, 90)), config_hash, extra)

    def to_dict(self, timing=True) -> dict:
        d = asdict(self)
        if not timing:
            for k in self.TIMING:
                d.pop(k)
        return d


def rollouts_csv(rollouts) -> str:
    buf = io.StringIO()
    rows = [r.as_row() for r in rollouts]
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- benchmark -----------------------------------------------------------------------

def time_sampler(sampler, condition, n_trials: int = 20, warmup: int = 3, seed: int = 0):
    """Median wall time and NFE of single-condition sampler calls."""
    rng = np.random.default_rng(seed)
    for _ in range(warmup):
        sampler(condition, rng)
    times, nfes = [], set()
    for _ in range(n_trials):
        t0 = time.perf_counter()
        _, nfe = sampler(condition, rng)
        times.append(time.perf_counter() - t0)
        nfes.add(int(nfe))
    if len(nfes) != 1:
        raise RuntimeError(f"sampler {getattr(sampler, 'name', sampler)} reported varying NFE {nfes}")
    return float(np.median(times)), nfes.pop()


def benchmark(samplers, condition, n_trials: int = 20, warmup: int = 3, reference: str = "heun"):
    """Rows of name / nfe / median seconds per action / speedup over ``reference``."""
    rows = []
    for s in samplers:
        med, nfe = time_sampler(s, condition, n_trials, warmup)
        rows.append({"sampler": s.name, "nfe": nfe, "median_s": med})
    ref = next((r["median_s"] for r in rows if r["sampler"] == reference), None)
    for r in rows:
        r["speedup"] = ref / r["median_s"] if ref else float("nan")
    return rows


def rows_csv(rows) -> str:
    buf = io.StringIO()
    keys = list(dict.fromkeys(k for r in rows for k in r))
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- ablations -----------------------------------------------------------------------

def ablation_suite(cells, run_cell):
    """Evaluate every cell with ``run_cell(cell) -> dict``; failures are recorded
    in an ``error`` column and the suite continues."""
    rows = []
    for cell in cells:
        row = dict(cell)
        try:
            row.update(run_cell(cell))
            row["error"] = ""
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.warning("ablation cell %s failed: %s", cell, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
