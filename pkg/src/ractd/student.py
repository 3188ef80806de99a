"""Consistency-trajectory student: anytime-to-anytime jumps, the trajectory
consistency loss, the reward-aware distillation objective and samplers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .schedule import (NoiseSchedule, Preconditioner, as_column, embedding_width,
                       fourier_embedding, karras_sigmas, perturb, pseudo_huber_constant)
from .teacher import dsm_loss, heun_step


@dataclass
class StudentModel:
    """G(x, t, s) = (s/t) x + (1 - s/t) g(x, t, s).

    ``g`` is preconditioned in x at noise level t and conditioned on
    embeddings of both t and s, so G(x, t, t) = x holds by construction.
    """

    net: nd.NetworkParams
    x_dim: int
    cond_dim: int
    schedule: NoiseSchedule
    precond: Preconditioner = field(default_factory=Preconditioner)
    n_freq: int = 4
    nfe: int = field(default=0, compare=False)

    @property
    def c_h(self) -> float:
        return pseudo_huber_constant(self.x_dim)

    @property
    def sigma_max(self) -> float:
        return self.schedule.sigma_max

    def g(self, x, t, s, condition=None, weights=None):
        xv = nd.value_of(x)
        n = xv.shape[0]
        tc, sc = as_column(t, n), as_column(s, n)
        pc = self.precond
        emb = [fourier_embedding(pc.c_noise(tc[:, 0]), self.n_freq),
               fourier_embedding(pc.c_noise(sc[:, 0]), self.n_freq)]
        if self.cond_dim:
            emb.insert(0, np.asarray(condition, dtype=np.float64).reshape(n, -1))
        F = nd.mlp_forward(self.net, nd.mul(x, pc.c_in(tc)), np.concatenate(emb, axis=1), weights)
        return nd.add(nd.mul(x, pc.c_skip(tc)), nd.mul(F, pc.c_out(tc)))

    def jump(self, x, t, s, condition=None, weights=None):
        n = nd.value_of(x).shape[0]
        tc, sc = as_column(t, n), as_column(s, n)
        if np.any(sc > tc) or np.any(sc < 0):
            raise ValueError("jump needs t >= s >= 0")
        ratio = np.divide(sc, tc, out=np.ones_like(tc), where=tc > 0)
        gx = self.g(x, tc[:, 0], sc[:, 0], condition, weights)
        return nd.add(nd.mul(x, ratio), nd.mul(gx, 1.0 - ratio))

    def denoise(self, x, sigma, condition=None, weights=None):
        return self.jump(x, sigma, 0.0, condition, weights)

    def __call__(self, x, t, s, condition=None):
        self.nfe += 1
        return self.jump(np.atleast_2d(x), t, s, condition)


def new_student(x_dim: int, cond_dim: int = 0, hidden=(128, 128, 128), act: str = "silu",
                n_bins: int = 80, sigma_data: float = 0.5, n_freq: int = 4, rng=None) -> StudentModel:
    net = nd.init_mlp(x_dim, hidden, x_dim, cond_dim + 2 * embedding_width(n_freq), act, rng)
    return StudentModel(net, x_dim, cond_dim, karras_sigmas(n_bins), Preconditioner(sigma_data), n_freq)


def student_from_teacher(teacher, hidden=None, act="silu", n_bins: int = 80, rng=None) -> StudentModel:
    hidden = hidden or tuple(o for _, o, _ in teacher.net.topology[:-1])
    return new_student(teacher.x_dim, teacher.cond_dim, hidden, act, n_bins,
                       teacher.precond.sigma_data, teacher.n_freq, rng)


@dataclass
class TimestepTriple:
    """Grid indices (ascending, index 0 is sigma = 0) and their sigma values."""

    k_idx: np.ndarray
    u_idx: np.ndarray
    t_idx: np.ndarray
    k: np.ndarray
    u: np.ndarray
    t: np.ndarray


def sample_triple(rng, schedule: NoiseSchedule, size: int = 1) -> TimestepTriple:
    """t uniform over indices >= 2, u uniform on [1, t), k uniform on [0, u)."""
    grid = schedule.ascending()
    if len(grid) < 3:
        raise ValueError("need at least 3 grid points")
    t = rng.integers(2, len(grid), size=size)
    u = rng.integers(1, t)
    k = rng.integers(0, u)
    return TimestepTriple(k, u, t, grid[k], grid[u], grid[t])


def teacher_solve(teacher, x, grid, from_idx, to_idx, condition=None, max_gap: int | None = None):
    """Heun steps along ascending grid indices from ``from_idx`` down to ``to_idx``.

    Each step spans at most ``max_gap`` grid intervals; ``None`` means one
    step for the whole gap.
    """
    from_idx = np.asarray(from_idx)
    to_idx = np.asarray(to_idx)
    gap = from_idx - to_idx
    step = int(gap.max()) if max_gap is None else int(max_gap)
    n_chunks = int(np.ceil(gap.max() / step)) if gap.max() > 0 else 0
    for j in range(n_chunks):
        a = np.maximum(from_idx - j * step, to_idx)
        b = np.maximum(from_idx - (j + 1) * step, to_idx)
        x = heun_step(teacher, x, grid[a], grid[b], condition)
    return x


def ctm_loss(student, teacher, x0, condition, rng, weights=None, target_weights=None,
             triple: TimestepTriple | None = None, max_gap: int | None = 4, solver=None):
    """Trajectory consistency loss.

    Path A jumps t -> k with the live weights; path B runs the teacher solver
    t -> u and jumps u -> k with the target weights.  Both are mapped to
    time 0 with the target weights before the pseudo-Huber comparison, so
    only path A's first jump carries parameter gradients.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = len(x0)
    if target_weights is None:
        target_weights = nd.value_of(weights) if weights is not None else student.net.weights
    target_weights = nd.value_of(target_weights)
    if triple is None:
        triple = sample_triple(rng, student.schedule, n)
    x_t, _ = perturb(x0, triple.t, rng)

    x_k_hat = student.jump(x_t, triple.t, triple.k, condition, weights)
    a0 = student.jump(x_k_hat, triple.k, 0.0, condition, target_weights)

    if solver is None:
        x_u = teacher_solve(teacher, x_t, student.schedule.ascending(), triple.t_idx, triple.u_idx,
                            condition, max_gap)
    else:
        x_u = solver(x_t, triple.t, triple.u, condition)
    x_k = student.jump(x_u, triple.u, triple.k, condition, target_weights)
    b0 = student.jump(x_k, triple.k, 0.0, condition, target_weights)
    return nd.mean(nd.pseudo_huber(a0, b0, student.c_h))


def student_dsm_loss(student, x0, condition, rng, weights=None, sigma=None):
    loss, _, _ = dsm_loss(student, x0, condition, rng, weights=weights, sigma=sigma)
    return loss


def one_step_generate(student, condition, x_T, weights=None):
    return student.jump(x_T, student.sigma_max, 0.0, condition, weights)


def reward_term(student, condition, reward_fn, rng, weights=None, n=None):
    """-mean reward of one-step generations from fresh noise.

    ``reward_fn(condition, x_pred)`` is frozen: it may differentiate with
    respect to ``x_pred`` but owns no trainable weights here.
    """
    n = n if n is not None else len(condition)
    x_T = rng.standard_normal((n, student.x_dim)) * student.sigma_max
    x_hat = one_step_generate(student, condition, x_T, weights)
    r = reward_fn(condition, x_hat)
    if not np.all(np.isfinite(nd.value_of(r))):
        raise FloatingPointError("non-finite reward output")
    return nd.mul(nd.mean(r), -1.0)


@dataclass
class DistillWeights:
    ctm: float = 1.0
    dsm: float = 1.0
    reward: float = 0.0

    def __post_init__(self):
        if min(self.ctm, self.dsm, self.reward) < 0:
            raise ValueError("loss weights must be non-negative")


def distill_loss(student, teacher, x0, condition, loss_weights: DistillWeights, rng, weights,
                 reward_fn=None, reward_rng=None, target_weights=None, max_gap=4):
    """Weighted sum of the three objectives; returns ``(total, metrics)``.

    The reward term draws from its own ``reward_rng`` and is skipped entirely
    at zero weight, so the CTM/DSM noise stream is identical with or without it.
    """
    ctm = ctm_loss(student, teacher, x0, condition, rng, weights, target_weights, max_gap=max_gap)
    dsm = student_dsm_loss(student, x0, condition, rng, weights)
    total = nd.add(nd.mul(ctm, loss_weights.ctm), nd.mul(dsm, loss_weights.dsm))
    metrics = {"ctm": float(nd.value_of(ctm)), "dsm": float(nd.value_of(dsm)), "reward": 0.0}
    if loss_weights.reward > 0:
        if reward_fn is None:
            raise ValueError("positive reward weight needs a reward function")
        rt = reward_term(student, condition, reward_fn, reward_rng, weights, n=len(x0))
        total = nd.add(total, nd.mul(rt, loss_weights.reward))
        metrics["reward"] = float(nd.value_of(rt))
    metrics["total"] = float(nd.value_of(total))
    return total, metrics


def distill_step(student, teacher, x0, condition, loss_weights: DistillWeights,
                 state: nd.OptimizerState, rng, reward_fn=None, reward_rng=None,
                 target_weights=None, max_gap=4):
    """One Adam update of ``student.net`` in place; returns the metric dict."""
    tape = nd.Tape()
    w = tape.variable(student.net.weights)
    total, metrics = distill_loss(student, teacher, x0, condition, loss_weights, rng, w,
                                  reward_fn, reward_rng, target_weights, max_gap)
    if not np.isfinite(metrics["total"]):
        raise nd.DivergenceError(f"non-finite distillation loss: {metrics}")
    grad = tape.gradient(total, w) if isinstance(total, nd.Var) else np.zeros_like(w.value)
    new_w, _ = nd.adam_step(student.net.weights, grad, state)
    student.net = student.net.copy(new_w)
    return metrics


@dataclass
class DistillConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-4
    ctm_weight: float = 1.0
    dsm_weight: float = 1.0
    reward_weight: float = 0.0
    max_gap: int | None = 4
    ema_decay: float = 0.0
    n_bins: int = 80
    hidden: tuple | None = None
    divergence_threshold: float = 1e3
    patience: int = 100
    anneal: bool = False


def train_student(X, condition, teacher, config: DistillConfig, rng, reward_fn=None,
                  student: StudentModel | None = None, callback=None):
    """Distil ``teacher`` into a one-step student; returns ``(student, history)``."""
    import time

    rng = np.random.default_rng(rng)
    reward_rng = np.random.default_rng(rng.integers(2 ** 63))
    X = np.asarray(X, dtype=np.float64)
    C = None if condition is None else np.asarray(condition, dtype=np.float64).reshape(len(X), -1)
    if student is None:
        student = student_from_teacher(teacher, config.hidden, n_bins=config.n_bins, rng=rng)
    lw = DistillWeights(config.ctm_weight, config.dsm_weight, config.reward_weight)
    state = nd.OptimizerState.for_params(student.net.weights.size, lr=config.lr)
    target = student.net.weights.copy()
    history, bad = [], 0
    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(X), size=min(config.batch_size, len(X)))
        tw = target if config.ema_decay > 0 else None
        if config.anneal:
            state.lr = nd.cosine_lr(config.lr, step, config.steps)
        m = distill_step(student, teacher, X[idx], None if C is None else C[idx], lw, state, rng,
                         reward_fn, reward_rng, tw, config.max_gap)
        if config.ema_decay > 0:
            target = config.ema_decay * target + (1 - config.ema_decay) * student.net.weights
        bad = bad + 1 if m["total"] > config.divergence_threshold else 0
        if bad >= config.patience:
            raise nd.DivergenceError(f"distillation diverged at step {step}")
        row = {"step": step, **m, "wall_ms": (time.perf_counter() - t0) * 1e3}
        history.append(row)
        if callback is not None:
            callback(step, student, row)
    return student, history


def one_step_sample(student, condition=None, rng=None, n: int | None = None, x_T=None):
    """x0 = G(x_T, sigma_max, 0).  Returns ``(x0, nfe)`` with nfe = 1."""
    rng = np.random.default_rng(rng)
    if x_T is None:
        n = n if n is not None else (1 if condition is None else len(np.atleast_2d(condition)))
        x_T = rng.standard_normal((n, student.x_dim)) * student.sigma_max
    start = student.nfe
    x = student(x_T, student.sigma_max, 0.0, condition)
    return x, student.nfe - start


def multi_step_sample(student, condition=None, sigmas=(), rng=None, n: int | None = None, x_T=None):
    """Jump T -> 0, then for each intermediate sigma (in the given order)
    re-noise the clean sample to it and jump back to 0.  nfe = len(sigmas) + 1."""
    rng = np.random.default_rng(rng)
    x, nfe = one_step_sample(student, condition, rng, n, x_T)
    for s in sigmas:
        if not 0 < s <= student.sigma_max:
            raise ValueError(f"intermediate sigma {s} outside (0, sigma_max]")
        start = student.nfe
        x = student(x + s * rng.standard_normal(x.shape), s, 0.0, condition)
        nfe += student.nfe - start
    return x, nfe
