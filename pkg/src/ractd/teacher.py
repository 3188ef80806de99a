"""EDM teacher: denoising loss, Heun probability-flow solver, DDPM/DDIM
reference samplers and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .schedule import (NoiseSchedule, Preconditioner, as_column, edm_denoise, embedding_width,
                       fourier_embedding, karras_sigmas, perturb, pseudo_huber_constant,
                       sample_training_sigma)

log = logging.getLogger(__name__)


@dataclass
class TeacherModel:
    """Preconditioned denoiser D(x, sigma | condition) around a dense network.

    Calling the model counts one function evaluation in ``nfe``; the
    ``denoise`` method does not count and accepts tracked weights.
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

    def raw(self, xs, c_noise, condition, weights=None):
        emb = fourier_embedding(c_noise, self.n_freq)
        if self.cond_dim:
            emb = np.concatenate([np.asarray(condition, dtype=np.float64).reshape(len(emb), -1), emb], axis=1)
        return nd.mlp_forward(self.net, xs, emb, weights)

    def denoise(self, x, sigma, condition=None, weights=None):
        raw = lambda xs, cn, c: self.raw(xs, cn, c, weights)
        return edm_denoise(raw, x, sigma, condition, self.precond)

    def __call__(self, x, sigma, condition=None):
        self.nfe += 1
        return self.denoise(np.atleast_2d(x), sigma, condition)


def new_teacher(x_dim: int, cond_dim: int = 0, hidden=(128, 128, 128), act: str = "silu",
                n_bins: int = 40, sigma_data: float = 0.5, n_freq: int = 4, rng=None) -> TeacherModel:
    net = nd.init_mlp(x_dim, hidden, x_dim, cond_dim + embedding_width(n_freq), act, rng)
    return TeacherModel(net, x_dim, cond_dim, karras_sigmas(n_bins), Preconditioner(sigma_data), n_freq)


def dsm_loss(model, x0, condition, rng, weights=None, sigma=None, c_h=None):
    """Mean pseudo-Huber distance between x0 and the model's denoised estimate.

    ``model`` needs ``denoise(x, sigma, condition, weights)``; the student's
    time-0 jump has the same signature, so both losses share this code.
    Returns ``(loss, denoised, sigma)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if sigma is None:
        sigma = sample_training_sigma(rng, size=len(x0))
    sigma = as_column(sigma, len(x0))[:, 0]
    x_t, _ = perturb(x0, sigma, rng)
    den = model.denoise(x_t, sigma, condition, weights)
    c_h = model.c_h if c_h is None else c_h
    return nd.mean(nd.pseudo_huber(den, x0, c_h)), den, sigma


def _counted(denoiser):
    if hasattr(denoiser, "nfe"):
        return denoiser

    class _Wrap:
        nfe = 0

        def __call__(self, x, sigma, condition=None):
            self.nfe += 1
            return denoiser(x, sigma, condition)

    return _Wrap()


def _subset(condition, rows):
    if condition is None or np.ndim(condition) < 2:
        return condition
    return condition[rows]


def heun_step(denoiser, x, sigma_from, sigma_to, condition=None):
    """One EDM Heun step; Euler only for rows stepping to sigma = 0.

    Sigmas may be per-row; rows with ``sigma_from == sigma_to`` are left
    untouched and cost nothing.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sf = as_column(sigma_from, len(x))
    st = as_column(sigma_to, len(x))
    if np.any(sf < st) or np.any(st < 0):
        raise ValueError("need sigma_from >= sigma_to >= 0")
    out = x.copy()
    act = np.flatnonzero(sf[:, 0] > st[:, 0])
    if act.size == 0:
        return out
    full = act.size == len(x)
    rows = slice(None) if full else act
    xa, sfa, sta = x[rows], sf[rows], st[rows]
    cond = condition if full else _subset(condition, act)
    d = (xa - denoiser(xa, sfa[:, 0], cond)) / sfa
    x_next = xa + (sta - sfa) * d
    corr = np.flatnonzero(sta[:, 0] > 0)
    if corr.size:
        c_rows = slice(None) if corr.size == len(xa) else corr
        xn, stc = x_next[c_rows], sta[c_rows]
        d2 = (xn - denoiser(xn, stc[:, 0], cond if corr.size == len(xa) else _subset(cond, corr))) / stc
        x_next[c_rows] = xa[c_rows] + (stc - sfa[c_rows]) * 0.5 * (d[c_rows] + d2)
    out[rows] = x_next
    return out


def _grid(schedule) -> np.ndarray:
    if isinstance(schedule, NoiseSchedule):
        return schedule.grid
    g = np.asarray(schedule, dtype=np.float64)
    return g if g[-1] == 0 else np.append(g, 0.0)


def solve_pfode(denoiser, x_T, schedule, condition=None):
    """Integrate the probability-flow ODE from the first grid sigma down to 0.

    ``schedule`` is a NoiseSchedule or a descending array of sigmas (a
    trailing zero is appended when missing).  Returns ``(x0, nfe)``.
    """
    den = _counted(denoiser)
    start = den.nfe
    grid = _grid(schedule)
    x = np.atleast_2d(np.asarray(x_T, dtype=np.float64))
    for i in range(len(grid) - 1):
        x = heun_step(den, x, grid[i], grid[i + 1], condition)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state after step {i}")
    return x, den.nfe - start


def _sampler_grid(schedule, steps):
    if isinstance(schedule, NoiseSchedule):
        if steps == 1:
            return np.array([schedule.sigma_max, 0.0])
        s = karras_sigmas(steps, schedule.sigma_min, schedule.sigma_max, schedule.rho)
        return s.grid
    return _grid(schedule)


def _initial(x_T, schedule, shape, rng):
    if x_T is not None:
        return np.atleast_2d(np.asarray(x_T, dtype=np.float64))
    return rng.standard_normal(shape) * _sampler_grid(schedule, 2)[0]


def ddpm_sample(denoiser, schedule, steps, condition=None, rng=None, x_T=None, shape=None):
    """Ancestral sampler, one function evaluation per step.  Returns ``(x0, nfe)``."""
    rng = np.random.default_rng(rng)
    den = _counted(denoiser)
    start = den.nfe
    grid = _sampler_grid(schedule, steps)
    x = _initial(x_T, schedule, shape, rng)
    for i in range(len(grid) - 1):
        s, s_next = grid[i], grid[i + 1]
        if s <= 0:
            continue
        sigma_up = min(s_next, np.sqrt(max(s_next ** 2 * (s ** 2 - s_next ** 2) / s ** 2, 0.0)))
        sigma_down = np.sqrt(max(s_next ** 2 - sigma_up ** 2, 0.0))
        d = (x - den(x, s, condition)) / s
        x = x + (sigma_down - s) * d
        if sigma_up > 0:
            x = x + rng.standard_normal(x.shape) * sigma_up
    return x, den.nfe - start


def ddim_sample(denoiser, schedule, steps, condition=None, x_T=None, rng=None, shape=None):
    """Deterministic first-order (Euler) probability-flow sampler.  Returns ``(x0, nfe)``."""
    den = _counted(denoiser)
    start = den.nfe
    grid = _sampler_grid(schedule, steps)
    x = _initial(x_T, schedule, shape, np.random.default_rng(rng))
    for i in range(len(grid) - 1):
        s, s_next = grid[i], grid[i + 1]
        if s <= 0:
            continue
        x = x + (s_next - s) * (x - den(x, s, condition)) / s
    return x, den.nfe - start


def heun_sample(teacher, condition=None, rng=None, x_T=None, shape=None):
    x = _initial(x_T, teacher.schedule, shape, np.random.default_rng(rng))
    return solve_pfode(teacher, x, teacher.schedule, condition)


@dataclass
class TeacherConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (128, 128, 128)
    act: str = "silu"
    n_bins: int = 40
    sigma_data: float = 0.5
    reward_weight: float = 0.0
    anneal: bool = True


def train_teacher(X, condition, config: TeacherConfig, rng, reward_fn=None, callback=None,
                  model: TeacherModel | None = None):
    """Fit a teacher on normalized windows ``X`` (N, d) with conditions (N, c).

    With ``reward_fn`` and a positive ``config.reward_weight`` the loss also
    maximises ``reward_fn(condition, denoised)``: the reward-aware teacher
    used only in the placement ablation.
    """
    rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=np.float64)
    C = None if condition is None else np.asarray(condition, dtype=np.float64).reshape(len(X), -1)
    cond_dim = 0 if C is None else C.shape[1]
    if model is None:
        model = new_teacher(X.shape[1], cond_dim, config.hidden, config.act, config.n_bins,
                            config.sigma_data, rng=rng)
    if config.steps == 0:
        return model, []
    use_reward = reward_fn is not None and config.reward_weight > 0

    def loss_fn(w, rng):
        idx = rng.integers(0, len(X), size=min(config.batch_size, len(X)))
        cb = None if C is None else C[idx]
        loss, den, _ = dsm_loss(model, X[idx], cb, rng, weights=w)
        metrics = {"dsm_loss": float(loss.value)}
        if use_reward:
            r = nd.mean(reward_fn(cb, den))
            metrics["reward"] = float(r.value)
            loss = loss - config.reward_weight * r
        return loss, metrics

    weights, history = nd.minimize(model.net.weights, loss_fn, config.steps, rng, lr=config.lr,
                                   callback=callback, anneal=config.anneal)
    model.net = model.net.copy(weights)
    return model, history


def model_meta(model) -> dict:
    s = model.schedule
    return {"x_dim": model.x_dim, "cond_dim": model.cond_dim, "n_bins": s.n_bins, "sigma_min": s.sigma_min,
            "sigma_max": s.sigma_max, "rho": s.rho, "sigma_data": model.precond.sigma_data,
            "n_freq": model.n_freq}


def save_model(path, model, **meta) -> str:
    """Checkpoint a teacher or student together with its schedule."""
    from .student import StudentModel

    kind = "student" if isinstance(model, StudentModel) else "teacher"
    return nd.save_checkpoint(path, model.net, kind=kind, **model_meta(model), **meta)


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, meta)``."""
    from .student import StudentModel

    net, meta = nd.load_checkpoint(path)
    cls = {"teacher": TeacherModel, "student": StudentModel}.get(meta.get("kind"))
    if cls is None:
        raise ValueError(f"{path} is not a teacher or student checkpoint")
    sched = karras_sigmas(meta["n_bins"], meta["sigma_min"], meta["sigma_max"], meta["rho"])
    model = cls(net, meta["x_dim"], meta["cond_dim"], sched, Preconditioner(meta["sigma_data"]), meta["n_freq"])
    return model, meta
