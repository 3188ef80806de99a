"""Karras noise grids, EDM preconditioning, training-noise sampling and the
pseudo-Huber distance shared by teacher and student."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0
SIGMA_DATA = 0.5
P_MEAN = -1.2
P_STD = 1.2


@dataclass(frozen=True)
class NoiseSchedule:
    n_bins: int
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho: float = RHO

    @property
    def sigmas(self) -> np.ndarray:
        """Descending positive grid, length ``n_bins``."""
        return karras_sigmas_array(self.n_bins, self.sigma_min, self.sigma_max, self.rho)

    @property
    def grid(self) -> np.ndarray:
        """Descending grid with the terminal 0 appended (``n_bins + 1`` points)."""
        return np.append(self.sigmas, 0.0)

    def ascending(self) -> np.ndarray:
        """``[0, sigma_min, ..., sigma_max]``; the index space used for timestep triples."""
        return self.grid[::-1].copy()


def karras_sigmas_array(n_bins, sigma_min, sigma_max, rho):
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if n_bins == 1:
        return np.array([float(sigma_max)])
    i = np.arange(n_bins)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    s = (hi + i / (n_bins - 1) * (lo - hi)) ** rho
    s[0], s[-1] = sigma_max, sigma_min
    return s


def karras_sigmas(n_bins: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                  rho: float = RHO) -> NoiseSchedule:
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise ValueError("rho must be positive")
    return NoiseSchedule(int(n_bins), float(sigma_min), float(sigma_max), float(rho))


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = SIGMA_DATA

    def c_skip(self, sigma):
        sd2 = self.sigma_data ** 2
        return sd2 / (np.square(sigma) + sd2)

    def c_out(self, sigma):
        sd = self.sigma_data
        return np.asarray(sigma) * sd / np.sqrt(np.square(sigma) + sd * sd)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(np.square(sigma) + self.sigma_data ** 2)

    def c_noise(self, sigma):
        # sigma = 0 only occurs where c_out = 0, so the clamp never leaks into outputs
        return 0.25 * np.log(np.maximum(sigma, 1e-5))


def fourier_embedding(v, n_freq: int = 4) -> np.ndarray:
    """[v, sin(f v), cos(f v)] with octave frequencies; ``v`` has shape (B,)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1, 1)
    f = (2.0 ** np.arange(n_freq)) * (np.pi / 4)
    return np.concatenate([v, np.sin(v * f), np.cos(v * f)], axis=1)


def embedding_width(n_freq: int = 4) -> int:
    return 1 + 2 * n_freq


def as_column(sigma, batch: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if s.size not in (1, batch):
        raise ValueError(f"sigma of size {s.size} does not match batch {batch}")
    return np.broadcast_to(s, (batch,)).reshape(batch, 1)


def edm_denoise(raw_net, x, sigma, condition=None, precond: Preconditioner = Preconditioner()):
    """``c_skip x + c_out F(c_in x, c_noise, condition)``.

    ``raw_net(scaled_x, c_noise_column, condition)`` is the bare network.
    ``x`` is (B, d) and may be a tape variable; ``sigma`` is a scalar or (B,).
    """
    xv = nd.value_of(x)
    sig = as_column(sigma, xv.shape[0])
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    F = raw_net(nd.mul(x, precond.c_in(sig)), precond.c_noise(sig[:, 0]), condition)
    return nd.add(nd.mul(x, precond.c_skip(sig)), nd.mul(F, precond.c_out(sig)))


def sample_training_sigma(rng, size=None, p_mean=P_MEAN, p_std=P_STD,
                          sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
    z = rng.normal(p_mean, p_std, size=size) if p_std > 0 else np.full(size if size else (), float(p_mean))
    return np.clip(np.exp(z), sigma_min, sigma_max)


def pseudo_huber_constant(dim: int) -> float:
    return 0.00054 * np.sqrt(dim)


def pseudo_huber(a, b, c_h: float):
    """``sqrt(|a-b|^2 + c_h^2) - c_h`` per row (scalar for 1-D inputs)."""
    av, bv = nd.value_of(a), nd.value_of(b)
    if np.shape(av) != np.shape(bv):
        raise ValueError(f"length mismatch: {np.shape(av)} vs {np.shape(bv)}")
    return nd.pseudo_huber(a, b, c_h)


def perturb(x0, sigma, rng):
    """``x0 + sigma * eps``; returns (x_sigma, eps)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    if sig.ndim == 1 and x0.ndim == 2:
        sig = sig[:, None]
    return x0 + sig * eps, eps
