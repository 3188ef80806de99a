"""Analytic Gaussian-mixture targets: perturbed densities, scores, posterior
means and a 1D Wasserstein distance.  Used as ground truth for solvers and
for distillation runs with a perfect teacher."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), diagonal

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape[0] != self.weights.size:
            self.means = self.means.T
        if self.variances.shape != self.means.shape:
            self.variances = np.broadcast_to(self.variances.reshape(self.weights.size, -1),
                                              self.means.shape).copy()
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def symmetric_1d(cls, offset: float = 0.8, std: float = 0.6, w_hi: float = 0.5):
        return cls([1 - w_hi, w_hi], [[-offset], [offset]], [[std ** 2], [std ** 2]])

    def mean(self):
        return self.weights @ self.means

    def variance(self):
        m = self.mean()
        return self.weights @ (self.variances + self.means ** 2) - m ** 2

    def sample(self, n: int, rng) -> np.ndarray:
        k = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal((n, self.dim))

    def log_density(self, x, sigma=0.0):
        lw = self._log_weighted(np.atleast_2d(x), _sig3(sigma))
        return logsumexp(lw, axis=1)

    def _log_weighted(self, x, sig):
        var = self.variances[None] + np.square(sig)
        diff = x[:, None, :] - self.means[None]
        lp = -0.5 * np.sum(diff ** 2 / var + np.log(2 * np.pi * var), axis=-1)
        return lp + np.log(self.weights)

    def responsibilities(self, x, sigma=0.0):
        lw = self._log_weighted(np.atleast_2d(x), _sig3(sigma))
        return np.exp(lw - logsumexp(lw, axis=1, keepdims=True))

    def posterior_mean(self, x, sigma):
        """E[x0 | x0 + sigma*eps = x]."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig = _sig3(sigma)
        if np.all(sig == 0):
            return x.copy()
        s2 = np.square(sig)
        r = self.responsibilities(x, sigma)
        V = self.variances[None]
        comp = (s2 * self.means[None] + V * x[:, None, :]) / (V + s2)
        return np.einsum("nk,nkd->nd", r, comp)

    def score(self, x, sigma):
        """Gradient of log p_sigma computed directly from the component densities."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        var = self.variances[None] + np.square(_sig3(sigma))
        diff = x[:, None, :] - self.means[None]
        r = self.responsibilities(x, sigma)
        return np.einsum("nk,nkd->nd", r, -diff / var)

    def posterior_median(self, x, sigma):
        """Median of x0 given x for a 1D mixture: the minimiser of the L1
        denoising loss, which pseudo-Huber approaches as c_h -> 0."""
        if self.dim != 1:
            raise ValueError("posterior_median is defined for 1D mixtures only")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig = _sig3(sigma)
        if np.all(sig == 0):
            return x.copy()
        s2 = np.square(sig).reshape(-1, 1)
        r = self.responsibilities(x, sigma)
        V = self.variances[:, 0][None]
        pm = (s2 * self.means[:, 0][None] + V * x) / (V + s2)
        psd = np.sqrt(V * s2 / (V + s2))
        lo = np.full(len(x), pm.min() - 10 * psd.max())
        hi = np.full(len(x), pm.max() + 10 * psd.max())
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            below = np.sum(r * norm.cdf((mid[:, None] - pm) / psd), axis=1) < 0.5
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return (0.5 * (lo + hi))[:, None]

    def cdf(self, x, sigma=0.0):
        """CDF of a 1D mixture perturbed by N(0, sigma^2)."""
        if self.dim != 1:
            raise ValueError("cdf is defined for 1D mixtures only")
        sd = np.sqrt(self.variances[:, 0] + sigma ** 2)
        x = np.asarray(x, dtype=np.float64)
        return norm.cdf((x[..., None] - self.means[:, 0]) / sd) @ self.weights

    def ppf(self, q, sigma=0.0):
        """Quantiles of a 1D mixture by vectorised bisection on the CDF."""
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        if np.any((q <= 0) | (q >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        sd = np.sqrt(self.variances[:, 0].max() + sigma ** 2)
        lo = np.full(q.shape, self.means.min() - 40 * sd)
        hi = np.full(q.shape, self.means.max() + 40 * sd)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid, sigma) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


def _sig3(sigma):
    """Scalar stays scalar; a per-sample (B,) vector becomes (B, 1, 1)."""
    s = np.asarray(sigma, dtype=np.float64)
    return s.reshape(-1, 1, 1) if s.ndim else s


def gmm_posterior_mean(mixture: GaussianMixture, x, sigma):
    return mixture.posterior_mean(x, sigma)


def gmm_score(mixture: GaussianMixture, x, sigma):
    return mixture.score(x, sigma)


class OracleDenoiser:
    """Bayes-optimal denoiser of a mixture, usable wherever a teacher is.

    ``statistic="mean"`` is optimal for squared error, ``"median"`` (1D only)
    for the small-c_h pseudo-Huber loss the teacher is trained with.
    """

    def __init__(self, mixture: GaussianMixture, statistic: str = "mean"):
        if statistic not in ("mean", "median"):
            raise ValueError("statistic must be 'mean' or 'median'")
        self.mixture = mixture
        self.statistic = statistic
        self.nfe = 0

    def __call__(self, x, sigma, condition=None):
        self.nfe += 1
        if self.statistic == "median":
            return self.mixture.posterior_median(x, sigma)
        return self.mixture.posterior_mean(x, sigma)


def gaussian_flow(x, mean, var, sigma_from, sigma_to):
    """Exact probability-flow map for a single Gaussian target."""
    scale = np.sqrt((var + np.square(sigma_to)) / (var + np.square(sigma_from)))
    return mean + (np.asarray(x) - mean) * scale


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical 1D distributions by quantile matching."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.size != b.size:
        n = max(a.size, b.size)
        q = (np.arange(n) + 0.5) / n
        a = np.quantile(a, q, method="inverted_cdf")
        b = np.quantile(b, q, method="inverted_cdf")
    return float(np.mean(np.abs(a - b)))


def wasserstein_to_mixture(samples, mixture: GaussianMixture) -> float:
    """W1 between 1D samples and a mixture, using exact mid-point quantiles."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("empty sample set")
    q = (np.arange(x.size) + 0.5) / x.size
    return float(np.mean(np.abs(x - mixture.ppf(q))))
