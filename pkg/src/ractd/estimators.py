"""scikit-learn style wrappers around the planners and regressors."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import ndgrad as nd
from .student import DistillConfig, multi_step_sample, train_student
from .teacher import TeacherConfig, heun_sample, train_teacher


def _cond(C, n):
    if C is None:
        return None
    return check_array(C, ensure_min_samples=1).reshape(n, -1)


class Normalizer(BaseEstimator, TransformerMixin):
    """Per-column standardization with a floor on the scale."""

    def __init__(self, floor=1e-6):
        self.floor = floor

    def fit(self, X, y=None):
        X = check_array(X)
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), self.floor)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return (check_array(X) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return check_array(X) * self.scale_ + self.mean_


class DiffusionPlanner(BaseEstimator):
    """EDM teacher fitted on rows of ``X`` given conditions ``C``; predicts
    with the Heun solver (``sample`` returns the NFE as well)."""

    def __init__(self, hidden=(128, 128, 128), act="silu", n_bins=40, sigma_data=1.0, steps=3000, lr=1e-3,
                 batch_size=256, random_state=None):
        self.hidden = hidden
        self.act = act
        self.n_bins = n_bins
        self.sigma_data = sigma_data
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, C=None):
        X = check_array(X)
        cfg = TeacherConfig(self.steps, self.batch_size, self.lr, tuple(self.hidden), self.act, self.n_bins,
                            self.sigma_data)
        self.model_, self.history_ = train_teacher(X, _cond(C, len(X)), cfg, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, C=None, n=None, random_state=None):
        check_is_fitted(self, "model_")
        cond = None if C is None else check_array(C)
        n = n if cond is None else len(cond)
        return heun_sample(self.model_, cond, np.random.default_rng(random_state), shape=(n, self.model_.x_dim))

    def predict(self, C, random_state=None):
        return self.sample(C, random_state=random_state)[0]


class ConsistencyPlanner(BaseEstimator):
    """Student distilled from a fitted :class:`DiffusionPlanner`, optionally
    with a frozen reward function ``reward_fn(condition, x)``."""

    def __init__(self, teacher=None, reward_fn=None, reward_weight=0.0, dsm_weight=1.0, steps=1500, lr=1e-3,
                 batch_size=256, n_bins=80, n_steps=1, random_state=None):
        self.teacher = teacher
        self.reward_fn = reward_fn
        self.reward_weight = reward_weight
        self.dsm_weight = dsm_weight
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.n_bins = n_bins
        self.n_steps = n_steps
        self.random_state = random_state

    def fit(self, X, C=None):
        X = check_array(X)
        if self.teacher is None:
            raise ValueError("a fitted teacher is required")
        check_is_fitted(self.teacher, "model_")
        cfg = DistillConfig(self.steps, self.batch_size, self.lr, 1.0, self.dsm_weight, self.reward_weight,
                            n_bins=self.n_bins)
        self.model_, self.history_ = train_student(X, _cond(C, len(X)), self.teacher.model_, cfg,
                                                   self.random_state, self.reward_fn)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, C=None, n=None, random_state=None):
        from .planeval import default_resample_sigmas

        check_is_fitted(self, "model_")
        cond = None if C is None else check_array(C)
        return multi_step_sample(self.model_, cond, default_resample_sigmas(self.n_steps),
                                 np.random.default_rng(random_state), n)

    def predict(self, C, random_state=None):
        return self.sample(C, random_state=random_state)[0]


class _MLPRegressor(BaseEstimator, RegressorMixin):
    def __init__(self, hidden=(64, 64), act="mish", steps=2000, lr=1e-3, batch_size=256, random_state=None):
        self.hidden = hidden
        self.act = act
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=np.float64)
        self._y_1d = y.ndim == 1
        self.params_, self.history_, self.heldout_mse_ = nd.fit_regressor(
            X, y.reshape(len(X), -1), tuple(self.hidden), self.act, self.steps, self.lr, self.batch_size,
            self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        out = nd.mlp_forward(self.params_, check_array(X))
        return out[:, 0] if self._y_1d else out


class ReturnToGoRegressor(_MLPRegressor):
    """Regressor from concatenated (state history, action) rows to return-to-go."""


class ReverseDynamicsRegressor(_MLPRegressor):
    """Regressor from concatenated (s_n, s_{n+1}) rows to a_n."""
