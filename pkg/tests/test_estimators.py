import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ractd import ndgrad as nd
from ractd.estimators import (ConsistencyPlanner, DiffusionPlanner, Normalizer, ReturnToGoRegressor,
                              ReverseDynamicsRegressor)


def test_normalizer_round_trip_and_floor():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 3)) * [1.0, 4.0, 0.0] + [0.0, 2.0, 5.0]
    n = Normalizer().fit(X)
    Z = n.transform(X)
    np.testing.assert_allclose(Z[:, :2].std(0), 1.0)
    assert np.all(Z[:, 2] == 0)
    np.testing.assert_allclose(n.inverse_transform(Z), X, atol=1e-12)
    with pytest.raises(NotFittedError):
        Normalizer().transform(X)


def test_params_and_clone():
    p = DiffusionPlanner(steps=7, hidden=(4,))
    assert p.get_params()["steps"] == 7
    q = clone(p).set_params(lr=0.5)
    assert q.lr == 0.5 and q.hidden == (4,)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    C = rng.standard_normal((200, 1))
    X = np.concatenate([C, -C], axis=1) + 0.1 * rng.standard_normal((200, 2))
    teacher = DiffusionPlanner(hidden=(16, 16), n_bins=8, steps=60, random_state=0).fit(X, C)
    return X, C, teacher


def test_teacher_sample_shapes_and_nfe(fitted):
    _, C, teacher = fitted
    x, nfe = teacher.sample(C[:5], random_state=1)
    assert x.shape == (5, 2) and nfe == 15
    np.testing.assert_array_equal(teacher.predict(C[:5], random_state=1), x)


def test_student_fit_is_seeded_and_one_step(fitted):
    X, C, teacher = fitted
    a = ConsistencyPlanner(teacher, steps=10, n_bins=10, random_state=2).fit(X, C)
    b = ConsistencyPlanner(teacher, steps=10, n_bins=10, random_state=2).fit(X, C)
    np.testing.assert_array_equal(a.model_.net.weights, b.model_.net.weights)
    x, nfe = a.sample(C[:3], random_state=0)
    assert x.shape == (3, 2) and nfe == 1
    assert a.set_params(n_steps=3).sample(C[:3], random_state=0)[1] == 3
    with pytest.raises(ValueError):
        ConsistencyPlanner(None).fit(X, C)


def test_student_with_reward_fn(fitted):
    X, C, teacher = fitted
    reward = lambda c, x: nd.mul(nd.sq_dist(x, np.zeros_like(nd.value_of(x))), -1.0)
    s = ConsistencyPlanner(teacher, reward_fn=reward, reward_weight=0.1, steps=5, n_bins=10, random_state=0)
    s.fit(X, C)
    assert np.isfinite(s.history_[-1]["reward"])


def test_regressors_fit_linear_targets():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 4))
    y = X[:, 0] - 0.5 * X[:, 3]
    r = ReturnToGoRegressor(hidden=(16,), act="identity", steps=800, lr=1e-2, random_state=0).fit(X, y)
    assert r.predict(X).shape == (400,)
    assert r.score(X, y) > 0.999
    Y = np.stack([y, 2 * y], axis=1)
    rd = ReverseDynamicsRegressor(hidden=(16,), act="identity", steps=800, lr=1e-2, random_state=0).fit(X, Y)
    assert rd.predict(X).shape == (400, 2)
