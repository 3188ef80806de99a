import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ractd import ndgrad as nd
from ractd.oracle import GaussianMixture
from ractd.schedule import (P_MEAN, P_STD, Preconditioner, edm_denoise, karras_sigmas, perturb,
                            pseudo_huber, pseudo_huber_constant, sample_training_sigma)


def test_karras_endpoints_80_bins():
    s = karras_sigmas(80, 0.002, 80.0, 7.0).sigmas
    assert s.shape == (80,)
    assert s[0] == 80.0 and s[79] == 0.002
    assert np.all(np.diff(s) < 0)


def test_karras_two_bins_and_linear_rho():
    np.testing.assert_array_equal(karras_sigmas(2, 0.1, 5.0).sigmas, [5.0, 0.1])
    np.testing.assert_allclose(karras_sigmas(5, 1.0, 5.0, rho=1.0).sigmas, [5, 4, 3, 2, 1])


def test_karras_closed_form():
    n, lo, hi, rho = 12, 0.01, 30.0, 7.0
    i = np.arange(n)
    want = (hi ** (1 / rho) + i / (n - 1) * (lo ** (1 / rho) - hi ** (1 / rho))) ** rho
    np.testing.assert_allclose(karras_sigmas(n, lo, hi, rho).sigmas, want, rtol=1e-13)


def test_schedule_grid_appends_zero_and_ascending_reverses():
    s = karras_sigmas(4)
    assert s.grid[-1] == 0 and len(s.grid) == 5
    np.testing.assert_array_equal(s.ascending(), s.grid[::-1])


@pytest.mark.parametrize("args", [(1, 0.002, 80), (10, 0.0, 80), (10, 5.0, 1.0), (10, -1.0, 1.0)])
def test_karras_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        karras_sigmas(*args)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 200.0), st.floats(0.1, 2.0))
def test_preconditioner_closed_forms(sigma, sd):
    p = Preconditioner(sd)
    assert np.isclose(p.c_skip(sigma), sd ** 2 / (sigma ** 2 + sd ** 2), rtol=1e-14)
    assert np.isclose(p.c_out(sigma), sigma * sd / np.sqrt(sigma ** 2 + sd ** 2), rtol=1e-14)
    assert np.isclose(p.c_in(sigma), 1 / np.sqrt(sigma ** 2 + sd ** 2), rtol=1e-14)


def test_preconditioner_at_zero_is_exact():
    p = Preconditioner(0.5)
    assert p.c_skip(0.0) == 1.0 and p.c_out(0.0) == 0.0


def test_edm_denoise_examples():
    x = np.random.default_rng(0).standard_normal((5, 3))
    junk = lambda xs, cn, c: np.full(np.shape(xs), 1e6)
    np.testing.assert_array_equal(edm_denoise(junk, x, 0.0), x)
    zero = lambda xs, cn, c: np.zeros(np.shape(xs))
    np.testing.assert_allclose(edm_denoise(zero, np.array([[2.0]]), 0.5, precond=Preconditioner(0.5)), [[1.0]])


def test_edm_denoise_with_oracle_network_is_posterior_mean():
    mix = GaussianMixture.symmetric_1d()
    p = Preconditioner(0.5)

    def raw(xs, c_noise, cond):
        # invert the preconditioning so that D is the Bayes posterior mean
        sig = np.exp(4 * c_noise)[:, None]
        x = xs / p.c_in(sig)
        return (mix.posterior_mean(x, sig[:, 0]) - p.c_skip(sig) * x) / p.c_out(sig)

    x = np.linspace(-3, 3, 11)[:, None]
    for sigma in (0.05, 0.7, 4.0):
        np.testing.assert_allclose(edm_denoise(raw, x, sigma, precond=p), mix.posterior_mean(x, sigma),
                                   atol=1e-10)


def test_training_sigma_law():
    rng = np.random.default_rng(0)
    assert np.all(sample_training_sigma(rng, 10, p_std=0.0) == np.exp(P_MEAN))
    s = sample_training_sigma(rng, 100_000)
    assert np.all((s >= 0.002) & (s <= 80.0))
    z = np.log(s)
    assert abs(z.mean() - P_MEAN) < 3 * P_STD / np.sqrt(z.size)


def test_pseudo_huber_examples():
    assert pseudo_huber(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 0.1) == 0
    assert np.isclose(pseudo_huber(np.array([3.0, 4.0]), np.zeros(2), 1.0), np.sqrt(26) - 1)
    far = pseudo_huber(np.array([1000.0]), np.zeros(1), 0.01)
    assert np.isclose(far, 1000.0 - 0.01, rtol=1e-9)
    with pytest.raises(ValueError):
        pseudo_huber(np.zeros(2), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        pseudo_huber(np.zeros(2), np.zeros(2), 0.0)
    assert np.isclose(pseudo_huber_constant(4), 0.00108)


def test_pseudo_huber_gradient():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    err = nd.finite_diff_check(lambda v: nd.mean(pseudo_huber(v.reshape(3, 4) if isinstance(v, np.ndarray) else v, b, 0.05)),
                               a)
    assert err < 1e-5


def test_perturb():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 2))
    np.testing.assert_array_equal(perturb(x0, 0.0, rng)[0], x0)
    xs, _ = perturb(np.zeros(100_000), 1.7, rng)
    assert abs(xs.std() / 1.7 - 1) < 0.02
    a, _ = perturb(x0, 0.3, np.random.default_rng(5))
    b, _ = perturb(x0, 0.3, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        perturb(x0, -1.0, rng)
