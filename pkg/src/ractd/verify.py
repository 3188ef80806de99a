"""Oracle-based self checks run by ``ractd verify``."""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .oracle import GaussianMixture, OracleDenoiser
from .schedule import karras_sigmas
from .student import DistillWeights, distill_loss, new_student
from .teacher import new_teacher, solve_pfode


def heun_order_ratios(ns=(20, 40, 80, 160), reference: int = 2560, n: int = 400, seed: int = 0):
    """Endpoint error ratios of the Heun solver under grid doubling."""
    mix = GaussianMixture.symmetric_1d()
    x_T = np.random.default_rng(seed).standard_normal((n, 1)) * 80.0
    ref, _ = solve_pfode(OracleDenoiser(mix), x_T, karras_sigmas(reference))
    errs = []
    for k in ns:
        x, _ = solve_pfode(OracleDenoiser(mix), x_T, karras_sigmas(k))
        errs.append(float(np.mean(np.abs(x - ref))))
    errs = np.array(errs)
    return errs[:-1] / errs[1:], errs


def boundary_errors(n: int = 10_000, seed: int = 0):
    """max |G(x,t,t) - x| and max |D(x,0) - x| for random nets and inputs."""
    rng = np.random.default_rng(seed)
    st = new_student(3, 2, (32, 32), rng=rng)
    te = new_teacher(3, 2, (32, 32), rng=rng)
    x = rng.standard_normal((n, 3)) * 10
    c = rng.standard_normal((n, 2))
    t = np.exp(rng.uniform(np.log(0.002), np.log(80), n))
    g = np.max(np.abs(st.jump(x, t, t, c) - x))
    d = np.max(np.abs(te.denoise(x, 0.0, c) - x))
    return float(g), float(d)


def tweedie_error(seed: int = 0):
    """Posterior mean vs x + sigma^2 * score on a 2D mixture."""
    rng = np.random.default_rng(seed)
    mix = GaussianMixture([0.3, 0.7], [[-1.0, 0.5], [1.0, -0.2]], [[0.2, 0.3], [0.4, 0.1]])
    x = rng.standard_normal((500, 2)) * 2
    sig = np.exp(rng.uniform(-3, 2, 500))
    lhs = mix.posterior_mean(x, sig)
    rhs = x + sig[:, None] ** 2 * mix.score(x, sig)
    return float(np.max(np.abs(lhs - rhs)))


def primitive_fd_errors(seed: int = 0) -> dict:
    """Max relative gradient error of each tape primitive against central differences."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3))
    other = np.cos(x) + 0.3
    params = nd.init_mlp(3, (5,), 2, cond_dim=2, act="mish", rng=rng)
    c = rng.standard_normal((4, 2))
    y = rng.standard_normal((4, 2))
    cases = {
        "add": lambda v: nd.mean(nd.add(v, other)),
        "sub-mul": lambda v: nd.mean(nd.mul(nd.sub(v, other), v)),
        "silu": lambda v: nd.mean(nd.mul(nd.activation(v, "silu"), other)),
        "mish": lambda v: nd.mean(nd.mul(nd.activation(v, "mish"), other)),
        "sigmoid": lambda v: nd.mean(nd.mul(nd.activation(v, "sigmoid"), other)),
        "sq_dist": lambda v: nd.mean(nd.sq_dist(v, other)),
        "pseudo_huber": lambda v: nd.mean(nd.pseudo_huber(v, other, 0.1)),
        "row_sum": lambda v: nd.mean(nd.mul(nd.row_sum(v), nd.row_sum(other))),
        "concat": lambda v: nd.mean(nd.mul(nd.concat([v, other]), nd.concat([other, v]))),
        "take_cols": lambda v: nd.mean(nd.mul(nd.take_cols(v, 0, 2), other[:, :2])),
        "affine": lambda v: nd.mean(nd.sq_dist(nd.mlp_forward(params, v, c), y)),
    }
    out = {}
    for name, fn in cases.items():
        tape = nd.Tape()
        leaf = tape.variable(x)
        g = tape.gradient(fn(leaf), leaf)
        num = nd.numerical_gradient(lambda v: float(fn(v)), x)
        out[name] = float(np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-6)))
    return out


def distill_fd_error(seed: int = 0, n_check: int = 60):
    """Max relative error of the full three-term loss gradient vs finite differences."""
    rng = np.random.default_rng(seed)
    te = new_teacher(2, 1, (8,), rng=rng)
    st = new_student(2, 1, (8,), n_bins=10, rng=rng)
    x0 = rng.standard_normal((4, 2))
    cond = rng.standard_normal((4, 1))
    target = st.net.weights + 0.01 * rng.standard_normal(st.net.weights.size)
    lw = DistillWeights(1.0, 1.0, 0.5)
    reward_fn = lambda c, x: nd.mul(nd.sq_dist(x, np.zeros_like(nd.value_of(x))), -1.0)

    def loss(w):
        return distill_loss(st, te, x0, cond, lw, np.random.default_rng(1), w, reward_fn,
                            np.random.default_rng(2), target)[0]

    tape = nd.Tape()
    leaf = tape.variable(st.net.weights)
    grad = tape.gradient(loss(leaf), leaf)
    idx = np.random.default_rng(seed).choice(grad.size, size=min(n_check, grad.size), replace=False)
    worst = 0.0
    for i in idx:
        eps = 1e-6
        wp, wm = st.net.weights.copy(), st.net.weights.copy()
        wp[i] += eps
        wm[i] -= eps
        num = (float(loss(wp)) - float(loss(wm))) / (2 * eps)
        worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-8))
    return worst


def run_verify():
    ratios, errs = heun_order_ratios(n=200)
    g, d = boundary_errors(2000)
    tw = tweedie_error()
    fd = distill_fd_error()
    prim = max(primitive_fd_errors().values())
    return [
        {"name": "heun-order", "ok": bool(np.all((ratios >= 3.2) & (ratios <= 4.8))),
         "detail": "ratios " + ", ".join(f"{r:.2f}" for r in ratios)},
        {"name": "boundary", "ok": g < 1e-12 and d < 1e-12, "detail": f"G(x,t,t) {g:.1e}, D(x,0) {d:.1e}"},
        {"name": "tweedie", "ok": tw < 1e-10, "detail": f"max error {tw:.1e}"},
        {"name": "primitive-gradients", "ok": prim < 1e-5, "detail": f"max relative error {prim:.1e}"},
        {"name": "distill-gradient", "ok": fd < 1e-4, "detail": f"max relative error {fd:.1e}"},
    ]
