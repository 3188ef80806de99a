"""Reverse-mode autodiff over batched numpy arrays, dense networks and optimizers.

Every op accepts plain arrays or :class:`Var` handles.  When no input is a
``Var`` the op is evaluated eagerly and returns an ndarray, so inference code
runs through exactly the same functions as training code without recording
anything.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "silu", "mish")


class Tape:
    """Append-only record of primitive operations.

    Nodes are appended in evaluation order, so the list is already
    topologically sorted.  ``backward`` never mutates recorded values, which
    makes it safe to call several times from different roots.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []

    def __len__(self):
        return len(self.values)

    def _push(self, kind, value, parents=(), vjp=None) -> "Var":
        self.kinds.append(kind)
        self.values.append(value)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1)

    def variable(self, value) -> "Var":
        """Register a differentiable leaf."""
        return self._push("leaf", np.asarray(value, dtype=np.float64))

    def constant(self, value) -> "Var":
        return self._push("const", np.asarray(value, dtype=np.float64))

    def backward(self, root: "Var") -> dict[int, np.ndarray]:
        """Return adjoints for every node reachable from ``root``."""
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if np.ndim(root.value) != 0:
            raise ValueError(f"backward root must be scalar, got shape {np.shape(root.value)}")
        adj: dict[int, np.ndarray] = {root.idx: np.ones((), dtype=np.float64)}
        for i in range(root.idx, -1, -1):
            g = adj.get(i)
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self.parents[i], vjp(g)):
                if gp is None:
                    continue
                _accumulate(adj, p, gp, self.values[p])
        return adj

    def gradient(self, root: "Var", wrt: "Var | Sequence[Var]"):
        adj = self.backward(root)
        if isinstance(wrt, Var):
            return _adjoint_or_zero(adj, wrt)
        return [_adjoint_or_zero(adj, w) for w in wrt]


class _Partial:
    """Gradient touching only a contiguous range of a flat leaf."""

    __slots__ = ("start", "stop", "value")

    def __init__(self, start, stop, value):
        self.start, self.stop, self.value = start, stop, value


def _accumulate(adj, idx, g, like):
    if isinstance(g, _Partial):
        buf = adj.get(idx)
        if buf is None:
            buf = adj[idx] = np.zeros_like(like)
        buf[g.start:g.stop] += g.value
        return
    g = _unbroadcast(g, np.shape(like))
    if idx in adj:
        adj[idx] = adj[idx] + g
    else:
        adj[idx] = g


def _adjoint_or_zero(adj, var):
    g = adj.get(var.idx)
    return np.zeros_like(var.value) if g is None else np.array(g, dtype=np.float64)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("tape", "idx")
    __array_priority__ = 100

    def __init__(self, tape: Tape, idx: int):
        self.tape, self.idx = tape, idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(idx={self.idx}, kind={self.tape.kinds[self.idx]}, shape={self.shape})"


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.constant(x)


# -- primitives --------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("add", a.value + b.value, (a.idx, b.idx), lambda g: (g, g))


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("sub", a.value - b.value, (a.idx, b.idx), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product with numpy broadcasting; either side may be constant."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    if not isinstance(b, Var):
        bv = np.asarray(b, dtype=np.float64)
        a = _lift(tape, a)
        return tape._push("scale", a.value * bv, (a.idx,), lambda g: (g * bv,))
    if not isinstance(a, Var):
        return mul(b, a)
    av, bv = a.value, b.value
    return tape._push("mul", av * bv, (a.idx, b.idx), lambda g: (g * bv, g * av))


def affine(x, weights, layer: "Layer"):
    """``x @ W.T + b`` with W and b read out of a flat weight vector."""
    tape = _tape_of(x, weights)
    wv = value_of(weights)
    W = wv[layer.w_start:layer.b_start].reshape(layer.out_dim, layer.in_dim)
    b = wv[layer.b_start:layer.stop]
    xv = value_of(x)
    out = xv @ W.T + b
    if tape is None:
        return out
    x = _lift(tape, x)
    w = _lift(tape, weights)

    def vjp(g):
        gW = g.T @ xv if g.ndim == 2 else np.outer(g, xv)
        gb = g.sum(axis=0) if g.ndim == 2 else g
        flat = np.concatenate([gW.ravel(), gb])
        return g @ W, _Partial(layer.w_start, layer.stop, flat)

    return tape._push("affine", out, (x.idx, w.idx), vjp)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x, kind: str):
    if kind == "identity":
        return x
    tape = _tape_of(x)
    xv = value_of(x)
    if kind == "silu":
        s = _sigmoid(xv)
        out = xv * s
        dfn = lambda: s * (1.0 + xv * (1.0 - s))
    elif kind == "mish":
        th = np.tanh(_softplus(xv))
        out = xv * th
        dfn = lambda: th + xv * (1.0 - th * th) * _sigmoid(xv)
    elif kind == "sigmoid":
        out = _sigmoid(xv)
        dfn = lambda: out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    if tape is None:
        return out
    d = dfn()
    return tape._push(kind, out, (x.idx,), lambda g: (g * d,))


def clip(x, lo, hi):
    """Elementwise clamp; the gradient is passed only where the value is inside."""
    tape = _tape_of(x)
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if tape is None:
        return out
    inside = ((xv >= lo) & (xv <= hi)).astype(np.float64)
    return tape._push("clip", out, (x.idx,), lambda g: (g * inside,))


def concat(parts: Sequence, axis: int = -1):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    lifted = [_lift(tape, p) for p in parts]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(vals))
        )

    return tape._push("concat", out, tuple(p.idx for p in lifted), vjp)


def take_cols(x, start: int, stop: int):
    """Slice columns ``start:stop`` of the last axis."""
    tape = _tape_of(x)
    xv = value_of(x)
    out = xv[..., start:stop]
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., start:stop] = g
        return (full,)

    return tape._push("slice", out, (x.idx,), vjp)


def mean(x):
    """Mean over all entries, giving a scalar."""
    tape = _tape_of(x)
    xv = value_of(x)
    out = np.asarray(xv.mean())
    if tape is None:
        return out
    n = xv.size
    return tape._push("mean", out, (x.idx,), lambda g: (np.full_like(xv, g / n),))


def row_sum(x):
    tape = _tape_of(x)
    xv = value_of(x)
    out = xv.sum(axis=-1)
    if tape is None:
        return out
    return tape._push("row_sum", out, (x.idx,), lambda g: (np.broadcast_to(g[..., None], xv.shape).copy(),))


def sq_dist(a, b):
    """Row-wise squared Euclidean distance."""
    tape = _tape_of(a, b)
    diff = value_of(a) - value_of(b)
    out = (diff * diff).sum(axis=-1)
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)

    def vjp(g):
        ga = 2.0 * g[..., None] * diff
        return ga, -ga

    return tape._push("sq_dist", out, (a.idx, b.idx), vjp)


def pseudo_huber(a, b, c: float):
    """Row-wise ``sqrt(|a-b|^2 + c^2) - c``."""
    if c <= 0:
        raise ValueError("pseudo-Huber constant must be positive")
    if np.shape(value_of(a)) != np.shape(value_of(b)):
        raise ValueError(f"shape mismatch {np.shape(value_of(a))} vs {np.shape(value_of(b))}")
    tape = _tape_of(a, b)
    diff = value_of(a) - value_of(b)
    root = np.sqrt((diff * diff).sum(axis=-1) + c * c)
    out = root - c
    if tape is None:
        return out
    a, b = _lift(tape, a), _lift(tape, b)

    def vjp(g):
        ga = (g / root)[..., None] * diff
        return ga, -ga

    return tape._push("pseudo_huber", out, (a.idx, b.idx), vjp)


# -- dense networks -----------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    act: str
    w_start: int
    b_start: int
    stop: int


@dataclass
class NetworkParams:
    """Flat float64 weights plus the layer layout that indexes into them.

    ``cond_dim`` columns of conditioning are concatenated onto the input of
    every layer, so each layer's ``in_dim`` already includes them.
    """

    topology: tuple[tuple[int, int, str], ...]
    cond_dim: int
    weights: np.ndarray
    layers: tuple[Layer, ...] = field(init=False, repr=False)

    def __post_init__(self):
        self.topology = tuple((int(i), int(o), str(a)) for i, o, a in self.topology)
        self.layers = _layout(self.topology)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.layers[-1].stop if self.layers else 0
        if self.weights.shape != (n,):
            raise ValueError(f"expected {n} weights, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite weights")

    @property
    def in_dim(self):
        return self.topology[0][0] - self.cond_dim

    @property
    def out_dim(self):
        return self.topology[-1][1]

    def copy(self, weights=None) -> "NetworkParams":
        w = self.weights.copy() if weights is None else weights
        return NetworkParams(self.topology, self.cond_dim, w)


def _layout(topology):
    layers, off = [], 0
    for i, o, act in topology:
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        layers.append(Layer(i, o, act, off, off + i * o, off + i * o + o))
        off += i * o + o
    return tuple(layers)


def init_mlp(in_dim: int, hidden: Sequence[int], out_dim: int, cond_dim: int = 0,
             act: str = "silu", rng=None, zero_last: bool = False) -> NetworkParams:
    """Uniform(+-1/sqrt(fan_in)) init; hidden layers use ``act``, the head is linear."""
    rng = np.random.default_rng(rng)
    widths = [in_dim, *hidden, out_dim]
    topo = []
    for j in range(len(widths) - 1):
        a = "identity" if j == len(widths) - 2 else act
        topo.append((widths[j] + cond_dim, widths[j + 1], a))
    chunks = []
    for j, (i, o, _) in enumerate(topo):
        bound = 1.0 / np.sqrt(i)
        if zero_last and j == len(topo) - 1:
            chunks.append(np.zeros(i * o + o))
        else:
            chunks.append(rng.uniform(-bound, bound, size=i * o + o))
    return NetworkParams(tuple(topo), cond_dim, np.concatenate(chunks))


def mlp_forward(params: NetworkParams, x, condition=None, weights=None):
    """Evaluate the network.

    ``weights`` overrides ``params.weights``; pass a tape leaf to record
    parameter gradients, or a plain array to treat the weights as constants.
    """
    w = params.weights if weights is None else weights
    xv = value_of(x)
    squeeze = np.ndim(xv) == 1
    if squeeze:
        if isinstance(x, Var):
            raise ValueError("tracked inputs must be 2-D (batch, features)")
        x = xv[None, :]
    if condition is None:
        condition = np.zeros((np.shape(value_of(x))[0], 0))
    cv = value_of(condition)
    if np.ndim(cv) == 1:
        condition = np.broadcast_to(cv, (np.shape(value_of(x))[0], cv.shape[0]))
        cv = condition
    if cv.shape[-1] != params.cond_dim:
        raise ValueError(f"condition width {cv.shape[-1]} != declared {params.cond_dim}")
    h = x
    for j, layer in enumerate(params.layers):
        inp = concat([h, condition]) if params.cond_dim else h
        width = np.shape(value_of(inp))[-1]
        if width != layer.in_dim:
            raise ValueError(f"layer {j}: input width {width} != expected {layer.in_dim}")
        h = activation(affine(inp, w, layer), layer.act)
    if squeeze and not isinstance(h, Var):
        h = h[0]
    return h


# -- gradient checking ---------------------------------------------------------

def numerical_gradient(fn: Callable[[np.ndarray], float], w: np.ndarray, eps: float = 1e-6):
    w = np.array(w, dtype=np.float64)
    g = np.empty_like(w)
    flat, gflat = w.reshape(-1), g.reshape(-1)
    for i in range(w.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(fn(w))
        flat[i] = old - eps
        fm = float(fn(w))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while perturbing index {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def finite_diff_check(loss_fn: Callable, w: np.ndarray, eps: float = 1e-6, floor: float = 1e-12):
    """Compare autodiff and central differences.

    ``loss_fn(weights)`` must return a scalar when ``weights`` is an array and
    a scalar :class:`Var` when ``weights`` is a tape leaf.  Returns the max
    of ``|g_ad - g_fd| / (|g_fd| + floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = np.asarray(w, dtype=np.float64)
    tape = Tape()
    leaf = tape.variable(w.copy())
    root = loss_fn(leaf)
    if not np.isfinite(root.value):
        raise FloatingPointError("non-finite loss")
    g_ad = tape.gradient(root, leaf)
    g_fd = numerical_gradient(lambda v: loss_fn(v), w, eps)
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + floor)))


# -- optimizers ----------------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(weights: np.ndarray, grad: np.ndarray, state: OptimizerState):
    """One bias-corrected Adam update; returns new weights and updates ``state`` in place."""
    if weights.shape != grad.shape or state.m.shape != weights.shape:
        raise ValueError("weights, gradient and moments must share a shape")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at index {int(bad[0])}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return weights - state.lr * mhat / (np.sqrt(vhat) + state.eps), state


def ema_update(target: NetworkParams, source: NetworkParams, decay: float) -> NetworkParams:
    if not 0 <= decay < 1:
        raise ValueError("decay must lie in [0, 1)")
    if target.topology != source.topology or target.cond_dim != source.cond_dim:
        raise ValueError("topology mismatch")
    return target.copy(decay * target.weights + (1 - decay) * source.weights)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"NDGRAD1\n"


def save_checkpoint(path, params: NetworkParams, **meta) -> str:
    """Write magic, a JSON header line, then raw little-endian float64 weights.

    No timestamps are stored, so identical inputs give identical bytes.
    Returns the sha256 of the file contents.
    """
    header = {"topology": [list(t) for t in params.topology], "cond_dim": params.cond_dim,
              "n_weights": int(params.weights.size), "meta": meta}
    data = (MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n"
            + params.weights.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    nl = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):nl].decode())
    weights = np.frombuffer(data[nl + 1:], dtype="<f8").astype(np.float64)
    if weights.size != header["n_weights"]:
        raise ValueError(f"{path}: truncated weights")
    params = NetworkParams(tuple(tuple(t) for t in header["topology"]), header["cond_dim"], weights)
    return params, header["meta"]


# -- training loop ---------------------------------------------------------------

class DivergenceError(RuntimeError):
    pass


def cosine_lr(lr: float, step: int, steps: int, floor: float = 0.1) -> float:
    """Cosine decay from ``lr`` to ``floor * lr`` over ``steps``."""
    frac = step / max(steps - 1, 1)
    return lr * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))


def minimize(weights: np.ndarray, loss_fn: Callable, steps: int, rng, lr: float = 1e-3,
             divergence_threshold: float = 1e3, patience: int = 100, callback=None, anneal: bool = False):
    """Adam on ``loss_fn(tape_leaf, rng) -> (scalar Var, metrics dict)``.

    ``anneal`` switches the step size to :func:`cosine_lr`.

    Returns the final weights and a list of per-step metric rows (each row
    carries ``step``, ``loss`` and ``wall_ms``).  Aborts with
    :class:`DivergenceError` once the loss stays above the threshold for
    ``patience`` consecutive steps.
    """
    import time

    state = OptimizerState.for_params(weights.size, lr=lr)
    w = np.array(weights, dtype=np.float64)
    log, bad = [], 0
    for step in range(steps):
        t0 = time.perf_counter()
        tape = Tape()
        leaf = tape.variable(w)
        root, metrics = loss_fn(leaf, rng)
        loss = float(root.value)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}: {metrics}")
        bad = bad + 1 if loss > divergence_threshold else 0
        if bad >= patience:
            raise DivergenceError(f"loss above {divergence_threshold} for {patience} steps (step {step})")
        grad = tape.gradient(root, leaf)
        if anneal:
            state.lr = cosine_lr(lr, step, steps)
        w, state = adam_step(w, grad, state)
        row = {"step": step, "loss": loss, **metrics, "wall_ms": (time.perf_counter() - t0) * 1e3}
        log.append(row)
        if callback is not None:
            callback(step, w, row)
    return w, log


def fit_regressor(X, Y, hidden=(64, 64), act="mish", steps=2000, lr=1e-3, batch_size=256, rng=None,
                  holdout: float = 0.1):
    """Least-squares MLP fit of ``Y`` on ``X``.

    Returns ``(params, history, heldout_mse)``; the held-out MSE is measured
    in the units of ``Y`` on a seeded random split.
    """
    rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
    perm = rng.permutation(len(X))
    n_hold = int(round(holdout * len(X))) if len(X) >= 10 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    params = init_mlp(X.shape[1], hidden, Y.shape[1], 0, act, rng)

    def loss_fn(w, rng):
        idx = train[rng.integers(0, len(train), size=min(batch_size, len(train)))]
        pred = mlp_forward(params, X[idx], None, w)
        return mean(sq_dist(pred, Y[idx])), {}

    w, history = minimize(params.weights, loss_fn, steps, rng, lr=lr)
    params = params.copy(w)
    mse = float(np.mean((mlp_forward(params, X[hold]) - Y[hold]) ** 2)) if n_hold else float("nan")
    return params, history, mse
