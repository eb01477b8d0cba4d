"""Adaptive selection of memorized samples.

Each memorized sample is described by its loss at the current parameters and
the cosine between its gradients at the lookahead and current parameters. A
small network maps these to logits, a softmax turns them into sampling
probabilities and a Gumbel-softmax relaxation produces differentiable weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericError
from .recmodel import ModelParams, SampleBatch, batch_grads, paired_dot, sigmoid

LSTM, MLP, TOPF = "lstm", "mlp", "topF"
VARIANTS = (LSTM, MLP, TOPF)
PI_FLOOR = 1e-12


@dataclass
class SchedFeatures:
    loss: np.ndarray
    grad_cos: np.ndarray

    def __len__(self):
        return len(self.loss)

    def matrix(self):
        return np.stack([self.loss, self.grad_cos], axis=1)


def cosine_rows(a, b):
    """Cosine between paired sparse gradients; 0 when either is the zero vector."""
    dot = paired_dot(a, b)
    na = np.sqrt(a.sq_norms())
    nb = np.sqrt(b.sq_norms())
    denom = na * nb
    out = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
    return np.clip(out, -1.0, 1.0)


def compute_features(mem_batch: SampleBatch, theta: ModelParams, theta_hat: ModelParams):
    """Features plus the gradients at theta (returned for reuse)."""
    losses, g = batch_grads(theta, mem_batch)
    _, g_hat = batch_grads(theta_hat, mem_batch)
    return SchedFeatures(losses, cosine_rows(g_hat, g)), g


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class GumbelDraw:
    y: np.ndarray
    tau: float
    noise: np.ndarray
    pi: np.ndarray


def gumbel_noise(n, rng):
    u = rng.random(n)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return -np.log(-np.log(u))


def gumbel_weights(pi, tau, rng=None, noise=None) -> GumbelDraw:
    """y = softmax((log pi + eps) / tau) with standard Gumbel noise eps."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pi = np.asarray(pi, dtype=np.float64)
    if noise is None:
        noise = gumbel_noise(len(pi), np.random.default_rng(rng))
    z = (np.log(np.maximum(pi, PI_FLOOR)) + noise) / tau
    return GumbelDraw(softmax(z), float(tau), noise, pi)


def _minmax(x):
    span = x.max() - x.min()
    return (x - x.min()) / span if span > 0 else np.zeros_like(x)


def topF_select(feats: SchedFeatures, ids=None):
    """Uniform weight on the ceil(n/2) samples with the largest normalised loss + cosine sum.

    Ties go to the smaller sample id.
    """
    n = len(feats)
    if n == 1:
        return np.ones(1)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    total = _minmax(np.asarray(feats.loss, float)) + _minmax(np.asarray(feats.grad_cos, float))
    order = np.lexsort((ids, -total))
    F = math.ceil(n / 2)
    y = np.zeros(n)
    y[order[:F]] = 1.0 / F
    return y


class _Net:
    """Flat parameter vector with named views."""

    shapes: dict

    def _views(self, phi=None):
        phi = self.phi if phi is None else phi
        out, p = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape)) if shape else 1
            out[name] = phi[p:p + n].reshape(shape) if shape else phi[p:p + 1]
            p += n
        return out

    @property
    def size(self):
        return len(self.phi)


class LSTMNet(_Net):
    """One LSTM cell (input 2, hidden d_l, single bias per gate) and a linear readout."""

    def __init__(self, d_l=64, rng=None, d_in=2):
        self.d_l, self.d_in = d_l, d_in
        self.shapes = {"W": (d_in + d_l, 4 * d_l), "b": (4 * d_l,), "w_out": (d_l,), "b_out": ()}
        rng = np.random.default_rng(rng)
        self.phi = np.zeros(sum(int(np.prod(s)) if s else 1 for s in self.shapes.values()))
        v = self._views()
        a = 1.0 / math.sqrt(d_l)
        v["W"][...] = rng.uniform(-a, a, v["W"].shape)
        v["w_out"][...] = rng.uniform(-a, a, d_l)

    def cell_param_count(self):
        return 4 * self.d_l * (self.d_in + self.d_l) + 4 * self.d_l

    def run(self, phi, x, h, c):
        v = self._views(phi)
        d = self.d_l
        hx = np.hstack([x, h])
        a = hx @ v["W"] + v["b"]
        i, f, o = sigmoid(a[:, :d]), sigmoid(a[:, d:2 * d]), sigmoid(a[:, 3 * d:])
        gg = np.tanh(a[:, 2 * d:3 * d])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        h_new = o * tc
        out = h_new @ v["w_out"] + v["b_out"][0]
        cache = (hx, i, f, gg, o, c, tc, h_new, v)
        return out, (h_new, c_new), cache

    def backward(self, cache, dout):
        hx, i, f, gg, o, c, tc, h_new, v = cache
        d = self.d_l
        grads = {"w_out": h_new.T @ dout, "b_out": np.array([dout.sum()])}
        dh = dout[:, None] * v["w_out"]
        do = dh * tc
        dc = dh * o * (1.0 - tc ** 2)
        di, df, dg = dc * gg, dc * c, dc * i
        da = np.hstack([di * i * (1 - i), df * f * (1 - f), dg * (1 - gg ** 2), do * o * (1 - o)])
        grads["W"] = hx.T @ da
        grads["b"] = da.sum(axis=0)
        return np.concatenate([grads[k].ravel() for k in self.shapes])


class MLPNet(_Net):
    """One tanh hidden layer of width d_l and a scalar output."""

    def __init__(self, d_l=64, rng=None, d_in=2):
        self.d_l, self.d_in = d_l, d_in
        self.shapes = {"W1": (d_in, d_l), "b1": (d_l,), "w2": (d_l,), "b2": ()}
        rng = np.random.default_rng(rng)
        self.phi = np.zeros(sum(int(np.prod(s)) if s else 1 for s in self.shapes.values()))
        v = self._views()
        v["W1"][...] = rng.uniform(-1.0, 1.0, v["W1"].shape)
        v["w2"][...] = rng.uniform(-1.0, 1.0, d_l) / math.sqrt(d_l)

    def run(self, phi, x, h=None, c=None):
        v = self._views(phi)
        hid = np.tanh(x @ v["W1"] + v["b1"])
        return hid @ v["w2"] + v["b2"][0], None, (x, hid, v)

    def backward(self, cache, dout):
        x, hid, v = cache
        dpre = dout[:, None] * v["w2"] * (1.0 - hid ** 2)
        return np.concatenate([(x.T @ dpre).ravel(), dpre.sum(axis=0), hid.T @ dout, [dout.sum()]])


@dataclass
class _StepCache:
    ids: np.ndarray
    x: np.ndarray
    h_prev: Optional[np.ndarray]
    c_prev: Optional[np.ndarray]


@dataclass
class SchedulerState:
    """Scheduler parameters plus recurrent state for every memorized sample (LSTM only)."""

    variant: str
    net: Optional[_Net] = None
    H: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    last: Optional[_StepCache] = field(default=None, repr=False)

    @classmethod
    def create(cls, variant=LSTM, num_memorized=0, d_l=64, rng=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown scheduler variant {variant!r}; expected one of {VARIANTS}")
        if variant == LSTM:
            return cls(variant, LSTMNet(d_l, rng), np.zeros((num_memorized, d_l)), np.zeros((num_memorized, d_l)))
        if variant == MLP:
            return cls(variant, MLPNet(d_l, rng))
        return cls(variant)

    @property
    def phi(self):
        return None if self.net is None else self.net.phi


def forward(state: SchedulerState, feats: SchedFeatures, ids=None):
    """Logits and sampling probabilities for a memorized mini-batch.

    For the LSTM variant the recurrent state of each listed sample advances by
    one step. The top-F variant has no logits; it returns its selection
    weights as both outputs.
    """
    n = len(feats)
    if n == 0:
        raise ValueError("empty memorized batch")
    ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
    if state.variant == TOPF:
        y = topF_select(feats, ids)
        return y, y
    x = feats.matrix()
    if state.variant == LSTM:
        h_prev, c_prev = state.H[ids].copy(), state.C[ids].copy()
        o, (h_new, c_new), _ = state.net.run(state.net.phi, x, h_prev, c_prev)
        state.H[ids], state.C[ids] = h_new, c_new
    else:
        h_prev = c_prev = None
        o, _, _ = state.net.run(state.net.phi, x)
    state.last = _StepCache(ids, x, h_prev, c_prev)
    return o, softmax(o)


def phi_objective(state: SchedulerState, phi, draw: GumbelDraw, mem_losses):
    """``sum_m y_m(phi) * loss_m`` for the cached step, with the Gumbel noise held fixed."""
    c = state.last
    o, _, _ = state.net.run(phi, c.x, c.h_prev, c.c_prev)
    pi = softmax(o)
    y = gumbel_weights(pi, draw.tau, noise=draw.noise).y
    return float(y @ np.asarray(mem_losses, dtype=np.float64))


def phi_gradient(state: SchedulerState, draw: GumbelDraw, mem_losses):
    """Analytic gradient of :func:`phi_objective` at the current phi."""
    c = state.last
    loss = np.asarray(mem_losses, dtype=np.float64)
    o, _, cache = state.net.run(state.net.phi, c.x, c.h_prev, c.c_prev)
    pi = softmax(o)
    logpi = np.log(np.maximum(pi, PI_FLOOR))
    y = softmax((logpi + draw.noise) / draw.tau)
    dz = y * (loss - y @ loss)
    dlogpi = dz / draw.tau * (pi > PI_FLOOR)
    do = dlogpi - pi * dlogpi.sum()
    return state.net.backward(cache, do)


def update_phi(state: SchedulerState, feats: SchedFeatures, draw: GumbelDraw, mem_losses, eta2):
    """Gradient step on phi for the y-weighted memorized loss after the actual update.

    ``feats`` must be the features passed to the preceding :func:`forward`.
    Returns the gradient norm (0 for top-F, which has no parameters).
    """
    if state.variant == TOPF:
        return 0.0
    if state.last is None or not np.array_equal(state.last.x, feats.matrix()):
        raise ValueError("update_phi must follow forward() on the same features")
    if not np.all(np.isfinite(mem_losses)):
        raise NumericError("non-finite memorized loss")
    grad = phi_gradient(state, draw, mem_losses)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite scheduler gradient")
    state.net.phi -= eta2 * grad
    return float(np.linalg.norm(grad))


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())
