"""Memorization tracking, GMM noise-rate estimation and the phase transition rule."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import TRAIN, InteractionTable
from .errors import DegenerateFitError, UnsupportedModeError
from .recmodel import ModelParams, score_matrix

VAR_FLOOR = 1e-6


def mem_score(history, h=None) -> float:
    """Mean of the most recent ``h`` memorization bits (all bits if ``h`` is None); 0 for no history."""
    hist = list(history)
    if h is not None:
        hist = hist[-h:]
    if not hist:
        return 0.0
    return sum(1 for b in hist if b) / len(hist)


class MemTracker:
    """Ring buffer of the last ``h`` memorization bits for each train positive."""

    def __init__(self, num_positives, h=5):
        if h < 1:
            raise ValueError("h must be >= 1")
        self.h = int(h)
        self.bits = np.zeros((num_positives, self.h), dtype=np.uint8)
        self.filled = 0
        self.ptr = 0
        self.t = 0
        self.scores = np.zeros(num_positives)

    def __len__(self):
        return self.bits.shape[0]

    def push(self, bits):
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (len(self),):
            raise ValueError(f"expected {len(self)} bits, got {bits.shape}")
        self.bits[:, self.ptr] = bits
        self.ptr = (self.ptr + 1) % self.h
        self.filled = min(self.filled + 1, self.h)
        self.t += 1
        self.scores = self.bits.sum(axis=1) / self.filled
        return self

    def history(self, k):
        """Stored bits of positive ``k``, oldest first."""
        if self.filled < self.h:
            return self.bits[k, :self.filled].tolist()
        return np.roll(self.bits[k], -self.ptr).tolist()

    @property
    def memorized_mask(self):
        return self.scores > 0.5

    @property
    def memorized(self):
        """Indices (into the table's train positives) currently memorized."""
        return np.flatnonzero(self.memorized_mask)

    @property
    def mem_count(self):
        return int(np.count_nonzero(self.memorized_mask))


def memorization_bits(params: ModelParams, users, items, chunk=512):
    """1 where item ``i`` sits in the top-N_u of user ``u``'s full ranking.

    N_u is the number of listed (user, item) pairs of that user. Ranking covers
    every item; ties go to the lower item index.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n_u = np.bincount(users, minlength=params.num_users)
    out = np.zeros(len(users), dtype=np.uint8)
    active = np.flatnonzero(n_u)
    order_pos = np.argsort(users, kind="stable")
    starts = np.concatenate([[0], np.cumsum(n_u)])
    ar = np.arange(params.num_items)
    for c in range(0, len(active), chunk):
        blk = active[c:c + chunk]
        S = score_matrix(params, blk)
        order = np.argsort(-S, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.broadcast_to(ar, order.shape), axis=1)
        for r, u in enumerate(blk):
            idx = order_pos[starts[u]:starts[u + 1]]
            out[idx] = rank[r, items[idx]] < n_u[u]
    return out


def epoch_memorization_pass(params: ModelParams, table: InteractionTable, tracker: MemTracker):
    """Push one epoch of memorization bits for the table's train positives."""
    idx = table.split_indices(TRAIN)
    tracker.push(memorization_bits(params, table.users[idx], table.items[idx]))
    return tracker


@dataclass
class GmmFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihood: list = field(default_factory=list)
    converged: bool = False

    @property
    def high(self):
        """Index of the larger-mean component."""
        return int(np.argmax(self.means))

    def log_joint(self, x):
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (np.log(self.weights) - 0.5 * np.log(2 * math.pi * self.variances)
                - (x - self.means) ** 2 / (2 * self.variances))

    def posterior(self, x):
        lj = self.log_joint(x)
        return np.exp(lj - np.logaddexp(lj[:, 0], lj[:, 1])[:, None])


def fit_gmm(losses, max_iters=200, tol=1e-8) -> GmmFit:
    """Two-component 1-D Gaussian mixture fitted by EM.

    Starts from means at the 25% / 75% quantiles (min / max if those coincide),
    both variances equal to the sample variance and equal weights. Stops when
    the log-likelihood gains less than ``tol``.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if x.size < 10:
        raise ValueError(f"need at least 10 samples, got {x.size}")
    var0 = x.var()
    if not var0 > 1e-24 * max(1.0, float(np.mean(x)) ** 2):  # zero up to roundoff
        raise DegenerateFitError("all losses are identical")
    lo, hi = np.quantile(x, [0.25, 0.75])
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        lo, hi = x.min(), x.max()
    fit = GmmFit(np.array([lo, hi]), np.full(2, max(var0, VAR_FLOOR)), np.array([0.5, 0.5]))
    prev = -np.inf
    for _ in range(max_iters):
        lj = fit.log_joint(x)
        norm = np.logaddexp(lj[:, 0], lj[:, 1])
        ll = float(norm.sum())
        fit.log_likelihood.append(ll)
        if ll - prev < tol:
            fit.converged = True
            break
        prev = ll
        resp = np.exp(lj - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            raise DegenerateFitError("a mixture component collapsed to zero mass")
        means = resp.T @ x / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, VAR_FLOOR)
        fit = GmmFit(means, variances, nk / x.size, fit.log_likelihood)
    return fit


def normalize_losses(losses):
    x = np.asarray(losses, dtype=np.float64).ravel()
    span = x.max() - x.min() if x.size else 0.0
    if span <= 0:
        return np.zeros_like(x)
    return (x - x.min()) / span


def estimate_noise_rate(losses, max_iters=200, tol=1e-8) -> float:
    """Mean posterior of the larger-mean GMM component over min-max normalised losses."""
    x = normalize_losses(losses)
    try:
        fit = fit_gmm(x, max_iters=max_iters, tol=tol)
    except DegenerateFitError as exc:
        warnings.warn(f"noise-rate estimate defaulted to 0: {exc}", RuntimeWarning, stacklevel=2)
        return 0.0
    sigma = float(np.mean(fit.posterior(x)[:, fit.high]))
    return min(max(sigma, 0.0), 1.0)


def should_transition(mem_count, sigma_hat, total) -> bool:
    """True once the memorized set reaches the estimated clean size ``(1 - sigma_hat) * total``."""
    if mem_count < 0 or sigma_hat < 0 or total < 0:
        raise ValueError("arguments must be non-negative")
    return mem_count >= (1.0 - sigma_hat) * total


@dataclass(frozen=True)
class MpMrReport:
    MP: float
    MR: float
    n_memorized: int
    n_correct: int
    n_clean: int


def mp_mr(memorized, table: InteractionTable) -> MpMrReport:
    """Memorization precision / recall; ``memorized`` indexes the table's train positives."""
    if not table.has_flags:
        raise UnsupportedModeError("MP/MR need ground-truth noise flags")
    clean = ~table.noise[table.split_indices(TRAIN)]
    mem = np.unique(np.asarray(list(memorized), dtype=np.int64))
    n_correct = int(np.count_nonzero(clean[mem])) if mem.size else 0
    n_clean = int(np.count_nonzero(clean))
    mp = n_correct / mem.size if mem.size else 0.0
    mr = n_correct / n_clean if n_clean else 0.0
    return MpMrReport(mp, mr, int(mem.size), n_correct, n_clean)
