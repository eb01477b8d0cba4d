"""Matrix-factorization scorer, BCE/BPR per-sample losses and sparse gradients.

Parameters are stored packed: every user row is ``[embedding (d), bias]`` and
likewise for items, so a sample's gradient is a handful of ``d + 1`` rows plus
a global-bias scalar. Row keys are ``u`` for users and ``num_users + i`` for
items.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import NumericError, SamplingError

POINTWISE = "pointwise"
PAIRWISE = "pairwise"

USER_EMB, ITEM_EMB, USER_BIAS, ITEM_BIAS, GLOBAL_BIAS = range(5)

CHECKPOINT_MAGIC = b"SGDL"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class ModelParams:
    U: np.ndarray  # (num_users, d + 1)
    V: np.ndarray  # (num_items, d + 1)
    global_bias: float = 0.0
    version: int = field(default=0, compare=False)

    @property
    def d(self):
        return self.U.shape[1] - 1

    @property
    def num_users(self):
        return self.U.shape[0]

    @property
    def num_items(self):
        return self.V.shape[0]

    @property
    def user_emb(self):
        return self.U[:, :-1]

    @property
    def item_emb(self):
        return self.V[:, :-1]

    @property
    def user_bias(self):
        return self.U[:, -1]

    @property
    def item_bias(self):
        return self.V[:, -1]

    def copy(self):
        return ModelParams(self.U.copy(), self.V.copy(), float(self.global_bias), self.version)

    def flat(self):
        return np.concatenate([self.U.ravel(), self.V.ravel(), [self.global_bias]])

    def set_flat(self, x):
        nu, nv = self.U.size, self.V.size
        self.U[...] = x[:nu].reshape(self.U.shape)
        self.V[...] = x[nu:nu + nv].reshape(self.V.shape)
        self.global_bias = float(x[-1])
        self.version += 1

    def is_finite(self):
        return bool(np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.V)) and np.isfinite(self.global_bias))


def init_params(num_users, num_items, d=32, rng=None):
    """Uniform(-0.5/sqrt(d), 0.5/sqrt(d)) embeddings, zero biases."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(rng)
    a = 0.5 / np.sqrt(d)
    U = np.zeros((num_users, d + 1))
    V = np.zeros((num_items, d + 1))
    U[:, :d] = rng.uniform(-a, a, (num_users, d))
    V[:, :d] = rng.uniform(-a, a, (num_items, d))
    return ModelParams(U, V, 0.0)


@dataclass(frozen=True)
class TrainSample:
    kind: str
    user: int
    item: int
    label: int = 1
    neg: int = -1
    id: int = 0


@dataclass
class SampleBatch:
    """A homogeneous batch of training samples.

    ``items`` holds the positive item for pairwise samples; ``negs`` is only
    meaningful for pairwise, ``labels`` only for pointwise. ``ids`` index the
    samples in the epoch's training set and ``pos_ids`` the train positive each
    sample was derived from (-1 for sampled pointwise negatives).
    """

    kind: str
    users: np.ndarray
    items: np.ndarray
    labels: Optional[np.ndarray] = None
    negs: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    pos_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.users)
        if self.ids is None:
            self.ids = np.arange(n)
        if self.pos_ids is None:
            self.pos_ids = np.asarray(self.ids).copy()
        if self.kind == POINTWISE:
            if self.labels is None:
                self.labels = np.ones(n, dtype=np.int64)
            if np.any((self.labels != 0) & (self.labels != 1)):
                raise ValueError("pointwise labels must be 0 or 1")
        elif self.kind == PAIRWISE:
            if self.negs is None:
                raise ValueError("pairwise batch needs negs")
            if np.any(self.negs == self.items):
                k = int(np.flatnonzero(self.negs == self.items)[0])
                raise ValueError(f"pairwise sample {int(self.ids[k])} has pos == neg item")
        else:
            raise ValueError(f"unknown sample kind {self.kind!r}")

    def __len__(self):
        return len(self.users)

    def __getitem__(self, k):
        if self.kind == POINTWISE:
            return TrainSample(POINTWISE, int(self.users[k]), int(self.items[k]), int(self.labels[k]),
                               id=int(self.ids[k]))
        return TrainSample(PAIRWISE, int(self.users[k]), int(self.items[k]), 1, int(self.negs[k]),
                           id=int(self.ids[k]))

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return SampleBatch(self.kind, self.users[idx], self.items[idx], pick(self.labels),
                           pick(self.negs), self.ids[idx], self.pos_ids[idx])

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            raise ValueError("empty sample list")
        kinds = {s.kind for s in samples}
        if len(kinds) != 1:
            raise ValueError("mixed pointwise/pairwise samples")
        kind = kinds.pop()
        arr = lambda name: np.array([getattr(s, name) for s in samples], dtype=np.int64)  # noqa: E731
        if kind == POINTWISE:
            return cls(kind, arr("user"), arr("item"), labels=arr("label"), ids=arr("id"))
        return cls(kind, arr("user"), arr("item"), negs=arr("neg"), ids=arr("id"))


@dataclass
class BatchGrad:
    """Per-sample sparse gradients for a batch: ``rows[b, r]`` is the gradient
    w.r.t. packed row ``keys[b, r]`` and ``glob[b]`` w.r.t. the global bias."""

    keys: np.ndarray  # (B, R) int64
    rows: np.ndarray  # (B, R, d + 1)
    glob: np.ndarray  # (B,)

    def __len__(self):
        return len(self.glob)

    def __getitem__(self, b):
        return SparseGrad(self.keys[b], self.rows[b], float(self.glob[b]))

    def sq_norms(self):
        return np.einsum("brj,brj->b", self.rows, self.rows) + self.glob ** 2


@dataclass
class SparseGrad:
    keys: np.ndarray
    rows: np.ndarray
    glob: float

    def entries(self, num_users):
        """Map ``(block, row, column) -> value`` over touched coordinates."""
        out = {}
        d = self.rows.shape[1] - 1
        for key, row in zip(self.keys, self.rows):
            user = key < num_users
            idx = int(key if user else key - num_users)
            emb_block, bias_block = (USER_EMB, USER_BIAS) if user else (ITEM_EMB, ITEM_BIAS)
            for j in range(d):
                out[(emb_block, idx, j)] = out.get((emb_block, idx, j), 0.0) + float(row[j])
            out[(bias_block, idx, 0)] = out.get((bias_block, idx, 0), 0.0) + float(row[d])
        out[(GLOBAL_BIAS, 0, 0)] = self.glob
        return out

    def dense(self, params: ModelParams):
        """Gradient laid out like ``params.flat()``."""
        gU = np.zeros_like(params.U)
        gV = np.zeros_like(params.V)
        nu = params.num_users
        for key, row in zip(self.keys, self.rows):
            if key < nu:
                gU[key] += row
            else:
                gV[key - nu] += row
        return np.concatenate([gU.ravel(), gV.ravel(), [self.glob]])


def _check_index(params, users, items):
    users = np.asarray(users)
    items = np.asarray(items)
    if users.size and (users.min() < 0 or users.max() >= params.num_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= params.num_items):
        raise IndexError("item index out of range")


def scores(params: ModelParams, users, items):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    pu = params.U[users]
    qi = params.V[items]
    return np.einsum("bj,bj->b", pu[:, :-1], qi[:, :-1]) + pu[:, -1] + qi[:, -1] + params.global_bias


def score(params: ModelParams, u, i):
    _check_index(params, [u], [i])
    return float(scores(params, [u], [i])[0])


def score_matrix(params: ModelParams, users):
    """Scores of ``users`` against every item, shape (len(users), num_items)."""
    pu = params.U[np.asarray(users, dtype=np.int64)]
    return pu[:, :-1] @ params.item_emb.T + pu[:, -1:] + params.item_bias[None, :] + params.global_bias


def batch_losses(params: ModelParams, batch: SampleBatch):
    if batch.kind == POINTWISE:
        s = scores(params, batch.users, batch.items)
        return softplus(s) - batch.labels * s
    diff = scores(params, batch.users, batch.negs) - scores(params, batch.users, batch.items)
    return softplus(diff)


def batch_grads(params: ModelParams, batch: SampleBatch, check=True):
    """Return (losses, BatchGrad) evaluated at ``params``."""
    with np.errstate(invalid="ignore", over="ignore"):
        return _batch_grads(params, batch, check)


def _batch_grads(params, batch, check):
    nu = params.num_users
    pu = params.U[batch.users]
    qi = params.V[batch.items]
    P, Q = pu[:, :-1], qi[:, :-1]
    B = len(batch)
    ones = np.ones((B, 1))
    if batch.kind == POINTWISE:
        s = np.einsum("bj,bj->b", P, Q) + pu[:, -1] + qi[:, -1] + params.global_bias
        losses = softplus(s) - batch.labels * s
        c = sigmoid(s) - batch.labels
        keys = np.stack([batch.users, nu + batch.items], axis=1)
        rows = np.stack([c[:, None] * np.hstack([Q, ones]), c[:, None] * np.hstack([P, ones])], axis=1)
        glob = c.copy()
    else:
        qj = params.V[batch.negs]
        N = qj[:, :-1]
        s_pos = np.einsum("bj,bj->b", P, Q) + qi[:, -1]
        s_neg = np.einsum("bj,bj->b", P, N) + qj[:, -1]
        diff = s_neg - s_pos
        losses = softplus(diff)
        c = sigmoid(diff)
        zero = np.zeros((B, 1))
        keys = np.stack([batch.users, nu + batch.items, nu + batch.negs], axis=1)
        rows = np.stack([
            c[:, None] * np.hstack([N - Q, zero]),
            -c[:, None] * np.hstack([P, ones]),
            c[:, None] * np.hstack([P, ones]),
        ], axis=1)
        glob = np.zeros(B)
    grads = BatchGrad(keys.astype(np.int64), rows, glob)
    if check:
        bad = ~(np.isfinite(losses) & np.all(np.isfinite(rows), axis=(1, 2)))
        if np.any(bad):
            raise NumericError("non-finite loss or gradient", sample_id=int(batch.ids[np.flatnonzero(bad)[0]]))
    return losses, grads


def sample_loss(params: ModelParams, s: TrainSample) -> float:
    _check_index(params, [s.user], [s.item] + ([s.neg] if s.kind == PAIRWISE else []))
    return float(batch_losses(params, SampleBatch.from_samples([s]))[0])


def sample_grad(params: ModelParams, s: TrainSample) -> SparseGrad:
    _check_index(params, [s.user], [s.item] + ([s.neg] if s.kind == PAIRWISE else []))
    _, g = batch_grads(params, SampleBatch.from_samples([s]))
    return g[0]


def sparse_dot(a: BatchGrad, b: BatchGrad):
    """Matrix of inner products ``a[m] . b[k]`` over shared coordinates, shape (len(a), len(b))."""
    out = np.outer(a.glob, b.glob)
    for r in range(a.keys.shape[1]):
        for s in range(b.keys.shape[1]):
            match = a.keys[:, r][:, None] == b.keys[:, s][None, :]
            if match.any():
                out += match * (a.rows[:, r] @ b.rows[:, s].T)
    return out


def paired_dot(a: BatchGrad, b: BatchGrad):
    """Row-wise inner products ``a[m] . b[m]`` for two gradients of the same batch."""
    out = a.glob * b.glob
    for r in range(a.keys.shape[1]):
        for s in range(b.keys.shape[1]):
            match = a.keys[:, r] == b.keys[:, s]
            out = out + match * np.einsum("bj,bj->b", a.rows[:, r], b.rows[:, s])
    return out


def apply_grads(params: ModelParams, grads: BatchGrad, coef):
    """In-place ``params -= sum_b coef[b] * grad_b``."""
    coef = np.asarray(coef, dtype=np.float64)
    nu = params.num_users
    delta = coef[:, None, None] * grads.rows
    keys = grads.keys.ravel()
    flat = delta.reshape(-1, delta.shape[-1])
    is_user = keys < nu
    np.subtract.at(params.U, keys[is_user], flat[is_user])
    np.subtract.at(params.V, keys[~is_user] - nu, flat[~is_user])
    params.global_bias = float(params.global_bias - np.sum(coef * grads.glob))
    params.version += 1
    return params


def weighted_step(params: ModelParams, batch: SampleBatch, weights, eta1: float, grads=None):
    """``params -= eta1 / |batch| * sum_k w_k grad_k`` in place."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(batch),):
        raise ValueError(f"expected {len(batch)} weights, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise NumericError("non-finite weight", sample_id=int(batch.ids[np.flatnonzero(~np.isfinite(weights))[0]]))
    if grads is None:
        _, grads = batch_grads(params, batch)
    return apply_grads(params, grads, eta1 / len(batch) * weights)


def sgd_step(params: ModelParams, batch: SampleBatch, eta1: float, grads=None):
    """Plain unweighted mini-batch SGD step."""
    if grads is None:
        _, grads = batch_grads(params, batch)
    return apply_grads(params, grads, np.full(len(batch), eta1 / len(batch)))


def sample_negative(u, adjacency, rng):
    """One uniformly drawn item outside ``u``'s train positives."""
    if adjacency.degree(u) >= adjacency.num_items:
        raise SamplingError(f"user {u} has interacted with every item")
    while True:
        j = int(rng.integers(adjacency.num_items))
        if not adjacency.contains([u], [j])[0]:
            return j


def sample_negatives(users, adjacency, rng):
    """Vectorised :func:`sample_negative` (rejection sampling)."""
    users = np.asarray(users, dtype=np.int64)
    if users.size and np.any(adjacency.degree()[users] >= adjacency.num_items):
        raise SamplingError("a user has interacted with every item")
    out = rng.integers(adjacency.num_items, size=len(users))
    bad = adjacency.contains(users, out)
    while bad.any():
        idx = np.flatnonzero(bad)
        out[idx] = rng.integers(adjacency.num_items, size=len(idx))
        bad[idx] = adjacency.contains(users[idx], out[idx])
    return out


def save_checkpoint(params: ModelParams, path):
    """Little-endian binary: magic, u32 version, u64 users/items/d, then f64 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = params.d
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQQQ", CHECKPOINT_VERSION, params.num_users, params.num_items, d))
        for arr in (params.user_emb, params.item_emb, params.user_bias, params.item_bias,
                    np.array([params.global_bias])):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SGDL checkpoint")
    version, nu, ni, d = struct.unpack_from("<IQQQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQQQ")
    expected = off + 8 * (nu * d + ni * d + nu + ni + 1)
    if len(data) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(data)} of {expected} bytes)")
    vals = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    p = 0

    def take(n):
        nonlocal p
        out = vals[p:p + n]
        p += n
        return out

    U = np.empty((nu, d + 1))
    V = np.empty((ni, d + 1))
    U[:, :d] = take(nu * d).reshape(nu, d)
    V[:, :d] = take(ni * d).reshape(ni, d)
    U[:, d] = take(nu)
    V[:, d] = take(ni)
    return ModelParams(U, V, float(take(1)[0]))
