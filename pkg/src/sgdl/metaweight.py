"""Loss-to-weight network and the one-step-lookahead meta update of its parameters."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, NumericError
from .recmodel import (BatchGrad, ModelParams, SampleBatch, apply_grads, batch_grads, sigmoid,
                       sparse_dot)


@dataclass
class WeightNet:
    """g(loss) = sigmoid(w2 . relu(w1 * loss + b1) + b2)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0

    @classmethod
    def init(cls, d_w=64, rng=None):
        rng = np.random.default_rng(rng)
        return cls(w1=rng.uniform(-1.0, 1.0, d_w), b1=rng.uniform(0.0, 0.1, d_w),
                   w2=rng.uniform(-0.1, 0.1, d_w) / np.sqrt(d_w), b2=0.0)

    @classmethod
    def zeros(cls, d_w=64):
        return cls(np.zeros(d_w), np.zeros(d_w), np.zeros(d_w), 0.0)

    @property
    def size(self):
        return 3 * len(self.w1) + 1

    def flat(self):
        return np.concatenate([self.w1, self.b1, self.w2, [self.b2]])

    @classmethod
    def from_flat(cls, x):
        n = (len(x) - 1) // 3
        return cls(x[:n].copy(), x[n:2 * n].copy(), x[2 * n:3 * n].copy(), float(x[-1]))

    def copy(self):
        return WeightNet.from_flat(self.flat())

    def weights(self, losses):
        losses = np.asarray(losses, dtype=np.float64)
        pre = losses[:, None] * self.w1 + self.b1
        return sigmoid(np.maximum(pre, 0.0) @ self.w2 + self.b2)

    def vjp(self, losses, coef):
        """Flat gradient of ``sum_k coef[k] * g(losses[k])`` w.r.t. the parameters."""
        losses = np.asarray(losses, dtype=np.float64)
        pre = losses[:, None] * self.w1 + self.b1
        hid = np.maximum(pre, 0.0)
        g = sigmoid(hid @ self.w2 + self.b2)
        dz = np.asarray(coef) * g * (1.0 - g)
        dh = dz[:, None] * self.w2 * (pre > 0)
        return np.concatenate([dh.T @ losses, dh.sum(axis=0), hid.T @ dz, [dz.sum()]])


def weight_of(psi: WeightNet, loss: float) -> float:
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return float(psi.weights([loss])[0])


def step_fingerprint(theta: ModelParams, batch: SampleBatch, psi: WeightNet, eta1: float) -> str:
    """Digest of everything the assumed update reads: touched rows of theta, the batch, psi, eta1."""
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(theta.U[batch.users]).tobytes())
    h.update(np.ascontiguousarray(theta.V[batch.items]).tobytes())
    if batch.negs is not None:
        h.update(np.ascontiguousarray(theta.V[batch.negs]).tobytes())
        h.update(np.ascontiguousarray(batch.negs).tobytes())
    if batch.labels is not None:
        h.update(np.ascontiguousarray(batch.labels).tobytes())
    h.update(np.float64(theta.global_bias).tobytes())
    h.update(np.ascontiguousarray(batch.users).tobytes())
    h.update(np.ascontiguousarray(batch.items).tobytes())
    h.update(psi.flat().tobytes())
    h.update(np.float64(eta1).tobytes())
    return h.hexdigest()


@dataclass
class Lookahead:
    """Result of the assumed update: theta_hat plus what produced it."""

    theta_hat: ModelParams
    losses: np.ndarray
    grads: BatchGrad
    weights: np.ndarray
    fingerprint: str


def assumed_update(theta: ModelParams, batch: SampleBatch, psi: WeightNet, eta1: float,
                   losses=None, grads=None) -> Lookahead:
    """theta_hat = theta - eta1/|B| sum_k g(L_k(theta)) grad L_k(theta); theta is left untouched."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if grads is None:
        losses, grads = batch_grads(theta, batch)
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite loss", sample_id=int(batch.ids[np.flatnonzero(~np.isfinite(losses))[0]]))
    w = psi.weights(losses)
    theta_hat = apply_grads(theta.copy(), grads, eta1 / len(batch) * w)
    return Lookahead(theta_hat, losses, grads, w, step_fingerprint(theta, batch, psi, eta1))


@dataclass
class MetaStepReport:
    loss_before: float
    loss_after: float
    mean_weight: float
    mean_weight_clean: Optional[float]
    mean_weight_noisy: Optional[float]
    psi_grad_norm: float


def meta_gradient(look: Lookahead, mem_batch: SampleBatch, mem_y, psi: WeightNet, eta1: float):
    """Gradient w.r.t. psi of ``sum_m y_m L_m(theta_hat(psi))`` via the explicit chain rule.

    Returns (flat gradient, per-sample guidance ``sum_m y_m G_mk``, memorized losses at theta_hat).
    """
    mem_losses_hat, mem_grads_hat = batch_grads(look.theta_hat, mem_batch)
    G = sparse_dot(mem_grads_hat, look.grads)
    guidance = np.asarray(mem_y, dtype=np.float64) @ G
    grad = -(eta1 / len(look.losses)) * psi.vjp(look.losses, guidance)
    return grad, guidance, mem_losses_hat


def psi_meta_step(theta: ModelParams, look: Lookahead, batch: SampleBatch, mem_batch: SampleBatch, mem_y,
                  psi: WeightNet, eta1: float, eta2: float, flags=None):
    """One explicit meta step on psi: psi + eta1*eta2/|B| sum_k (sum_m y_m G_mk) grad_psi g(L_k(theta)).

    ``look`` must come from ``assumed_update(theta, batch, psi, eta1)``; a
    mismatch raises ContractError. Returns (new psi, MetaStepReport).
    """
    if step_fingerprint(theta, batch, psi, eta1) != look.fingerprint:
        raise ContractError("theta_hat was not produced from these (theta, batch, psi, eta1)")
    mem_y = np.asarray(mem_y, dtype=np.float64)
    if mem_y.shape != (len(mem_batch),) or np.any(mem_y < 0):
        raise ValueError("memorized weights must be non-negative, one per memorized sample")
    grad, _, mem_losses_hat = meta_gradient(look, mem_batch, mem_y, psi, eta1)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite meta-gradient")
    new_psi = WeightNet.from_flat(psi.flat() - eta2 * grad)
    w_new = new_psi.weights(look.losses)
    clean_w = noisy_w = None
    if flags is not None:
        flags = np.asarray(flags, dtype=bool)
        clean_w = float(w_new[~flags].mean()) if np.any(~flags) else None
        noisy_w = float(w_new[flags].mean()) if np.any(flags) else None
    report = MetaStepReport(
        loss_before=float(look.losses.mean()),
        loss_after=float(mem_y @ mem_losses_hat),
        mean_weight=float(w_new.mean()),
        mean_weight_clean=clean_w,
        mean_weight_noisy=noisy_w,
        psi_grad_norm=float(np.linalg.norm(grad)),
    )
    return new_psi, report


def actual_update(theta: ModelParams, batch: SampleBatch, psi_new: WeightNet, eta1: float,
                  losses=None, grads=None):
    """In-place committed step with weights g(L_k(theta); psi_new); returns (theta, weights)."""
    if grads is None:
        losses, grads = batch_grads(theta, batch)
    w = psi_new.weights(losses)
    apply_grads(theta, grads, eta1 / len(batch) * w)
    return theta, w
