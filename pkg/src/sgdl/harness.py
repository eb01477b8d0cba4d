"""Experiment orchestration: data loading, Phase I, transition, Phase II, evaluation.

Every random stream is derived from ``config.seed`` with
``np.random.SeedSequence(seed).spawn(len(STREAMS))``; stream ``k`` feeds the
consumer ``STREAMS[k]``. Adding a stream appends to the list so existing
streams keep their values.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalkit, memorization as mem, metaweight as mw, scheduler as sch
from .config import RunConfig
from .dataset import (TRAIN, VAL, InteractionTable, inject_noise, label_noise_by_rating, load_table,
                      parse_interactions, split_dataset, synthesize_ratings)
from .errors import NumericError, StageError
from .recmodel import (PAIRWISE, POINTWISE, ModelParams, SampleBatch, batch_grads, batch_losses,
                       init_params, sample_negatives, save_checkpoint, sgd_step)

log = logging.getLogger("sgdl")

STREAMS = ("synth", "split", "noise", "init", "shuffle", "negatives", "psi", "phi", "membatch", "gumbel",
           "estimate")

MEM_COLUMNS = ["epoch", "mem_count", "sigma_hat", "transition", "MP", "MR", "mem_rate_clean", "mem_rate_noisy"]
META_COLUMNS = ["iteration", "epoch", "mean_weight", "mean_weight_clean", "mean_weight_noisy", "psi_grad_norm"]
SCHED_COLUMNS = ["iteration", "variant", "pi_entropy", "max_y", "selected_clean_fraction"]


def rng_streams(seed):
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def prepare_table(config: RunConfig, rngs=None) -> InteractionTable:
    """Load or synthesise the dataset and return a split table with noise flags."""
    rngs = rngs or rng_streams(config.seed)
    seed_of = lambda name: int(rngs[name].integers(2**63 - 1))  # noqa: E731
    if config.format == "canonical":
        return load_table(config.dataset)
    if config.format == "ratings":
        ratings = parse_interactions(config.dataset, config.delim)
    else:
        ratings = synthesize_ratings(config.synth_users, config.synth_items, config.synth_interactions,
                                     config.synth_rank, config.synth_strength, seed=seed_of("synth"))
    table = label_noise_by_rating(ratings, config.rating_threshold)
    if config.noise_mode == "inject":
        table.noise = np.zeros(len(table), dtype=bool)
    table = split_dataset(table, seed=seed_of("split"))
    if config.noise_mode == "inject" and config.sigma > 0:
        table = inject_noise(table, config.sigma, seed=seed_of("noise"))
    return table


@dataclass
class TrainData:
    """Train positives of a table in a fixed order; memorization ids index into it."""

    table: InteractionTable
    users: np.ndarray
    items: np.ndarray
    flags: Optional[np.ndarray]
    adjacency: object

    @classmethod
    def from_table(cls, table):
        idx = table.split_indices(TRAIN)
        flags = table.noise[idx] if table.has_flags else None
        return cls(table, table.users[idx], table.items[idx], flags, table.adjacency(TRAIN))

    def __len__(self):
        return len(self.users)

    def sample_flags(self, batch: SampleBatch):
        if self.flags is None:
            return None
        out = np.zeros(len(batch), dtype=bool)
        has = batch.pos_ids >= 0
        out[has] = self.flags[batch.pos_ids[has]]
        return out

    def positives_batch(self, ids, loss, rng_neg):
        """Training samples for the given positive ids (BPR: fresh negatives)."""
        ids = np.asarray(ids, dtype=np.int64)
        u, i = self.users[ids], self.items[ids]
        if loss == "bpr":
            return SampleBatch(PAIRWISE, u, i, negs=sample_negatives(u, self.adjacency, rng_neg), ids=ids, pos_ids=ids)
        return SampleBatch(POINTWISE, u, i, labels=np.ones(len(ids), dtype=np.int64), ids=ids, pos_ids=ids)

    def epoch_samples(self, loss, rng_shuffle, rng_neg, ids=None):
        """One epoch of shuffled samples: a triple per positive (BPR) or a positive
        plus a sampled negative (BCE)."""
        ids = np.arange(len(self)) if ids is None else np.asarray(ids, dtype=np.int64)
        u, i = self.users[ids], self.items[ids]
        negs = sample_negatives(u, self.adjacency, rng_neg)
        if loss == "bpr":
            batch = SampleBatch(PAIRWISE, u, i, negs=negs, ids=np.arange(len(ids)), pos_ids=ids)
        else:
            n = len(ids)
            batch = SampleBatch(POINTWISE, np.concatenate([u, u]), np.concatenate([i, negs]),
                                labels=np.concatenate([np.ones(n, np.int64), np.zeros(n, np.int64)]),
                                ids=np.arange(2 * n), pos_ids=np.concatenate([ids, np.full(n, -1)]))
        return batch.subset(rng_shuffle.permutation(len(batch)))


def positive_losses(params, data: TrainData, loss, rng, n_neg=1):
    """Loss of every train positive at ``params``.

    For BPR the loss of a positive is averaged over ``n_neg`` fresh negatives,
    which keeps the noise-rate fit from tracking negative-sampling luck.
    """
    ids = np.arange(len(data))
    if loss != "bpr":
        return batch_losses(params, data.positives_batch(ids, loss, rng))
    out = np.zeros(len(data))
    for _ in range(max(1, n_neg)):
        out += batch_losses(params, data.positives_batch(ids, loss, rng))
    return out / max(1, n_neg)


@dataclass
class RunState:
    phase: str = "memorization"  # memorization | self_guided | done
    epoch: int = 0
    t_m: Optional[int] = None
    sigma_hat: Optional[float] = None
    memorized: Optional[np.ndarray] = None  # frozen at transition
    theta: Optional[ModelParams] = None
    psi: Optional[mw.WeightNet] = None
    sched: Optional[sch.SchedulerState] = None
    best_recall: float = -np.inf
    best_epoch: int = 0
    best_theta: Optional[ModelParams] = None
    since_best: int = 0
    history: list = field(default_factory=list)
    mem_history: list = field(default_factory=list)

    def enter_phase2(self, epoch, memorized, sigma_hat):
        if self.phase != "memorization":
            raise RuntimeError("phase II can only be entered once")
        self.phase = "self_guided"
        self.t_m = epoch
        self.sigma_hat = sigma_hat
        self.memorized = np.array(memorized, dtype=np.int64, copy=True)
        self.memorized.setflags(write=False)


class Trainer:
    """Holds config, data, RNG streams and outputs for one run."""

    def __init__(self, config: RunConfig, table: InteractionTable, out_dir=None, rngs=None):
        self.config = config
        self.table = table
        self.data = TrainData.from_table(table)
        self.rngs = rngs or rng_streams(config.seed)
        self.out = Path(out_dir) if out_dir is not None else None
        self.state = RunState()
        self.tracker = mem.MemTracker(len(self.data), config.h)
        self.iteration = 0
        self.metrics = self.mem_writer = None
        self._meta_rows, self._sched_rows = [], []
        self._mem_by_user = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            self.metrics = evalkit.MetricsWriter(self.out / "metrics.csv")
            self.mem_writer = evalkit.MetricsWriter(self.out / "memorization.csv", MEM_COLUMNS)

    # -- shared per-epoch bookkeeping -------------------------------------------------

    def end_epoch(self, phase, allow_transition):
        """Memorization pass, noise-rate refit, validation metrics, logging.

        Returns True when the transition rule fires (only if allowed).
        """
        cfg, st, theta = self.config, self.state, self.state.theta
        st.epoch += 1
        mem.epoch_memorization_pass(theta, self.table, self.tracker)
        losses = positive_losses(theta, self.data, cfg.loss, self.rngs["estimate"], cfg.est_negatives)
        if not np.all(np.isfinite(losses)):
            raise NumericError(f"non-finite training loss at epoch {st.epoch}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sigma_hat = mem.estimate_noise_rate(losses)
        sigma_used = min(max(sigma_hat + cfg.mp_offset, 0.0), 1.0)
        memorized = self.tracker.memorized
        fire = allow_transition and mem.should_transition(len(memorized), sigma_used, len(self.data))

        rates, mpmr = (None, None), None
        if self.table.has_flags:
            rates = evalkit.memory_rate(memorized, self.table)
            mpmr = mem.mp_mr(memorized, self.table)
        rep = evalkit.evaluate(theta, self.table, VAL, cfg.k_list)
        row = {"epoch": st.epoch, "phase": phase, "sigma_hat": sigma_hat,
               "mem_rate_clean": rates[0], "mem_rate_noisy": rates[1],
               "MP": mpmr.MP if mpmr else None, "MR": mpmr.MR if mpmr else None}
        row.update(rep.row())
        st.history.append(row)
        mrow = {"epoch": st.epoch, "mem_count": len(memorized), "sigma_hat": sigma_hat, "transition": int(fire),
                "MP": row["MP"], "MR": row["MR"], "mem_rate_clean": rates[0], "mem_rate_noisy": rates[1]}
        st.mem_history.append(mrow)
        if self.metrics:
            self.metrics.write(row)
            self.mem_writer.write(mrow)
        log.info("epoch %d [%s] R@20=%.4f |M|=%d sigma_hat=%.3f noisy_mem=%s", st.epoch, phase,
                 rep.recall.get(20, float("nan")), len(memorized), sigma_hat, rates[1])

        recall = rep.recall[max(cfg.k_list)] if 20 not in rep.recall else rep.recall[20]
        if recall > st.best_recall:
            st.best_recall, st.best_epoch, st.since_best = recall, st.epoch, 0
            st.best_theta = theta.copy()
            if self.out is not None and cfg.checkpoints:
                save_checkpoint(theta, self.out / "best.ckpt")
        else:
            st.since_best += 1
        if fire:
            st.enter_phase2(st.epoch, memorized, sigma_used)
        return fire

    def should_stop(self):
        st, cfg = self.state, self.config
        return st.epoch >= cfg.min_epochs and st.since_best >= cfg.patience

    def new_epoch_samples(self, ids=None):
        return self.data.epoch_samples(self.config.loss, self.rngs["shuffle"], self.rngs["negatives"], ids)

    def batches(self, samples):
        B = self.config.batch_size
        for s in range(0, len(samples), B):
            yield samples.subset(np.arange(s, min(s + B, len(samples))))

    # -- phases -----------------------------------------------------------------------

    def init_model(self):
        t = self.table
        self.state.theta = init_params(t.num_users, t.num_items, self.config.d, self.rngs["init"])

    def train_plain_epoch(self, eta, ids=None):
        for b in self.batches(self.new_epoch_samples(ids)):
            sgd_step(self.state.theta, b, eta)

    def run_phase1(self):
        cfg, st = self.config, self.state
        if st.theta is None:
            self.init_model()
        for _ in range(cfg.max_epochs_phase1):
            self.train_plain_epoch(cfg.eta_phase1)
            if self.end_epoch("memorization", allow_transition=True):
                log.info("transition at epoch %d: |M|=%d sigma_hat=%.4f", st.t_m, len(st.memorized), st.sigma_hat)
                break
        else:
            warnings.warn(f"no memorization point within {cfg.max_epochs_phase1} epochs; forcing transition",
                          RuntimeWarning, stacklevel=2)
            sig = st.history[-1]["sigma_hat"] if st.history else 0.0
            st.enter_phase2(st.epoch, self.tracker.memorized, sig)
        if self.out is not None and cfg.checkpoints:
            save_checkpoint(st.theta, self.out / "transition.ckpt")
        return st.theta, st.memorized, st.t_m

    def run_phase2(self):
        cfg, st = self.config, self.state
        if st.memorized is None or len(st.memorized) == 0:
            raise ValueError("phase II needs a non-empty memorized set")
        if cfg.mode != "wo_dls":
            st.psi = mw.WeightNet.init(cfg.d_w, self.rngs["psi"])
            st.sched = sch.SchedulerState.create(cfg.scheduler, len(st.memorized), cfg.d_l, self.rngs["phi"])
        for _ in range(cfg.max_epochs_phase2):
            if cfg.mode == "wo_dls":
                self.train_plain_epoch(cfg.eta1, ids=st.memorized)
            else:
                for b in self.batches(self.new_epoch_samples()):
                    self.self_guided_iteration(b)
            self.end_epoch("self_guided", allow_transition=False)
            if self.should_stop():
                break
        st.phase = "done"
        return st.theta, st.psi, st.sched

    def run_normal(self):
        cfg, st = self.config, self.state
        self.init_model()
        st.phase = "normal"
        for _ in range(cfg.max_epochs_phase1 + cfg.max_epochs_phase2):
            self.train_plain_epoch(cfg.eta_phase1)
            self.end_epoch("normal", allow_transition=False)
            if self.should_stop():
                break
        st.phase = "done"
        return st.theta

    def sample_memorized(self, users, n):
        """Local indices into the frozen M, sorted and distinct.

        ``mem_batch = users``: one memorized positive per distinct batch user
        that has any, topped up uniformly; ``uniform``: n uniform draws.
        """
        rng, M = self.rngs["membatch"], self.state.memorized
        if n >= len(M):
            return np.arange(len(M))
        if self.config.mem_batch == "uniform":
            return np.sort(rng.choice(len(M), size=n, replace=False))
        if self._mem_by_user is None:
            mu = self.data.users[M]
            order = np.argsort(mu, kind="stable")
            starts = np.searchsorted(mu[order], np.arange(self.table.num_users + 1))
            self._mem_by_user = (order, starts)
        order, starts = self._mem_by_user
        u = np.unique(users)
        cnt = starts[u + 1] - starts[u]
        u, cnt = u[cnt > 0], cnt[cnt > 0]
        picked = order[starts[u] + (rng.random(len(u)) * cnt).astype(np.int64)][:n]
        if len(picked) < n:
            free = np.setdiff1d(np.arange(len(M)), picked, assume_unique=True)
            picked = np.concatenate([picked, rng.choice(free, size=n - len(picked), replace=False)])
        return np.sort(picked)

    def self_guided_iteration(self, batch: SampleBatch):
        cfg, st = self.config, self.state
        theta = st.theta
        losses, grads = batch_grads(theta, batch)
        look = mw.assumed_update(theta, batch, st.psi, cfg.eta1, losses, grads)

        M = st.memorized
        n_mem = min(cfg.batch_size, len(M))
        local = self.sample_memorized(batch.users, n_mem)
        mem_batch = self.data.positives_batch(M[local], cfg.loss, self.rngs["negatives"])
        feats, _ = sch.compute_features(mem_batch, theta, look.theta_hat)

        draw = None
        if cfg.mode == "wo_ads":
            pi = y = np.full(n_mem, 1.0 / n_mem)
        elif cfg.scheduler == sch.TOPF:
            pi = y = sch.topF_select(feats, local)
        else:
            _, pi = sch.forward(st.sched, feats, local)
            draw = sch.gumbel_weights(pi, cfg.tau, self.rngs["gumbel"])
            y = draw.y

        flags = self.data.sample_flags(batch)
        st.psi, report = mw.psi_meta_step(theta, look, batch, mem_batch, y, st.psi, cfg.eta1, cfg.eta2, flags)
        mw.actual_update(theta, batch, st.psi, cfg.eta1, losses, grads)
        if draw is not None:
            sch.update_phi(st.sched, feats, draw, batch_losses(theta, mem_batch), cfg.eta2)

        self.iteration += 1
        if cfg.iter_log and self.out is not None:
            self._meta_rows.append([self.iteration, st.epoch + 1, report.mean_weight, report.mean_weight_clean,
                                    report.mean_weight_noisy, report.psi_grad_norm])
            mflags = self.data.sample_flags(mem_batch)
            sel = None if mflags is None else float(np.asarray(y)[~mflags].sum())
            self._sched_rows.append([self.iteration, cfg.scheduler if cfg.mode != "wo_ads" else "uniform",
                                     sch.entropy(pi), float(np.max(y)), sel])

    # -- outputs ------------------------------------------------------------------------

    def weight_rows(self):
        """(loss, weight, noise_flag) per train positive at the final theta and psi."""
        st = self.state
        samples = self.data.positives_batch(np.arange(len(self.data)), self.config.loss, self.rngs["negatives"])
        losses = batch_losses(st.theta, samples)
        weights = st.psi.weights(losses)
        flags = self.data.flags if self.data.flags is not None else np.zeros(len(self.data), dtype=bool)
        return list(zip(losses.tolist(), weights.tolist(), flags.tolist()))

    def flush_iter_logs(self):
        if self.out is None or not self.config.iter_log:
            return
        for name, cols, rows in (("meta_iterations.csv", META_COLUMNS, self._meta_rows),
                                 ("scheduler_iterations.csv", SCHED_COLUMNS, self._sched_rows)):
            with (self.out / name).open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for r in rows:
                    w.writerow([evalkit._fmt(v) for v in r])


@dataclass
class RunResult:
    config: RunConfig
    test: evalkit.MetricReport
    t_m: Optional[int]
    sigma_hat: Optional[float]
    epochs: int
    best_epoch: int
    theta: ModelParams
    psi: Optional[mw.WeightNet]
    history: list
    mem_history: list
    weight_rows: Optional[list]
    output_dir: Optional[Path]

    def noisy_rate_at(self, epoch):
        for r in self.mem_history:
            if r["epoch"] == epoch:
                return r["mem_rate_noisy"]
        return None


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def run(config: RunConfig, table: InteractionTable = None, write=True) -> RunResult:
    """ingest -> Phase I -> Phase II -> final test evaluation (or a normal baseline run)."""
    config = _stage("config", config.validate) if table is None else config
    rngs = rng_streams(config.seed)
    if table is None:
        table = _stage("ingest", prepare_table, config, rngs)
    out = Path(config.output_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
    tr = Trainer(config, table, out, rngs)
    st = tr.state
    try:
        if config.mode == "normal":
            _stage("train", tr.run_normal)
        else:
            _stage("phase1", tr.run_phase1)
            if len(st.memorized):
                _stage("phase2", tr.run_phase2)
            else:
                warnings.warn("memorized set is empty; skipping phase II", RuntimeWarning, stacklevel=2)
                st.phase = "done"
    finally:
        tr.flush_iter_logs()

    final = st.best_theta if st.best_theta is not None else st.theta
    test = _stage("evaluate", evalkit.evaluate, final, table, evalkit.TEST, config.k_list)
    weights = None
    if st.psi is not None:
        weights = tr.weight_rows()
    if out is not None:
        test_row = {"epoch": st.best_epoch, "phase": "test"} | test.row()
        tr.metrics.write(test_row)
        if weights is not None:
            evalkit.export_weight_distribution(weights, out / "weights.csv")
        if config.checkpoints:
            save_checkpoint(final, out / "final.ckpt")
        if config.figures:
            from . import plotting
            _stage("figures", plotting.render_run_figures, out, st.history, st.mem_history, st.t_m, weights, st.psi)
    return RunResult(config, test, st.t_m, st.sigma_hat, st.epoch, st.best_epoch, final, st.psi,
                     st.history, st.mem_history, weights, out)


def inspect_memorization(config: RunConfig, epochs: int, table: InteractionTable = None, out_dir=None):
    """Plain training for ``epochs`` epochs, recording memorization rows (no transition)."""
    rngs = rng_streams(config.seed)
    if table is None:
        table = prepare_table(config, rngs)
    tr = Trainer(config, table, out_dir, rngs)
    tr.init_model()
    tr.state.phase = "inspect"
    for _ in range(epochs):
        tr.train_plain_epoch(config.eta_phase1)
        tr.end_epoch("memorization", allow_transition=False)
    return tr.state.mem_history
