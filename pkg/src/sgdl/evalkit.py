"""Full-ranking Recall@K / NDCG@K, memory rates and CSV exports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TEST, TRAIN, VAL, InteractionTable
from .errors import UnsupportedModeError
from .recmodel import ModelParams, score_matrix

METRIC_COLUMNS = ["epoch", "phase", "recall@5", "recall@20", "ndcg@5", "ndcg@20",
                  "mem_rate_clean", "mem_rate_noisy", "MP", "MR", "sigma_hat"]


def recall_at_k(topk, relevant, K=None):
    topk = list(topk)[:K] if K is not None else list(topk)
    relevant = set(relevant)
    if not relevant:
        return None
    return len(relevant.intersection(topk)) / len(relevant)


def ndcg_at_k(topk, relevant, K=None):
    topk = list(topk)[:K] if K is not None else list(topk)
    relevant = set(relevant)
    if not relevant:
        return None
    K = len(topk) if K is None else K
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(topk) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(K, len(relevant))))
    return dcg / idcg


def rank_topk(params: ModelParams, users, exclude, K, chunk=512):
    """Top-K items per user by descending score (ties to the lower item index),
    skipping items in ``exclude`` (an Adjacency or None)."""
    users = np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), K), dtype=np.int64)
    for c in range(0, len(users), chunk):
        blk = users[c:c + chunk]
        S = score_matrix(params, blk)
        if exclude is not None:
            for r, u in enumerate(blk):
                S[r, exclude.items_of(u)] = -np.inf
        out[c:c + len(blk)] = np.argsort(-S, axis=1, kind="stable")[:, :K]
    return out


@dataclass
class MetricReport:
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    n_users: int = 0
    n_skipped: int = 0

    def row(self):
        return {f"recall@{k}": v for k, v in self.recall.items()} | {f"ndcg@{k}": v for k, v in self.ndcg.items()}


def evaluate(params: ModelParams, table: InteractionTable, split=TEST, ks=(5, 20)) -> MetricReport:
    """Average Recall/NDCG over users with at least one relevant item in ``split``.

    Candidates exclude train positives, and for the test split also validation positives.
    """
    target = table.adjacency(split)
    excluded = (TRAIN, VAL) if split == TEST else (TRAIN,)
    exclude = table.adjacency(excluded)
    deg = target.degree()
    users = np.flatnonzero(deg > 0)
    report = MetricReport(n_users=len(users), n_skipped=int(np.count_nonzero(deg == 0)))
    if not len(users):
        report.recall = {k: 0.0 for k in ks}
        report.ndcg = {k: 0.0 for k in ks}
        return report
    Kmax = max(ks)
    top = rank_topk(params, users, exclude, Kmax)
    # vectorised hit matrix: hits[r, j] = top[r, j] relevant to users[r]
    hits = target.contains(np.repeat(users, Kmax), top.ravel()).reshape(len(users), Kmax)
    n_rel = deg[users]
    disc = 1.0 / np.log2(np.arange(2, Kmax + 2))
    for k in ks:
        h = hits[:, :k]
        report.recall[k] = float(np.mean(h.sum(axis=1) / n_rel))
        idcg = np.cumsum(disc[:k])[np.minimum(n_rel, k) - 1]
        report.ndcg[k] = float(np.mean((h * disc[:k]).sum(axis=1) / idcg))
    return report


def memory_rate(memorized, table: InteractionTable):
    """(clean_rate, noisy_rate): memorized share of clean and of noisy train positives."""
    if not table.has_flags:
        raise UnsupportedModeError("memory rates need ground-truth noise flags")
    noisy = table.noise[table.split_indices(TRAIN)]
    mask = np.zeros(len(noisy), dtype=bool)
    mem = np.asarray(list(memorized), dtype=np.int64)
    mask[mem] = True
    n_clean, n_noisy = int((~noisy).sum()), int(noisy.sum())
    clean_rate = float((mask & ~noisy).sum() / n_clean) if n_clean else 0.0
    noisy_rate = float((mask & noisy).sum() / n_noisy) if n_noisy else 0.0
    return clean_rate, noisy_rate


def export_weight_distribution(rows, path):
    """Write ``loss,weight,noise_flag`` rows; flags are written as 0/1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "weight", "noise_flag"])
        for loss, weight, flag in rows:
            w.writerow([repr(float(loss)), repr(float(weight)), int(bool(flag))])
    return path


def read_weight_distribution(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [(float(r["loss"]), float(r["weight"]), int(r["noise_flag"])) for r in reader]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


class MetricsWriter:
    """Appends rows of METRIC_COLUMNS to a CSV file."""

    def __init__(self, path, columns=METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def write(self, row: dict):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in self.columns])


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
