import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params
from sgdl import evalkit as ek
from sgdl.dataset import TEST, TRAIN, VAL, InteractionTable
from sgdl.errors import UnsupportedModeError
from sgdl.recmodel import score_matrix


def test_recall_examples():
    assert ek.recall_at_k([7, 1, 2, 3, 4], {7}, 5) == 1.0
    assert ek.recall_at_k([7, 1, 2, 3, 4], {7, 9}, 5) == 0.5
    assert ek.recall_at_k([1, 2, 3, 4, 5], {9}, 5) == 0.0
    assert ek.recall_at_k([1, 2], set(), 2) is None


def test_ndcg_examples():
    assert abs(ek.ndcg_at_k([7, 1, 2, 3, 4], {7}, 5) - 1.0) <= 1e-9
    assert abs(ek.ndcg_at_k([1, 7, 2, 3, 4], {7}, 5) - 1 / math.log2(3)) <= 1e-9
    assert abs(ek.ndcg_at_k([1, 7, 2, 3, 4], {7}, 5) - 0.63093) <= 1e-5
    got = ek.ndcg_at_k([7, 1, 8, 3, 4], {7, 8}, 5)
    assert abs(got - (1 + 0.5) / (1 + 1 / math.log2(3))) <= 1e-9
    assert abs(got - 0.91972) <= 1e-5
    assert ek.ndcg_at_k([1], set(), 1) is None


@settings(max_examples=200, deadline=None)
@given(data=st.data(), K=st.integers(1, 10))
def test_metrics_bounded_and_monotone(data, K):
    topk = data.draw(st.permutations(range(30)))[:K]
    rel = set(data.draw(st.lists(st.integers(0, 29), min_size=1, max_size=8)))
    r, n = ek.recall_at_k(topk, rel, K), ek.ndcg_at_k(topk, rel, K)
    assert 0 <= r <= 1 and 0 <= n <= 1 + 1e-12
    misses = [j for j, item in enumerate(topk) if item not in rel]
    spare = sorted(rel - set(topk))
    if misses and spare:
        j = data.draw(st.sampled_from(misses))
        better = list(topk)
        better[j] = spare[0]
        assert ek.recall_at_k(better, rel, K) >= r
        assert ek.ndcg_at_k(better, rel, K) >= n


def _split_table(rng, nu=12, ni=25, n=150):
    pairs = rng.choice(nu * ni, size=n, replace=False)
    u, i = pairs // ni, pairs % ni
    split = rng.choice([TRAIN, VAL, TEST], size=n, p=[0.6, 0.2, 0.2]).astype(np.int8)
    split[u == 0] = TRAIN  # user 0 has no test items and must be skipped
    z = np.zeros(n, dtype=np.int64)
    return InteractionTable(u, i, z, z, nu, ni, rng.random(n) < 0.3, split)


def test_evaluate_matches_brute_force():
    rng = np.random.default_rng(0)
    t = _split_table(rng)
    p = random_params(rng, nu=12, ni=25, d=4)
    rep = ek.evaluate(p, t, TEST, ks=(5, 20))
    S = score_matrix(p, np.arange(12))
    recs, ndcgs = {5: [], 20: []}, {5: [], 20: []}
    for u in range(12):
        rel = set(t.items[(t.users == u) & (t.split == TEST)].tolist())
        if not rel:
            continue
        seen = set(t.items[(t.users == u) & (t.split != TEST)].tolist())
        order = sorted((i for i in range(25) if i not in seen), key=lambda i: (-S[u, i], i))
        for k in (5, 20):
            recs[k].append(ek.recall_at_k(order[:k], rel, k))
            ndcgs[k].append(ek.ndcg_at_k(order[:k], rel, k))
    assert rep.n_skipped >= 1 and rep.n_users == len(recs[5])
    for k in (5, 20):
        assert abs(rep.recall[k] - np.mean(recs[k])) <= 1e-9
        assert abs(rep.ndcg[k] - np.mean(ndcgs[k])) <= 1e-9


def test_memory_rate_examples():
    noise = np.array([False] * 100 + [True] * 50)
    n = len(noise)
    z = np.zeros(n, dtype=np.int64)
    t = InteractionTable(z, np.arange(n), z, z, 1, n, noise, np.full(n, TRAIN, np.int8))
    assert ek.memory_rate(range(100), t) == (1.0, 0.0)
    assert ek.memory_rate(set(), t) == (0.0, 0.0)
    assert ek.memory_rate(list(range(50)) + list(range(100, 110)), t) == (0.5, 0.2)
    t.noise = None
    with pytest.raises(UnsupportedModeError):
        ek.memory_rate([0], t)


def test_weight_distribution_csv(tmp_path):
    empty = ek.export_weight_distribution([], tmp_path / "e.csv")
    assert empty.read_text().strip() == "loss,weight,noise_flag"
    rng = np.random.default_rng(1)
    rows = [(float(a), float(b), bool(c)) for a, b, c in zip(rng.random(20) * 5, rng.random(20), rng.random(20) < .5)]
    back = ek.read_weight_distribution(ek.export_weight_distribution(rows, tmp_path / "w.csv"))
    assert len(back) == 20
    for (a, b, c), (x, y, f) in zip(rows, back):
        assert abs(a - x) <= 1e-9 and abs(b - y) <= 1e-9 and f == int(c) and f in (0, 1)


def test_metrics_writer(tmp_path):
    w = ek.MetricsWriter(tmp_path / "m.csv")
    w.write({"epoch": 1, "phase": "I", "recall@20": 0.25, "sigma_hat": None})
    rows = ek.read_csv(w.path)
    assert list(rows[0]) == ek.METRIC_COLUMNS
    assert rows[0]["recall@20"] == "0.25" and rows[0]["sigma_hat"] == "" and rows[0]["phase"] == "I"
