import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, pairwise_batch, pointwise_batch, random_params, rel_err
from sgdl import recmodel as rm
from sgdl.dataset import Adjacency
from sgdl.errors import NumericError, SamplingError


def _zero(nu=2, ni=3, d=2):
    return rm.ModelParams(np.zeros((nu, d + 1)), np.zeros((ni, d + 1)), 0.0)


def test_score_examples():
    p = _zero()
    assert rm.score(p, 0, 1) == 0.0
    p.U[0, :2] = [1, 0]
    p.V[1, :2] = [2, 0]
    assert rm.score(p, 0, 1) == 2.0
    q = _zero()
    q.U[1, -1], q.V[2, -1], q.global_bias = 0.5, -0.5, 1.0
    assert rm.score(q, 1, 2) == 1.0


def test_score_index_errors():
    with pytest.raises(IndexError):
        rm.score(_zero(), 2, 0)
    with pytest.raises(IndexError):
        rm.score(_zero(), 0, -1)


def test_sample_loss_closed_forms():
    p = _zero()
    assert rm.sample_loss(p, rm.TrainSample(rm.POINTWISE, 0, 0, 1)) == pytest.approx(math.log(2), abs=1e-12)
    assert rm.sample_loss(p, rm.TrainSample(rm.PAIRWISE, 0, 0, 1, 1)) == pytest.approx(math.log(2), abs=1e-12)
    p.V[0, -1] = 1.0  # score_pos - score_neg = 1
    assert rm.sample_loss(p, rm.TrainSample(rm.PAIRWISE, 0, 0, 1, 1)) == pytest.approx(0.313262, abs=1e-6)


def test_bce_stable_at_extreme_scores():
    p = _zero()
    p.global_bias = 800.0
    assert rm.sample_loss(p, rm.TrainSample(rm.POINTWISE, 0, 0, 1)) == pytest.approx(0.0, abs=1e-300)
    assert rm.sample_loss(p, rm.TrainSample(rm.POINTWISE, 0, 0, 0)) == pytest.approx(800.0)


def test_sample_grad_at_zero():
    p = _zero()
    g = rm.sample_grad(p, rm.TrainSample(rm.POINTWISE, 1, 2, 1))
    e = g.entries(p.num_users)
    assert e[(rm.USER_BIAS, 1, 0)] == -0.5
    assert e[(rm.ITEM_BIAS, 2, 0)] == -0.5
    assert e[(rm.GLOBAL_BIAS, 0, 0)] == -0.5
    assert all(e[(rm.USER_EMB, 1, j)] == 0 for j in range(2))
    assert {k[:2] for k in e} == {(rm.USER_EMB, 1), (rm.ITEM_EMB, 2), (rm.USER_BIAS, 1), (rm.ITEM_BIAS, 2),
                                  (rm.GLOBAL_BIAS, 0)}


def test_pairwise_pos_equals_neg_rejected():
    with pytest.raises(ValueError):
        rm.sample_grad(_zero(), rm.TrainSample(rm.PAIRWISE, 0, 1, 1, 1))


def _fd_sample_grad(p, s, h=1e-5):
    q = p.copy()

    def f(x):
        q.set_flat(x)
        return rm.sample_loss(q, s)

    return central_diff(f, p.flat(), h)


def test_sample_grad_matches_finite_differences_100_draws():
    rng = np.random.default_rng(11)
    worst = 0.0
    for t in range(120):
        p = random_params(rng, nu=3, ni=5, d=4, scale=1.0)
        if t % 2:
            s = rm.TrainSample(rm.POINTWISE, int(rng.integers(3)), int(rng.integers(5)), int(rng.integers(2)))
        else:
            i, j = rng.choice(5, 2, replace=False)
            s = rm.TrainSample(rm.PAIRWISE, int(rng.integers(3)), int(i), 1, int(j))
        fd = _fd_sample_grad(p, s)
        worst = max(worst, rel_err(rm.sample_grad(p, s).dense(p), fd))
    assert worst <= 1e-6


def test_batch_grads_match_per_sample():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    for b in (pairwise_batch(rng, 4, 7, 9), pointwise_batch(rng, 4, 7, 9)):
        losses, g = rm.batch_grads(p, b)
        for k in range(len(b)):
            assert losses[k] == pytest.approx(rm.sample_loss(p, b[k]), abs=1e-14)
            assert np.allclose(g[k].dense(p), rm.sample_grad(p, b[k]).dense(p), atol=1e-14)


def test_sparse_dot_matches_dense():
    rng = np.random.default_rng(3)
    p = random_params(rng)
    a = pairwise_batch(rng, 4, 7, 5)
    b = pointwise_batch(rng, 4, 7, 6)
    _, ga = rm.batch_grads(p, a)
    _, gb = rm.batch_grads(p, b)
    dense = np.array([[ga[m].dense(p) @ gb[k].dense(p) for k in range(6)] for m in range(5)])
    assert np.allclose(rm.sparse_dot(ga, gb), dense, atol=1e-12)
    assert np.allclose(rm.paired_dot(ga, ga), ga.sq_norms(), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(s=st.floats(-30, 30), delta=st.floats(0.01, 5))
def test_losses_nonnegative_and_decreasing(s, delta):
    p = _zero(1, 2, 1)
    p.global_bias = s
    lo = rm.sample_loss(p, rm.TrainSample(rm.POINTWISE, 0, 0, 1))
    p.global_bias = s + delta
    hi = rm.sample_loss(p, rm.TrainSample(rm.POINTWISE, 0, 0, 1))
    assert lo >= 0 and hi >= 0 and hi < lo or (lo == hi == 0.0)
    q = _zero(1, 2, 1)
    q.V[0, -1] = s
    a = rm.sample_loss(q, rm.TrainSample(rm.PAIRWISE, 0, 0, 1, 1))
    q.V[0, -1] = s + delta
    b = rm.sample_loss(q, rm.TrainSample(rm.PAIRWISE, 0, 0, 1, 1))
    assert a >= 0 and (b < a or a == b == 0.0)


def test_weighted_step_zero_weights_noop():
    rng = np.random.default_rng(4)
    p = random_params(rng)
    before = p.flat()
    rm.weighted_step(p, pairwise_batch(rng, 4, 7, 6), np.zeros(6), 0.5)
    assert np.array_equal(p.flat(), before)


def test_weighted_step_single_sample_is_sgd():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    b = pointwise_batch(rng, 4, 7, 1)
    expect = p.flat() - 0.3 * rm.sample_grad(p, b[0]).dense(p)
    rm.weighted_step(p, b, [1.0], 0.3)
    assert np.allclose(p.flat(), expect, atol=1e-15)


def test_weighted_step_bilinear():
    rng = np.random.default_rng(6)
    p = random_params(rng)
    b = pairwise_batch(rng, 4, 7, 8)
    w = rng.random(8)
    a, c = p.copy(), p.copy()
    rm.weighted_step(a, b, 2 * w, 0.25)
    rm.weighted_step(c, b, w, 0.5)
    assert np.allclose(a.flat(), c.flat(), atol=1e-15)


def test_uniform_weights_equal_sgd_bitwise():
    rng = np.random.default_rng(7)
    p = random_params(rng)
    b = pairwise_batch(rng, 4, 7, 10)
    a, c = p.copy(), p.copy()
    rm.weighted_step(a, b, np.ones(10), 0.7)
    rm.sgd_step(c, b, 0.7)
    assert np.array_equal(a.flat(), c.flat())


def test_weighted_step_non_finite():
    rng = np.random.default_rng(8)
    p = random_params(rng)
    b = pointwise_batch(rng, 4, 7, 3)
    with pytest.raises(NumericError):
        rm.weighted_step(p, b, [1.0, np.nan, 1.0], 0.1)
    p.U[b.users[1], 0] = np.inf
    with pytest.raises(NumericError) as exc:
        rm.weighted_step(p, b, np.ones(3), 0.1)
    assert exc.value.sample_id is not None


def test_sample_negative_rules():
    adj = Adjacency([0, 0, 0, 1], [0, 1, 2, 0], num_users=2, num_items=4)
    rng = np.random.default_rng(0)
    assert all(rm.sample_negative(0, adj, rng) == 3 for _ in range(50))
    full = Adjacency([0] * 4, [0, 1, 2, 3], num_users=1, num_items=4)
    with pytest.raises(SamplingError):
        rm.sample_negative(0, full, rng)
    seq = lambda seed: [rm.sample_negative(1, adj, np.random.default_rng(seed)) for _ in range(5)]  # noqa: E731
    assert seq(3) == seq(3)


def test_sample_negative_never_positive_10k():
    rng = np.random.default_rng(1)
    items = rng.choice(50, size=20, replace=False)
    adj = Adjacency(np.zeros(20, int), items, num_users=1, num_items=50)
    draws = [rm.sample_negative(0, adj, rng) for _ in range(10_000)]
    assert not set(draws) & set(items.tolist())
    vec = rm.sample_negatives(np.zeros(10_000, int), adj, rng)
    assert not np.isin(vec, items).any()


def test_checkpoint_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(9)
    p = random_params(rng, nu=5, ni=6, d=3)
    path = rm.save_checkpoint(p, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    assert raw[:4] == b"SGDL"
    assert len(raw) == 4 + 4 + 3 * 8 + 8 * (5 * 3 + 6 * 3 + 5 + 6 + 1)
    first = np.frombuffer(raw, dtype="<f8", count=1, offset=32)[0]
    assert first == p.user_emb[0, 0]
    q = rm.load_checkpoint(path)
    assert np.array_equal(q.U, p.U) and np.array_equal(q.V, p.V) and q.global_bias == p.global_bias


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        rm.load_checkpoint(bad)
    p = random_params(np.random.default_rng(0))
    good = rm.save_checkpoint(p, tmp_path / "y.ckpt")
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError):
        rm.load_checkpoint(good)
