import warnings

import numpy as np
import pytest

from sgdl import harness as hn
from sgdl.dataset import TEST, TRAIN
from sgdl.errors import StageError
from sgdl.evalkit import evaluate, read_csv
from sgdl.recmodel import load_checkpoint


def _quiet_run(cfg, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return hn.run(cfg, **kw)


def test_rng_streams_independent():
    a, b = hn.rng_streams(1), hn.rng_streams(1)
    assert set(a) == set(hn.STREAMS)
    assert a["psi"].random() == b["psi"].random()
    assert a["psi"].random() != a["phi"].random()


def test_prepare_table_synthetic(tiny_config):
    t = hn.prepare_table(tiny_config)
    assert t.has_flags and len(t) > 1800  # injected noise on top of the clean interactions
    assert not t.noise[t.split == TEST].any()


def test_end_to_end_outputs(tiny_config):
    res = _quiet_run(tiny_config)
    out = res.output_dir
    for name in ("metrics.csv", "memorization.csv", "weights.csv", "config.txt", "best.ckpt", "final.ckpt",
                 "transition.ckpt", "meta_iterations.csv", "scheduler_iterations.csv"):
        assert (out / name).exists(), name
    rows = read_csv(out / "metrics.csv")
    assert [r["phase"] for r in rows][-1] == "test"
    assert 1 <= res.t_m <= tiny_config.max_epochs_phase1
    assert res.epochs <= tiny_config.max_epochs_phase1 + tiny_config.max_epochs_phase2
    assert len(res.weight_rows) == int(np.count_nonzero(hn.prepare_table(tiny_config).split == TRAIN))
    assert all(0 <= v <= 1 for v in res.test.recall.values())


def test_determinism_byte_identical(tiny_config, tmp_path):
    a = _quiet_run(tiny_config.replace(output_dir=str(tmp_path / "a")))
    b = _quiet_run(tiny_config.replace(output_dir=str(tmp_path / "b")))
    assert (a.output_dir / "metrics.csv").read_bytes() == (b.output_dir / "metrics.csv").read_bytes()
    assert (a.output_dir / "weights.csv").read_bytes() == (b.output_dir / "weights.csv").read_bytes()
    c = _quiet_run(tiny_config.replace(output_dir=str(tmp_path / "c"), seed=1))
    assert (a.output_dir / "metrics.csv").read_bytes() != (c.output_dir / "metrics.csv").read_bytes()


def test_zero_cap_forces_empty_transition(tiny_config):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = hn.run(tiny_config.replace(max_epochs_phase1=0))
    text = " ".join(str(w.message) for w in caught)
    assert "forcing transition" in text and "memorized set is empty" in text
    assert res.t_m == 0 and res.psi is None


def test_cap_warning_when_rule_never_fires(tiny_config):
    with pytest.warns(RuntimeWarning, match="forcing transition"):
        res = hn.run(tiny_config.replace(max_epochs_phase1=1, mp_offset=-1.0), write=False)
    assert res.t_m == 1


def test_rule_fires_without_warning(tiny_config):
    # offset pushes the estimate to 1, so the threshold (1 - 1)|D| = 0 is met at once
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        tr = hn.Trainer(tiny_config, hn.prepare_table(tiny_config))
        tr.config = tiny_config.replace(mp_offset=1.0)
        tr.run_phase1()
    assert tr.state.t_m == 1 and tr.state.sigma_hat == 1.0
    assert tr.state.mem_history[0]["transition"] == 1


def test_phase2_entered_once_and_m_frozen(tiny_config):
    tr = hn.Trainer(tiny_config, hn.prepare_table(tiny_config))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tr.run_phase1()
    m = tr.state.memorized
    assert not m.flags.writeable
    with pytest.raises(ValueError):
        m[0] = 1
    with pytest.raises(RuntimeError):
        tr.state.enter_phase2(5, [0], 0.1)
    snapshot = m.copy()
    tr.run_phase2()
    assert np.array_equal(tr.state.memorized, snapshot)
    assert all(r["transition"] == 0 for r in tr.state.mem_history[tr.state.t_m:])


def test_single_memorized_sample(tiny_config):
    cfg = tiny_config.replace(max_epochs_phase2=1)
    tr = hn.Trainer(cfg, hn.prepare_table(cfg))
    tr.init_model()
    tr.state.enter_phase2(0, [3], 0.2)
    tr.run_phase2()
    assert np.all(np.isfinite(tr.state.theta.flat()))
    assert tr.state.phase == "done"


def test_memorized_sampling(tiny_config):
    tr = hn.Trainer(tiny_config, hn.prepare_table(tiny_config))
    tr.init_model()
    tr.state.enter_phase2(0, np.arange(0, len(tr.data), 3), 0.2)
    users = tr.data.users[:40]
    local = tr.sample_memorized(users, 40)
    assert len(local) == 40 and np.all(np.diff(local) > 0)
    assert local.max() < len(tr.state.memorized)
    small = tr.sample_memorized(users[:5], 1000)
    assert len(small) == len(tr.state.memorized)


@pytest.mark.parametrize("kw", [{"mode": "normal"}, {"mode": "wo_dls"}, {"mode": "wo_ads"},
                                {"scheduler": "mlp"}, {"scheduler": "topF"}, {"mem_batch": "uniform"},
                                {"loss": "bce"}])
def test_modes_run(tiny_config, kw):
    res = _quiet_run(tiny_config.replace(**kw), write=False)
    assert np.all(np.isfinite(res.theta.flat()))
    assert (res.psi is None) == (kw.get("mode") in ("normal", "wo_dls"))
    if kw.get("mode") == "normal":
        assert res.t_m is None and all(r["phase"] == "normal" for r in res.history)


def test_missing_dataset_is_config_stage_error(tiny_config):
    with pytest.raises(StageError) as exc:
        hn.run(tiny_config.replace(format="ratings", dataset="/no/such/ratings.dat"))
    assert exc.value.stage == "config"


def test_checkpoint_reload_evaluates_identically(tiny_config):
    res = _quiet_run(tiny_config)
    table = hn.prepare_table(tiny_config)
    again = evaluate(load_checkpoint(res.output_dir / "final.ckpt"), table, TEST, tiny_config.k_list)
    assert again.recall == res.test.recall and again.ndcg == res.test.ndcg


def test_inspect_memorization(tiny_config, tmp_path):
    rows = hn.inspect_memorization(tiny_config, 3, out_dir=tmp_path / "mem")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert all(r["transition"] == 0 for r in rows)
    assert len(read_csv(tmp_path / "mem" / "memorization.csv")) == 3
