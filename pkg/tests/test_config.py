import pytest

from sgdl.config import RunConfig, apply_env, load_config, parse_config_text
from sgdl.errors import ConfigError


def test_parse_flat_file():
    cfg = parse_config_text("""
        # comment line
        format = synthetic
        sigma = 0.3   # trailing comment
        d = 16
        figures = no
        synth_interactions = 10_000
    """)
    assert (cfg.format, cfg.sigma, cfg.d, cfg.figures, cfg.synth_interactions) == ("synthetic", 0.3, 16, False, 10_000)


def test_delim_escapes():
    assert parse_config_text("delim = ::").delim == "::"
    assert parse_config_text(r"delim = \t").delim == "\t"
    cfg = RunConfig(delim="\t")
    assert parse_config_text(cfg.to_text()).delim == "\t"


def test_to_text_round_trip():
    cfg = RunConfig(sigma=0.35, mode="wo_dls", iter_log=False)
    assert parse_config_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["nope = 1", "d = x", "figures = maybe", "just words"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nsigma = 0.1\nd = 8\n")
    cfg = load_config(path, environ={"SGDL_SIGMA": "0.25", "SGDL_TAU": "0.5", "OTHER": "1"}, d=4)
    assert (cfg.seed, cfg.sigma, cfg.tau, cfg.d) == (3, 0.25, 0.5, 4)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg", environ={})
    with pytest.raises(ConfigError):
        apply_env(RunConfig(), {"SGDL_H": "two"})


@pytest.mark.parametrize("kw", [
    {"eta1": 0}, {"tau": -1.0}, {"h": 0}, {"sigma": 1.0}, {"mode": "fast"}, {"scheduler": "gru"},
    {"loss": "hinge"}, {"mem_batch": "all"}, {"max_epochs_phase1": -1}, {"ks": ""}, {"est_negatives": 0},
    {"format": "canonical", "dataset": ""}, {"format": "ratings", "dataset": "/no/such/file"},
])
def test_validate_rejects(kw):
    base = RunConfig(format="synthetic")
    with pytest.raises(ConfigError):
        base.replace(**kw).validate()


def test_defaults_valid():
    cfg = RunConfig(format="synthetic").validate()
    assert cfg.k_list == (5, 20)
    assert cfg.eta1 == cfg.eta2
