"""Run configuration: flat ``key = value`` files with ``SGDL_<KEY>`` environment overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "SGDL_"

MODES = ("sgdl", "normal", "wo_dls", "wo_ads")
FORMATS = ("canonical", "ratings", "synthetic")
NOISE_MODES = ("ratings", "inject")


@dataclass
class RunConfig:
    # data
    dataset: str = ""  # canonical dir, ratings file, or empty for format=synthetic
    format: str = "canonical"  # canonical | ratings | synthetic
    delim: str = "\t"
    noise_mode: str = "inject"  # ratings: flag ratings below threshold; inject: add sigma noise to train
    sigma: float = 0.2
    rating_threshold: int = 3
    synth_users: int = 943
    synth_items: int = 1683
    synth_interactions: int = 100_000
    synth_rank: int = 8
    synth_strength: float = 8.0
    # model and optimisation
    loss: str = "bpr"  # bpr | bce
    d: int = 32
    eta_phase1: float = 10.0  # plain SGD, mean over the batch
    eta1: float = 10.0
    eta2: float = 10.0
    batch_size: int = 128
    d_w: int = 64
    # memorization
    h: int = 5
    max_epochs_phase1: int = 6  # forced transition at this cap
    est_negatives: int = 20  # BPR negatives averaged per positive for the sigma_hat losses
    mp_offset: float = 0.0  # added to sigma_hat before the transition test (+ = earlier)
    # self-guided learning
    mode: str = "sgdl"  # sgdl | normal | wo_dls | wo_ads
    scheduler: str = "lstm"  # lstm | mlp | topF
    d_l: int = 64
    mem_batch: str = "users"  # users: memorized samples of the batch's users; uniform: uniform over M
    tau: float = 0.05
    max_epochs_phase2: int = 20
    patience: int = 10
    min_epochs: int = 0  # no early stop before this total epoch
    # evaluation and output
    ks: str = "5,20"
    seed: int = 0
    output_dir: str = "runs/default"
    iter_log: bool = True
    figures: bool = True
    checkpoints: bool = True

    @property
    def k_list(self):
        return tuple(int(k) for k in str(self.ks).split(",") if k.strip())

    def validate(self):
        for name in ("eta_phase1", "eta1", "eta2", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.h < 1:
            raise ConfigError("h must be >= 1")
        if self.d < 1 or self.est_negatives < 1 or self.batch_size < 1 or self.d_w < 1 or self.d_l < 1:
            raise ConfigError("d, batch_size, d_w and d_l must be >= 1")
        if not 0 <= self.sigma < 1:
            raise ConfigError("sigma must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
        if self.loss not in ("bpr", "bce"):
            raise ConfigError("loss must be bpr or bce")
        if self.mem_batch not in ("users", "uniform"):
            raise ConfigError("mem_batch must be users or uniform")
        if self.scheduler not in ("lstm", "mlp", "topF"):
            raise ConfigError("scheduler must be lstm, mlp or topF")
        if self.max_epochs_phase1 < 0 or self.max_epochs_phase2 < 0:
            raise ConfigError("epoch caps must be >= 0")
        if not self.k_list:
            raise ConfigError("ks must list at least one cutoff")
        if self.format != "synthetic":
            if not self.dataset:
                raise ConfigError("dataset path is required unless format=synthetic")
            if not Path(self.dataset).exists():
                raise ConfigError(f"dataset path does not exist: {self.dataset}")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "delim":
                v = v.encode("unicode_escape").decode()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name, typ, raw):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw.replace("_", ""))
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    if name == "delim":
        return raw.encode().decode("unicode_escape") if raw else "\t"
    return raw


def parse_config_text(text, base=None):
    cfg = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, types[key], value)
    return dataclasses.replace(cfg, **updates)


def apply_env(cfg, environ=None):
    environ = os.environ if environ is None else environ
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for key, typ in types.items():
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            updates[key] = _coerce(key, typ, environ[env_key])
    return dataclasses.replace(cfg, **updates)


def load_config(path=None, environ=None, **overrides):
    """Defaults <- file <- environment <- keyword overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config_text(path.read_text(), cfg)
    cfg = apply_env(cfg, environ)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg
