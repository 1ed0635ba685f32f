"""Experiment configuration: dataclasses, ``key = value`` file format and presets.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Every key
is optional and unknown keys are rejected. ``algorithm`` selects a mechanism
preset (see :data:`ALGORITHMS`) which any explicit flag key then overrides.

Keys and defaults::

    algorithm     = proposed     # proposed | fedavg | fedprox | row1 .. row7
    model         = mlp2         # mlp2 | logistic
    hidden_dim    = 600
    l2_lambda     = 0.0001
    data          = synthetic    # synthetic | mnist
    mnist_dir     =              # empty: bundled 4000/1000 MNIST subset
    train_limit   = 0            # 0: use every training sample
    test_limit    = 0
    synthetic_train   = 1000
    synthetic_test    = 500
    synthetic_dim     = 20
    synthetic_classes = 10
    synthetic_noise   = 1.0
    clients       = 10
    participants  = 5
    alpha         = 0.5
    batch_size    = 50
    epochs        = 2
    k             = 0.1
    w             = 1.0
    adaptive_lr   = true
    momentum      = true
    local_mvr     = true
    momentum_beta = 0.1
    fedprox_mu    = 0.0
    fixed_lr      = 0.1
    global_mvr    = true
    beta_mode     = constant     # constant | decaying
    beta0         = 0.9
    weighting     = uniform      # uniform | samples (FedAvg aggregation only)
    rounds        = 60
    seed          = 0
    eval_every    = 1
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from pathlib import Path

from .local_update import LocalHyper
from .server_update import ServerHyper


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    def __init__(self, key: str, lineno: int, suggestion: str | None):
        hint = f"; did you mean {suggestion!r}?" if suggestion else ""
        super().__init__(f"line {lineno}: unknown key {key!r}{hint}")
        self.key = key
        self.suggestion = suggestion


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    mnist_dir: str = ""
    train_limit: int = 0
    test_limit: int = 0
    synthetic_train: int = 1000
    synthetic_test: int = 500
    synthetic_dim: int = 20
    synthetic_classes: int = 10
    synthetic_noise: float = 1.0

    def __post_init__(self):
        if self.source not in ("synthetic", "mnist"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.train_limit < 0 or self.test_limit < 0:
            raise ValueError("limits must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "proposed"
    model: str = "mlp2"
    hidden_dim: int = 600
    l2_lambda: float = 1e-4
    data: DataConfig = field(default_factory=DataConfig)
    alpha: float = 0.5
    local: LocalHyper = field(default_factory=LocalHyper)
    server: ServerHyper = field(default_factory=ServerHyper)
    rounds: int = 60
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.rounds < 1 or self.eval_every < 1:
            raise ValueError("rounds and eval_every must be >= 1")
        if self.model not in ("mlp2", "logistic"):
            raise ValueError(f"unknown model {self.model!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")

    @property
    def n_clients(self) -> int:
        return self.server.n_clients


# (adaptive_lr, momentum, local_mvr, global_mvr), one entry per ablation row
ABLATION_ROWS = {
    1: (False, False, False, False),
    2: (False, True, False, False),
    3: (True, False, False, False),
    4: (True, True, False, False),
    5: (False, True, True, False),
    6: (False, True, True, True),
    7: (True, True, True, True),
}
FEDPROX_MU = 0.01


def _flags(row: int, fedprox_mu: float = 0.0) -> dict:
    adaptive, momentum, local_mvr, global_mvr = ABLATION_ROWS[row]
    return dict(adaptive_lr=adaptive, momentum=momentum, local_mvr=local_mvr,
                global_mvr=global_mvr, fedprox_mu=fedprox_mu)


ALGORITHMS = {
    "proposed": _flags(7),
    "fedavg": _flags(1),
    "fedprox": _flags(1, FEDPROX_MU),
    **{f"row{r}": _flags(r) for r in ABLATION_ROWS},
}

# flat key -> (section, attribute, type); section None means ExperimentConfig itself
_KEYS: dict[str, tuple[str | None, str, type]] = {
    "algorithm": (None, "algorithm", str),
    "model": (None, "model", str),
    "hidden_dim": (None, "hidden_dim", int),
    "l2_lambda": (None, "l2_lambda", float),
    "data": ("data", "source", str),
    "mnist_dir": ("data", "mnist_dir", str),
    "train_limit": ("data", "train_limit", int),
    "test_limit": ("data", "test_limit", int),
    "synthetic_train": ("data", "synthetic_train", int),
    "synthetic_test": ("data", "synthetic_test", int),
    "synthetic_dim": ("data", "synthetic_dim", int),
    "synthetic_classes": ("data", "synthetic_classes", int),
    "synthetic_noise": ("data", "synthetic_noise", float),
    "clients": ("server", "n_clients", int),
    "participants": ("server", "participants", int),
    "alpha": (None, "alpha", float),
    "batch_size": ("local", "batch_size", int),
    "epochs": ("local", "epochs", int),
    "k": ("local", "k", float),
    "w": ("local", "w", float),
    "adaptive_lr": ("local", "adaptive_lr", bool),
    "momentum": ("local", "momentum", bool),
    "local_mvr": ("local", "local_mvr", bool),
    "momentum_beta": ("local", "local_momentum_beta", float),
    "fedprox_mu": ("local", "fedprox_mu", float),
    "fixed_lr": ("local", "fixed_lr", float),
    "global_mvr": ("server", "global_mvr", bool),
    "beta_mode": ("server", "beta_mode", str),
    "beta0": ("server", "beta0", float),
    "weighting": ("server", "weighting", str),
    "rounds": (None, "rounds", int),
    "seed": (None, "seed", int),
    "eval_every": (None, "eval_every", int),
}
_FLAG_KEYS = ("adaptive_lr", "momentum", "local_mvr", "global_mvr", "fedprox_mu")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(raw: str, typ: type, key: str, lineno: int):
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None


def build_config(values: dict[str, object]) -> ExperimentConfig:
    """Assemble an :class:`ExperimentConfig` from flat key values over the defaults."""
    values = dict(values)
    algorithm = values.get("algorithm", "proposed")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    for key, val in ALGORITHMS[algorithm].items():
        values.setdefault(key, val)

    sections: dict[str | None, dict] = {None: {}, "data": {}, "local": {}, "server": {}}
    for key, val in values.items():
        section, attr, _ = _KEYS[key]
        sections[section][attr] = val
    try:
        return ExperimentConfig(
            data=DataConfig(**sections["data"]),
            local=LocalHyper(**sections["local"]),
            server=ServerHyper(**sections["server"]),
            **sections[None],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str) -> ExperimentConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            close = difflib.get_close_matches(key, _KEYS, n=1, cutoff=0.5)
            raise UnknownKeyError(key, lineno, close[0] if close else None)
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
            raw = raw[1:-1]
        values[key] = _convert(raw, _KEYS[key][2], key, lineno)
    return build_config(values)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text)


def config_values(cfg: ExperimentConfig) -> dict[str, object]:
    out = {}
    for key, (section, attr, _) in _KEYS.items():
        holder = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(holder, attr)
    return out


def _render(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def dump_config(cfg: ExperimentConfig) -> str:
    width = max(map(len, _KEYS))
    return "".join(f"{key:<{width}} = {_render(val)}\n" for key, val in config_values(cfg).items())


def with_values(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``cfg`` with flat-key overrides (e.g. ``seed=3``, ``rounds=10``)."""
    for key in overrides:
        if key not in _KEYS:
            raise UnknownKeyError(key, 0, None)
    values = config_values(cfg)
    if "algorithm" in overrides and overrides["algorithm"] != cfg.algorithm:
        for key in _FLAG_KEYS:
            values.pop(key)
    values.update(overrides)
    return build_config(values)


def desk_scale(algorithm: str = "proposed", mnist_dir: str = "") -> ExperimentConfig:
    """MNIST subset (2000 train / 1000 test), 10 clients, 5 per round, 60 rounds."""
    return build_config(dict(
        algorithm=algorithm, data="mnist", mnist_dir=mnist_dir, train_limit=2000, test_limit=1000,
        clients=10, participants=5, rounds=60, batch_size=50, epochs=2, alpha=0.5,
    ))


def paper_scale(algorithm: str = "proposed", mnist_dir: str = "") -> ExperimentConfig:
    """80 local epochs, 400 rounds, batch size 50, 100 clients."""
    return build_config(dict(
        algorithm=algorithm, data="mnist", mnist_dir=mnist_dir, train_limit=0, test_limit=0,
        clients=100, participants=10, rounds=400, batch_size=50, epochs=80, alpha=0.5,
    ))


def preset_ablation(row: int, paper: bool = False, mnist_dir: str = "") -> ExperimentConfig:
    if row not in ABLATION_ROWS:
        raise ConfigError(f"ablation row must be in 1..{len(ABLATION_ROWS)}, got {row}")
    make = paper_scale if paper else desk_scale
    return make(f"row{row}", mnist_dir)


def mechanism_flags(cfg: ExperimentConfig) -> tuple[bool, bool, bool, bool]:
    """(adaptive_lr, momentum, local_mvr, global_mvr) as actually configured."""
    return (cfg.local.adaptive_lr, cfg.local.momentum, cfg.local.local_mvr, cfg.server.global_mvr)
