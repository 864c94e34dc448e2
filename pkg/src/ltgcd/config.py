"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


TARGET_DISTS = ("learnable", "estimated", "uniform")


@dataclass(frozen=True)
class TrainConfig:
    # data
    profile: str = "exp"
    C: int = 10
    rho: float = 20.0
    n_max: int = 300
    d: int = 16
    sep: float = 4.0
    sigma: float = 1.0
    n_known: int = 5
    known_select: str = "random"
    test_per_class: int = 100
    data_seed: int = 0
    # encoder
    hidden: int = 64
    dz: int = 32
    # discovery stage
    gamma: float = 2.0
    beta: float = 400.0
    lam: float = 0.35
    T1: int = 10
    batch_size: int = 256
    queue_size: int = 2048
    stage1_epochs: int = 50
    lr: float = 0.01
    lr_pi: float = 0.001
    momentum: float = 0.99
    jitter: float = 0.5
    sinkhorn_iters: int = 100
    eps_reg: float = 0.05
    tau_unsup: float = 0.07
    tau_sup: float = 0.1
    target_dist: str = "learnable"
    alpha_mean: str = "nearest"
    cluster_step: float = 0.1
    cluster_iters: int = 200
    kmeans_restarts: int = 50
    head_init: str = "prototypes"
    # balancing stage
    K: int = 5
    T2: int = 10
    stage2_epochs: int = 30
    lr_stage2: float = 0.005
    # evaluation
    eval_mode: str = "kmeans"
    eval_features: str = "backbone"
    many_above: int = 100
    few_below: int = 20
    seed: int = 0

    def __post_init__(self):
        checks = [
            (all(math.isfinite(v) for v in asdict(self).values() if isinstance(v, float)),
             "numeric settings must be finite"),
            (self.queue_size >= self.batch_size, "queue_size must be >= batch_size"),
            (self.T1 >= 1 and self.T2 >= 1, "T1 and T2 must be >= 1"),
            (0.0 <= self.lam <= 1.0, "lam must lie in [0, 1]"),
            (0.0 <= self.momentum <= 1.0, "momentum must lie in [0, 1]"),
            (self.lr > 0 and self.lr_pi >= 0 and self.lr_stage2 >= 0,
             "learning rates must be non-negative (lr positive)"),
            (self.batch_size >= 1, "batch_size must be positive"),
            (self.kmeans_restarts >= 1, "kmeans_restarts must be >= 1"),
            (self.K >= 1, "K must be >= 1"),
            (self.eps_reg > 0, "eps_reg must be positive"),
            (self.tau_unsup > 0 and self.tau_sup > 0, "temperatures must be positive"),
            (self.gamma > 1.0, "gamma must exceed 1"),
            (self.beta >= 0, "beta must be non-negative"),
            (self.stage1_epochs >= 0 and self.stage2_epochs >= 0, "epochs must be >= 0"),
            (self.target_dist in TARGET_DISTS, f"target_dist must be one of {TARGET_DISTS}"),
            (self.head_init in ("prototypes", "random"), "head_init must be prototypes|random"),
            (self.alpha_mean in ("nearest", "all"), "alpha_mean must be nearest|all"),
            (self.eval_mode in ("kmeans", "semi-sup-kmeans"), "eval_mode must be kmeans|semi-sup-kmeans"),
            (self.eval_features in ("backbone", "projection"), "eval_features must be backbone|projection"),
            (self.profile in ("exp", "pareto"), "profile must be exp|pareto"),
            (self.known_select in ("random", "head"), "known_select must be random|head"),
            (0 <= self.n_known <= self.C, "n_known must lie in [0, C]"),
            (self.few_below <= self.many_above, "few_below must not exceed many_above"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def with_overrides(self, overrides) -> "TrainConfig":
        return replace(self, **coerce(overrides))


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key, text):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    return str(text)


def coerce(pairs) -> dict:
    """Typed values for ``{key: text}`` or ``["key=value", ...]``."""
    if not isinstance(pairs, dict):
        parsed = {}
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            parsed[k.strip()] = v.strip()
        pairs = parsed
    out = {}
    for k, v in pairs.items():
        if k not in _TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _convert(k, v) if isinstance(v, str) else v
    return out


def parse_config(text: str) -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        pairs[k] = v.strip()
    return coerce(pairs)


def load_config(path=None, overrides=()) -> TrainConfig:
    """Defaults, then the file (flat text or JSON), then overrides."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            values = coerce(json.loads(text))
        else:
            values = parse_config(text)
    values.update(coerce(list(overrides)))
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: TrainConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in asdict(cfg).items()) + "\n"
