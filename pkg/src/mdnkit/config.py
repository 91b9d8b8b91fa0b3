"""Run configuration: schema, per-experiment presets, YAML loading and env overrides.

A config is a nested mapping.  Every key is validated; unknown keys are
errors.  Environment variables ``MDNKIT__<SECTION>__<KEY>=value`` override
loaded values (values are parsed as YAML scalars), e.g.
``MDNKIT__TRAIN__ITERATIONS=200``.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml

from .optim import LrSchedule, TrainConfig

EXPERIMENTS = ("inverse_sine", "gravity_case1", "gravity_case2", "gravity_case3", "saddle_node", "lorenz")
MODELS = ("mdn", "mse", "rnn_mdn")
SCALES = ("paper", "desk")
ENV_PREFIX = "MDNKIT__"
DESK_ITER_DIVISOR = 5
DESK_ENSEMBLE = 4


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class Backbone:
    layers: int = 5          # hidden layers (MLP) or 1 for the single GRU layer
    width: int = 128


@dataclass
class TrainSection:
    iterations: int = 30_000
    batch_size: int = 128
    weight_decay: float = 0.0
    grad_clip: float | None = None
    window: int = 100
    on_nonfinite_grad: str = "abort"
    schedule: LrSchedule = field(default_factory=LrSchedule)

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, seed=seed,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                           schedule=copy.deepcopy(self.schedule), window=self.window,
                           on_nonfinite_grad=self.on_nonfinite_grad)


@dataclass
class DataSection:
    N: int = 1000            # training samples (trajectories for lorenz)
    seed: int = 0
    test_N: int = 1000
    test_seed: int = 10_000


@dataclass
class EvalSection:
    rollouts: int = 20           # lorenz: rollouts / fresh ground-truth trajectories
    rollout_steps: int = 499     # increments per rollout (500 states)
    burn_in: int = 50
    cloud_size: int = 10_000
    long_rollout_steps: int = 5000
    prune: float = 0.0
    grid: int = 41               # interpretability grid points per axis


@dataclass
class RunConfig:
    experiment: str = "inverse_sine"
    model: str = "mdn"
    K: int = 8
    backbone: Backbone = field(default_factory=Backbone)
    eps: float = 1e-6
    elu_scale: bool = False
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ensemble_size: int = 12
    seed: int = 0
    workers: int = 0             # 0: one worker per CPU
    scale: str = "paper"
    out: str = "runs"

    # ---------------------------------------------------------------- helpers
    def member_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.ensemble_size)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(f"{path}: {msg}")

        need(self.experiment in EXPERIMENTS, "experiment", f"must be one of {EXPERIMENTS}")
        need(self.model in MODELS, "model", f"must be one of {MODELS}")
        need(self.scale in SCALES, "scale", f"must be one of {SCALES}")
        need(self.model != "rnn_mdn" or self.experiment == "lorenz", "model", "rnn_mdn needs the lorenz experiment")
        need(self.K >= 1, "K", "must be >= 1")
        need(self.backbone.layers >= 1 and self.backbone.width >= 1, "backbone", "layers and width must be >= 1")
        need(self.eps > 0, "eps", "must be positive")
        need(self.ensemble_size >= 1, "ensemble_size", "must be >= 1")
        need(self.workers >= 0, "workers", "must be >= 0 (0 = one per CPU)")
        need(self.data.N >= 1 and self.data.test_N >= 1, "data.N", "sizes must be >= 1")
        t = self.train
        need(t.iterations >= 0, "train.iterations", "must be >= 0")
        need(t.batch_size >= 1, "train.batch_size", "must be >= 1")
        need(t.window >= 1, "train.window", "must be >= 1")
        need(t.weight_decay >= 0, "train.weight_decay", "must be >= 0")
        need(t.grad_clip is None or t.grad_clip > 0, "train.grad_clip", "must be positive or null")
        need(t.on_nonfinite_grad in ("abort", "skip"), "train.on_nonfinite_grad", "must be abort or skip")
        s = t.schedule
        need(s.warmup_steps >= 0, "train.schedule.warmup_steps", "must be >= 0")
        need(s.peak_lr > 0, "train.schedule.peak_lr", "must be positive")
        need(0 < s.decay_rate <= 1, "train.schedule.decay_rate", "must be in (0, 1]")
        need(s.decay_every >= 1, "train.schedule.decay_every", "must be >= 1")
        need(s.floor_lr is None or s.floor_lr >= 0, "train.schedule.floor_lr", "must be >= 0 or null")
        e = self.eval
        need(e.rollouts >= 1 and e.rollout_steps >= 0 and e.burn_in >= 0, "eval", "rollout sizes must be >= 0")
        need(e.cloud_size >= 2, "eval.cloud_size", "must be >= 2")
        need(0 <= e.prune < 1, "eval.prune", "must be in [0, 1)")
        return self


# ------------------------------------------------------------------ (de)coding
def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub)
        else:
            kwargs[name] = _coerce(value, current, sub)
    return cls(**kwargs)


def _coerce(value, current, path):
    if value is None:
        return None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float) or current is None:
        if isinstance(value, str):          # YAML 1.1 reads "1e6" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        sub = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"{sub}: unknown key")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, sub)
        else:
            out[k] = v
    return out


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


# ------------------------------------------------------------------ presets
def _sched(warmup, peak, every, floor=None, rate=0.9):
    return {"warmup_steps": warmup, "peak_lr": peak, "decay_rate": rate, "decay_every": every,
            "floor_lr": floor, "staircase": False}


def preset(experiment: str, model: str = "mdn", scale: str = "paper") -> RunConfig:
    """The recipe for ``experiment``/``model`` at paper or desk scale.

    Desk scale divides iterations, warmup and decay interval by 5 (so the
    schedule keeps its shape) and uses 4 ensemble members.
    """
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {EXPERIMENTS}")
    d: dict = {"experiment": experiment, "model": model, "scale": "paper"}
    if experiment == "inverse_sine":
        d.update(K=8, backbone={"layers": 5, "width": 128},
                 train={"iterations": 30_000, "batch_size": 128, "weight_decay": 0.0, "grad_clip": None,
                        "schedule": _sched(100, 5e-3, 1000)},
                 data={"N": 1000, "seed": 0, "test_N": 1000, "test_seed": 10_000}, ensemble_size=12)
    elif experiment.startswith("gravity"):
        d.update(K=10, backbone={"layers": 4, "width": 128},
                 train={"iterations": 30_000, "batch_size": 64, "weight_decay": 0.01, "grad_clip": 0.01,
                        "schedule": _sched(500, 5e-4, 1000, floor=5e-4)},
                 data={"N": 10_000, "seed": 0, "test_N": 2000, "test_seed": 10_000}, ensemble_size=12)
    elif experiment == "saddle_node":
        d.update(K=15, backbone={"layers": 5, "width": 256},
                 train={"iterations": 50_000, "batch_size": 128, "weight_decay": 1e-5, "grad_clip": 0.1,
                        "schedule": _sched(2000, 5e-4, 2000)},
                 data={"N": 1000, "seed": 0, "test_N": 2000, "test_seed": 10_000}, ensemble_size=12)
    else:  # lorenz
        rnn = model == "rnn_mdn"
        d.update(K=8 if rnn else 9, backbone={"layers": 1 if rnn else 5, "width": 128},
                 train={"iterations": 30_000, "batch_size": 5 if rnn else 256, "weight_decay": 0.1,
                        "grad_clip": None, "window": 100, "schedule": _sched(1000, 1e-3, 1000)},
                 data={"N": 100, "seed": 0, "test_N": 20, "test_seed": 10_000}, ensemble_size=1)
    if model == "mse":
        d["K"] = 1
    cfg = from_dict(d)
    return apply_scale(cfg, scale)


def apply_scale(cfg: RunConfig, scale: str) -> RunConfig:
    if scale not in SCALES:
        raise ConfigError(f"scale: must be one of {SCALES}")
    cfg = copy.deepcopy(cfg)
    if scale == "desk" and cfg.scale != "desk":
        t = cfg.train
        t.iterations //= DESK_ITER_DIVISOR
        t.schedule.warmup_steps //= DESK_ITER_DIVISOR
        t.schedule.decay_every = max(1, t.schedule.decay_every // DESK_ITER_DIVISOR)
        cfg.ensemble_size = min(cfg.ensemble_size, DESK_ENSEMBLE)
    cfg.scale = scale
    return cfg.validate()


# ------------------------------------------------------------------ loading
def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _match_case(layer: dict, base: dict) -> dict:
    """Map lower-cased env keys (``k``) onto schema keys (``K``)."""
    out = {}
    for k, v in layer.items():
        key = next((b for b in base if b.lower() == k), k)
        out[key] = _match_case(v, base[key]) if isinstance(v, dict) and isinstance(base.get(key), dict) else v
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Preset (chosen by ``experiment``/``model``/``scale``), then file, env and overrides.

    Explicit values are never rescaled; ``scale`` only picks the preset.
    """
    user: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file: top level must be a mapping")
    layers = [user, _match_case(env_overrides(environ), RunConfig().to_dict()), overrides or {}]
    merged_top: dict = {}
    for layer in layers:
        for k in ("experiment", "model", "scale"):
            if k in layer:
                merged_top[k] = layer[k]
    exp = merged_top.get("experiment", "inverse_sine")
    model = merged_top.get("model", "mdn")
    scale = merged_top.get("scale", "paper")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {EXPERIMENTS}")
    if model not in MODELS:
        raise ConfigError(f"model: must be one of {MODELS}")
    if scale not in SCALES:
        raise ConfigError(f"scale: must be one of {SCALES}")
    base = preset(exp, model, scale).to_dict()     # scaling applies to the preset only
    for layer in layers:
        base = _merge(base, layer)
    return from_dict(base)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
