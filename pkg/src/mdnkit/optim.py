"""AdamW, learning-rate schedules, adaptive gradient clipping and training loops."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import kernels
from .mdn import Model
from .nn import ParamStore

log = logging.getLogger(__name__)

AGC_FLOOR = 1e-3


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; the message carries step, lr and gradient norms."""


@dataclass
class LrSchedule:
    warmup_steps: int = 0
    peak_lr: float = 1e-3
    decay_rate: float = 0.9
    decay_every: int = 1000
    floor_lr: float | None = None
    staircase: bool = False


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0 to ``peak_lr``, then exponential decay."""
    s = schedule
    if step < s.warmup_steps:
        lr = s.peak_lr * step / s.warmup_steps
    else:
        k = (step - s.warmup_steps) / s.decay_every
        if s.staircase:
            k = math.floor(k)
        lr = s.peak_lr * s.decay_rate ** k
        if s.floor_lr is not None:
            lr = max(lr, s.floor_lr)
    return lr


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    schedule: LrSchedule = field(default_factory=LrSchedule)
    window: int = 100
    on_nonfinite_grad: str = "abort"   # or "skip"

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = LrSchedule(**self.schedule)
        if self.iterations < 0 or self.batch_size <= 0 or self.window <= 0:
            raise ValueError("iterations must be >= 0, batch_size and window > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip rate must be positive")
        if self.on_nonfinite_grad not in ("abort", "skip"):
            raise ValueError("on_nonfinite_grad must be 'abort' or 'skip'")

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``
    """

    def __init__(self, params: ParamStore, weight_decay: float = 0.0, b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, params: ParamStore, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            g = np.zeros(p.data.size) if g is None else np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            kernels.adamw_update(p.data.reshape(-1), g, self.m[name].reshape(-1), self.v[name].reshape(-1),
                                 lr, self.b1, self.b2, c1, c2, self.eps, self.weight_decay)


def adamw_step(state: AdamW, params: ParamStore, grads: dict, lr: float) -> None:
    state.step(params, grads, lr)


def agc_clip(params: ParamStore, grads: dict, rate: float, floor: float = AGC_FLOOR) -> dict:
    """Rescale each gradient tensor to norm at most ``rate * max(|w|, floor)``."""
    if rate <= 0:
        raise ValueError("clip rate must be positive")
    out = {}
    for name, g in grads.items():
        wn = max(float(np.linalg.norm(params[name].data)), floor)
        gn = float(np.linalg.norm(g))
        limit = rate * wn
        out[name] = g * (limit / gn) if gn > limit else g
    return out


def grad_norms(grads: dict) -> dict:
    return {k: float(np.linalg.norm(g)) for k, g in grads.items()}


@dataclass
class TrainResult:
    params: ParamStore
    history: np.ndarray              # rows of (step, loss, lr)
    seed: int = 0
    seconds: float = 0.0
    skipped_steps: int = 0

    def losses(self) -> np.ndarray:
        return self.history[:, 1]


BatchFn = Callable[[np.random.Generator], tuple]


def _fit(model: Model, batch_fn: BatchFn, config: TrainConfig) -> TrainResult:
    params = model.params
    opt = AdamW(params, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    hist = np.zeros((config.iterations, 3))
    skipped = 0
    t0 = time.perf_counter()
    for step in range(config.iterations):
        lr = lr_at(config.schedule, step)
        xb, yb = batch_fn(rng)
        params.zero_grad()
        loss = model.loss(xb, yb)
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise TrainingDiverged(f"non-finite loss {lval} at step {step} (lr={lr:.3g})")
        dc.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            if config.on_nonfinite_grad == "abort":
                bad = {k: v for k, v in grad_norms(grads).items() if not math.isfinite(v)}
                raise TrainingDiverged(f"non-finite gradient at step {step} (lr={lr:.3g}): {bad}")
            log.warning("skipping step %d: non-finite gradient", step)
            skipped += 1
            hist[step] = (step, lval, lr)
            continue
        if config.grad_clip:
            grads = agc_clip(params, grads, config.grad_clip)
        opt.step(params, grads, lr)
        hist[step] = (step, lval, lr)
    params.zero_grad()
    return TrainResult(params, hist, config.seed, time.perf_counter() - t0, skipped)


def train(model: Model, X: np.ndarray, Y: np.ndarray, config: TrainConfig) -> TrainResult:
    """Minibatch training with replacement sampling from a seeded stream.

    The model is trained in place; NLL for mixture models, MSE otherwise.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0 or len(X) != len(Y):
        raise ValueError("dataset must be non-empty with matching rows")
    n = len(X)

    def batch(rng):
        idx = rng.integers(0, n, size=config.batch_size)
        return X[idx], Y[idx]

    return _fit(model, batch, config)


def window_sampler(trajectories: np.ndarray, window: int, batch: int) -> BatchFn:
    """Uniform sub-trajectory windows; inputs ``x_t``, targets ``x_{t+1} - x_t``."""
    traj = np.asarray(trajectories, dtype=np.float64)
    n_traj, length, _ = traj.shape
    if length < window + 1:
        raise ValueError(f"trajectory length {length} shorter than window {window} + 1")

    def sample(rng):
        ti = rng.integers(0, n_traj, size=batch)
        si = rng.integers(0, length - window, size=batch)
        steps = si[:, None] + np.arange(window + 1)[None, :]
        seg = traj[ti[:, None], steps]                # [B, window+1, d]
        seg = np.transpose(seg, (1, 0, 2))            # time-major
        return np.ascontiguousarray(seg[:-1]), np.ascontiguousarray(seg[1:] - seg[:-1])

    return sample


def train_rnn_mdn(model: Model, trajectories: np.ndarray, config: TrainConfig,
                  expected_params: int | None = None) -> TrainResult:
    """Truncated BPTT over windows of ``config.window`` steps."""
    if model.kind != "rnn_mdn":
        raise ValueError("train_rnn_mdn needs an rnn_mdn model")
    if expected_params is not None and model.n_params() != expected_params:
        raise ValueError(f"model has {model.n_params()} parameters, expected {expected_params}")
    return _fit(model, window_sampler(trajectories, config.window, config.batch_size), config)


# ------------------------------------------------------------------ ensembles
@dataclass
class MemberOutcome:
    seed: int
    model: Model | None
    result: TrainResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _run_member(args):
    make_model, fit, seed = args
    model = make_model(seed)
    try:
        res = fit(model, seed)
    except (TrainingDiverged, FloatingPointError, ValueError) as exc:
        return MemberOutcome(seed, None, None, f"{type(exc).__name__}: {exc}")
    return MemberOutcome(seed, model, res)


def train_ensemble(make_model: Callable[[int], Model], fit: Callable[[Model, int], TrainResult],
                   seeds: list[int], workers: int = 1) -> list[MemberOutcome]:
    """Independent members differing only in seed.

    ``make_model(seed)`` builds an initialised model and ``fit(model, seed)``
    trains it.  Both must be picklable when ``workers > 1``.  Failed members
    are returned with ``error`` set rather than raised.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one ensemble member")
    jobs = [(make_model, fit, s) for s in seeds]
    if workers <= 1 or len(seeds) == 1:
        outcomes = [_run_member(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_member, jobs))
    for o in outcomes:
        if not o.ok:
            log.warning("ensemble member seed=%d failed: %s", o.seed, o.error)
    return outcomes
