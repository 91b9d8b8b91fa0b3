"""Experiment plumbing shared by the command line and the acceptance suite.

Everything here is driven by a :class:`~mdnkit.config.RunConfig`: which data
to generate, which model to build, how to train each ensemble member and how
to score it.  Trained members can be cached on disk keyed by a hash of the
config, so repeated evaluations never retrain.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dynamics as dy
from . import metrics as me
from . import persist
from .config import RunConfig
from .mdn import Model, build_model, component_report, mixture_entropy
from .optim import TrainResult, train, train_ensemble, train_rnn_mdn

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ data
def gravity_case(cfg: RunConfig) -> int:
    return int(cfg.experiment[-1])


def make_dataset(cfg: RunConfig, N: int, seed: int) -> dy.Dataset:
    e = cfg.experiment
    if e == "inverse_sine":
        return dy.gen_inverse_sine(N, seed)
    if e.startswith("gravity"):
        return dy.gen_gravity(N, gravity_case(cfg), seed)
    if e == "saddle_node":
        return dy.gen_saddle_node(N, seed)
    return dy.gen_lorenz(N, seed)


def train_data(cfg: RunConfig) -> dy.Dataset:
    return make_dataset(cfg, cfg.data.N, cfg.data.seed)


def test_data(cfg: RunConfig) -> dy.Dataset:
    """Held-out set; for the Lorenz task, fresh ground-truth trajectories."""
    n = cfg.eval.rollouts if cfg.experiment == "lorenz" else cfg.data.test_N
    return make_dataset(cfg, n, cfg.data.test_seed)


def model_dims(cfg: RunConfig, ds: dy.Dataset) -> tuple[int, int]:
    if cfg.experiment == "lorenz":
        return 3, 3
    return ds.d_in, ds.d_out


# ------------------------------------------------------------------ models
def make_model(cfg: RunConfig, d_in: int, d_out: int, seed: int) -> Model:
    return build_model(cfg.model, d_in, d_out, K=cfg.K, width=cfg.backbone.width, layers=cfg.backbone.layers,
                       seed=seed, eps=cfg.eps, elu_scale=cfg.elu_scale)


LORENZ_EXPECTED_PARAMS = {"mse": 66_947, "mdn": 74_687, "rnn_mdn": 58_040}


def fit_model(cfg: RunConfig, ds: dy.Dataset, model: Model, seed: int) -> TrainResult:
    tc = cfg.train.to_train_config(seed)
    if cfg.experiment == "lorenz":
        traj = ds.trajectories()
        if cfg.model == "rnn_mdn":
            return train_rnn_mdn(model, traj, tc)
        X, Y = dy.increment_pairs(traj)
        return train(model, X, Y, tc)
    return train(model, ds.X, ds.Y, tc)


def config_key(cfg: RunConfig, seed: int) -> str:
    d = cfg.to_dict()
    for k in ("workers", "out", "ensemble_size", "seed", "eval"):
        d.pop(k, None)
    d["member_seed"] = seed
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _member(cfg: RunConfig, ds: dy.Dataset, cache_dir, seed: int):
    """Train (or load from cache) one member; picklable via functools.partial."""
    d_in, d_out = model_dims(cfg, ds)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cfg.experiment}-{cfg.model}-K{cfg.K}-N{cfg.data.N}-{config_key(cfg, seed)}.ckpt"
        if path.exists():
            model, head = persist.load_checkpoint(path, with_header=True)
            hist = np.asarray(head["extra"].get("history_tail", []), dtype=np.float64).reshape(-1, 3)
            return model, TrainResult(model.params, hist, seed, float(head["extra"].get("seconds", 0.0)))
    model = make_model(cfg, d_in, d_out, seed)
    res = fit_model(cfg, ds, model, seed)
    if path is not None:
        tail = res.history[-100:].tolist()
        persist.save_checkpoint(path, model, seed=seed, step=cfg.train.iterations,
                                extra={"history_tail": tail, "seconds": res.seconds, "config": cfg.to_dict()})
    return model, res


@dataclass
class Ensemble:
    cfg: RunConfig
    models: list[Model] = field(default_factory=list)
    results: list[TrainResult] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)


def train_members(cfg: RunConfig, ds: dy.Dataset | None = None, cache_dir=None) -> Ensemble:
    """Every ensemble member for ``cfg``; failed members are recorded, not raised."""
    ds = train_data(cfg) if ds is None else ds
    d_in, d_out = model_dims(cfg, ds)
    make = functools.partial(_build_member, cfg, d_in, d_out)
    fit = functools.partial(_fit_into, cfg, ds, cache_dir)
    outcomes = train_ensemble(make, fit, cfg.member_seeds(), workers=resolve_workers(cfg.workers))
    ens = Ensemble(cfg)
    for o in outcomes:
        if o.ok:
            ens.models.append(o.model)
            ens.results.append(o.result)
            ens.seeds.append(o.seed)
        else:
            ens.failures.append((o.seed, o.error))
    return ens


def resolve_workers(workers: int) -> int:
    return workers if workers > 0 else (os.cpu_count() or 1)


def _build_member(cfg, d_in, d_out, seed):
    return make_model(cfg, d_in, d_out, seed)


def _fit_into(cfg, ds, cache_dir, model: Model, seed: int) -> TrainResult:
    trained, res = _member(cfg, ds, cache_dir, seed)
    model.params = trained.params
    return res


def nll_row(ens: Ensemble, test: dy.Dataset, method: str | None = None) -> me.ReportRow:
    return me.evaluate_run(ens.models, test, method or ens.cfg.model, ens.cfg.data.N)


# ------------------------------------------------------------------ lorenz
@dataclass
class LorenzEval:
    method: str
    mmd_max: float
    curve: np.ndarray
    radial_extent: float
    truth_extent: float
    diverged: int
    rollout: dy.Rollout


def lorenz_truth_cloud(cfg: RunConfig, truth: dy.Dataset) -> np.ndarray:
    return truth.trajectories()[:, cfg.eval.burn_in:].reshape(-1, 3)


def lorenz_rollout(cfg: RunConfig, model: Model, truth: dy.Dataset, steps: int | None = None,
                   seed: int = 0) -> dy.Rollout:
    x0 = truth.trajectories()[:, 0, :]
    rng = np.random.default_rng([cfg.seed, seed, 77])
    return dy.rollout(model, x0, cfg.eval.rollout_steps if steps is None else steps, rng, prune=cfg.eval.prune)


def lorenz_evaluate(cfg: RunConfig, model: Model, truth: dy.Dataset, method: str | None = None,
                    cache: dict | None = None) -> LorenzEval:
    """Roll out from the ground-truth initial states and compare pooled clouds.

    Both clouds drop the first ``burn_in`` states, are cut to equal size (at
    most ``cloud_size``) with fixed-seed subsampling, and are compared with the
    maximum of the MMD^2 sweep.  ``cache`` keeps the ground-truth within-cloud
    sum between calls.
    """
    ro = lorenz_rollout(cfg, model, truth)
    pred = ro.pooled(cfg.eval.burn_in)
    gt = lorenz_truth_cloud(cfg, truth)
    n = min(len(gt), len(pred), cfg.eval.cloud_size)
    X = me.subsample_cloud(gt, n, 0)
    Y = me.subsample_cloud(pred, n, 1)
    sweep = me.KernelSweep()
    cache = {} if cache is None else cache
    if cache.get("n") != n:
        cache.update(n=n, within=me.within_sum(X, sweep.scales))
    mmd, curve = me.mmd_sweep(X, Y, sweep, x_within=cache["within"])
    centroid = gt.mean(axis=0)
    return LorenzEval(method or model.kind, mmd, curve, dy.radial_extent(pred, centroid),
                      dy.radial_extent(gt, centroid), int(ro.diverged.sum()), ro)


# ------------------------------------------------------------------ gravity
@dataclass
class InterpretGrid:
    xs: np.ndarray
    ys: np.ndarray
    mask: np.ndarray           # [n, n] inside the input disk
    alpha: np.ndarray          # [n, n, K] (NaN outside)
    entropy: np.ndarray        # [n, n]
    order: np.ndarray          # components by marginal probability
    marginal: np.ndarray

    def spread(self, k: int) -> float:
        a = self.alpha[..., k][self.mask]
        return float(a.max() - a.min())

    def argmax(self) -> np.ndarray:
        lab = np.full(self.mask.shape, -1)
        lab[self.mask] = np.argmax(self.alpha[self.mask], axis=1)
        return lab

    def regions(self) -> dict[int, int]:
        """Connected pieces (4-neighbour) of every argmax label inside the disk."""
        lab = self.argmax()
        out = {}
        for k in np.unique(lab[self.mask]):
            _, n = ndimage.label(lab == k)
            out[int(k)] = int(n)
        return out


def interpret_grid(model: Model, n: int = 41, radius: float = 0.2) -> InterpretGrid:
    xs = np.linspace(-radius, radius, n)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    mask = gx ** 2 + gy ** 2 <= radius ** 2 + 1e-12
    pts = np.stack([gx[mask], gy[mask]], axis=1)
    rep = component_report(model, pts)
    alpha = np.full(mask.shape + (model.K,), np.nan)
    alpha[mask] = rep.alpha
    ent = np.full(mask.shape, np.nan)
    ent[mask] = mixture_entropy(rep.alpha)
    return InterpretGrid(xs, xs, mask, alpha, ent, rep.order, rep.marginal)


# ------------------------------------------------------------------ saddle
def saddle_clusters(x0: float, dt: float = 0.001, t_end: float = 5.0, count: int = 20, clip: float = 10.0):
    """Noise-free targets for every hidden ``r`` at one input: ``[5, count]``."""
    steps = int(round(t_end / dt))
    keep = dy.subsample_indices(steps, count)
    r = np.asarray(dy.SADDLE_R_VALUES)
    return dy.kernels.euler_saddle(np.full(len(r), x0), r, dt, steps, clip, keep)


def saddle_mean_collapse(models: list[Model], x0: float = 0.5, noise: float = 0.1) -> dict:
    """Where MSE predictions sit relative to the convergent / divergent clusters.

    At the final time the convergent branch lies below ``conv_hi`` and the
    divergent branch above ``div_lo`` (3 noise std margins).  Returns the
    per-member final-time predictions and whether all lie strictly between.
    """
    clean = saddle_clusters(x0)
    final = clean[:, -1]
    conv = final[final < 5.0]
    div = final[final >= 5.0]
    conv_hi = float(conv.max() + 3 * noise)
    div_lo = float(div.min() - 3 * noise)
    preds = np.array([float(m.predict_raw(np.array([[x0]]))[0, -1]) for m in models])
    return {"conv_hi": conv_hi, "div_lo": div_lo, "predictions": preds,
            "between": bool(np.all((preds > conv_hi) & (preds < div_lo)))}
