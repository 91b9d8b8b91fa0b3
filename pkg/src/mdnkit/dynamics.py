"""ODE integrators, the four benchmark generators, and autoregressive rollouts.

Every generator is a pure function of its arguments: the same ``(N, seed, ...)``
gives a bit-identical :class:`Dataset`.  All randomness for one dataset comes
from ``numpy.random.default_rng([seed, TAG])`` with a per-generator tag, drawn
in a fixed order, so regeneration from the stored metadata is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from ._kernels_py import dopri5_step, gravity_rhs, lorenz_rhs

# generator stream tags (arbitrary, fixed forever)
_TAG_SINE, _TAG_GRAVITY, _TAG_SADDLE, _TAG_LORENZ = 11, 12, 13, 14

SADDLE_R_VALUES = (-1.5, -0.75, 0.0, 0.75, 1.5)
LORENZ_PARAMS = (10.0, 28.0, 8.0 / 3.0)   # sigma, rho, beta
DIVERGENCE_BOUND = 1e6


class IntegrationError(FloatingPointError):
    """State became non-finite and no clip bound was given."""


@dataclass(frozen=True)
class OdeSystem:
    """``dx/dt = rhs(t, x, params)``; ``x`` may carry leading batch axes."""

    dim: int
    rhs: Callable
    params: tuple = ()

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.rhs(t, x, *self.params)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or len(self.X) != len(self.Y):
            raise ValueError(f"X {self.X.shape} and Y {self.Y.shape} must be 2-D with equal rows")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    @property
    def d_out(self) -> int:
        return self.Y.shape[1]

    def trajectories(self) -> np.ndarray:
        """Targets reshaped to ``[N, steps, state_dim]`` for trajectory tasks."""
        return self.Y.reshape(len(self), -1, int(self.meta.get("state_dim", 1)))


# ------------------------------------------------------------------ integrators
def euler_integrate(system: OdeSystem, x0, dt: float, steps: int, clip_bound: float | None = None,
                    t0: float = 0.0) -> np.ndarray:
    """Forward Euler; returns ``steps + 1`` states including ``x0`` on axis 0."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array(x0, dtype=np.float64)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for n in range(steps):
        x = x + dt * system(t0 + n * dt, x)
        if clip_bound is not None:
            x = np.minimum(np.maximum(x, -clip_bound), clip_bound)
        elif not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at step {n + 1}")
        out[n + 1] = x
    return out


def dopri5_integrate(system: OdeSystem, x0, dt: float, t_end: float, t0: float = 0.0,
                     return_error: bool = False):
    """Fixed-step Dormand-Prince 5(4).

    The embedded 4th-order error estimate is computed at every step but never
    used to adapt ``dt``.  Returns the states on the grid ``t0 + n*dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = int(round((t_end - t0) / dt))
    y = np.array(x0, dtype=np.float64)
    out = np.empty((steps + 1,) + y.shape)
    errs = np.empty(steps)
    out[0] = y
    t = t0
    for n in range(steps):
        f = (lambda s, _t=t: system(_t, s))
        y, err = dopri5_step(f, y, dt)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at step {n + 1}")
        errs[n] = float(np.max(np.abs(err))) if err.size else 0.0
        out[n + 1] = y
        t = t0 + (n + 1) * dt
    return (out, errs) if return_error else out


def subsample_indices(steps: int, count: int) -> np.ndarray:
    """``count`` indices into ``steps + 1`` states, both endpoints included."""
    if count < 2 or count > steps + 1:
        raise ValueError(f"cannot pick {count} of {steps + 1} states")
    return np.round(np.linspace(0, steps, count)).astype(np.int64)


# ------------------------------------------------------------------ systems
def forward_map(x):
    """``f(x) = x/2 + 0.7 sin(5x)``."""
    return 0.5 * np.asarray(x) + 0.7 * np.sin(5.0 * np.asarray(x))


def saddle_system(r) -> OdeSystem:
    return OdeSystem(1, lambda t, x, r: r + x * x, (np.asarray(r, dtype=np.float64),))


def gravity_centers(n: int = 3) -> np.ndarray:
    """Bodies on the unit circle at 90, 210 and 330 degrees (apex up)."""
    ang = np.deg2rad(90.0 + 120.0 * np.arange(n))
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gravity_system(active, centers=None, G: float = 100.0, mass: float = 1.0, gamma: float = 10.0,
                   soft: float = 1e-6) -> OdeSystem:
    """State ``(x, y, vx, vy)``; acceleration ``-sum_j G M (r - c_j) / |r - c_j|^2 - gamma |v| v``."""
    centers = gravity_centers() if centers is None else np.asarray(centers, dtype=np.float64)
    act = np.atleast_2d(np.asarray(active, dtype=np.float64))    # [1 or B, bodies]
    return OdeSystem(4, lambda t, s, a, c: gravity_rhs(s, a, c, G * mass, gamma, soft), (act, centers))


def lorenz_system(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> OdeSystem:
    return OdeSystem(3, lambda t, s, a, b, c: lorenz_rhs(s, a, b, c), (sigma, rho, beta))


# ------------------------------------------------------------------ generators
def gen_inverse_sine(N: int, seed: int, noise: float = 0.2, low: float = -1.5, high: float = 1.5) -> Dataset:
    """Inverse task: input ``y = f(x) + noise``, target ``x ~ U[low, high]``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng([seed, _TAG_SINE])
    x = rng.uniform(low, high, size=N)
    y = forward_map(x) + noise * rng.standard_normal(N)
    meta = dict(generator="inverse_sine", N=N, seed=seed, noise=noise, low=low, high=high, state_dim=1)
    return Dataset(y[:, None], x[:, None], meta)


def gen_gravity(N: int, case: int, seed: int, noise: float = 0.05, input_noise: float = 0.05,
                G: float = 100.0, gamma: float = 10.0, dt: float = 0.0005, t_end: float = 1.0,
                count: int = 11, radius: float = 0.2, soft: float = 1e-6) -> Dataset:
    """Damped particle among three bodies; targets are 11 noisy 2-D positions.

    Case 1: one body, picked uniformly, is active per trajectory.
    Case 2: all bodies active; the input position carries extra noise.
    Case 3: all bodies active; clean input.
    """
    if case not in (1, 2, 3):
        raise ValueError("case must be 1, 2 or 3")
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng([seed, _TAG_GRAVITY, case])
    rad = radius * np.sqrt(rng.uniform(size=N))
    ang = rng.uniform(0.0, 2.0 * np.pi, size=N)
    pos0 = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    centers = gravity_centers()
    if case == 1:
        choice = rng.integers(0, 3, size=N)
        active = np.zeros((N, 3))
        active[np.arange(N), choice] = 1.0
    else:
        choice = np.full(N, -1)
        active = np.ones((N, 3))
    steps = int(round(t_end / dt))
    keep = subsample_indices(steps, count)
    s0 = np.concatenate([pos0, np.zeros((N, 2))], axis=1)
    states = kernels.euler_gravity(s0, active, centers, G, gamma, soft, dt, steps, keep)
    traj = states[:, :, :2] + noise * rng.standard_normal((N, count, 2))
    X = pos0 + input_noise * rng.standard_normal((N, 2)) if case == 2 else pos0.copy()
    meta = dict(generator="gravity", case=case, N=N, seed=seed, noise=noise, input_noise=input_noise,
                G=G, gamma=gamma, dt=dt, t_end=t_end, count=count, radius=radius, soft=soft, state_dim=2)
    ds = Dataset(X, traj.reshape(N, -1), meta)
    ds.attractor = choice  # type: ignore[attr-defined]
    return ds


def gen_saddle_node(N: int, seed: int, noise: float = 0.1, dt: float = 0.001, t_end: float = 5.0,
                    count: int = 20, clip: float = 10.0, low: float = -2.0, high: float = 2.0) -> Dataset:
    """``dx/dt = r + x^2`` with hidden ``r``; input ``x0``, target 20 noisy clipped states.

    The state is clamped to ``[-clip, clip]`` during integration, then noise
    is added to the subsampled states and the result clamped again.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng([seed, _TAG_SADDLE])
    x0 = rng.uniform(low, high, size=N)
    r = np.asarray(SADDLE_R_VALUES)[rng.integers(0, len(SADDLE_R_VALUES), size=N)]
    steps = int(round(t_end / dt))
    keep = subsample_indices(steps, count)
    clean = kernels.euler_saddle(x0, r, dt, steps, clip, keep)
    Y = np.clip(clean + noise * rng.standard_normal((N, count)), -clip, clip)
    meta = dict(generator="saddle_node", N=N, seed=seed, noise=noise, dt=dt, t_end=t_end, count=count,
                clip=clip, low=low, high=high, state_dim=1)
    ds = Dataset(x0[:, None], Y, meta)
    ds.r = r  # type: ignore[attr-defined]
    return ds


def lorenz_keep(steps: int, count: int) -> np.ndarray:
    """Uniform stride ``steps // count`` from ``t = 0`` (``count`` states)."""
    stride = steps // count
    if stride < 1:
        raise ValueError("count exceeds the number of steps")
    return np.arange(count, dtype=np.int64) * stride


def gen_lorenz(N_traj: int, seed: int, noise: float = 0.2, dt: float = 0.001, t_end: float = 10.0,
               count: int = 500, x0_mean=(0.0, 0.0, 24.5), x0_std: float = 1.0) -> Dataset:
    """Noisy Lorenz-63 trajectories, ``[N_traj, 500, 3]`` flattened into ``Y``.

    ``X`` holds the first observed (noisy) state of each trajectory.
    """
    if N_traj < 1:
        raise ValueError("N_traj must be >= 1")
    rng = np.random.default_rng([seed, _TAG_LORENZ])
    s0 = np.asarray(x0_mean, dtype=np.float64) + x0_std * rng.standard_normal((N_traj, 3))
    steps = int(round(t_end / dt))
    keep = lorenz_keep(steps, count)
    sigma, rho, beta = LORENZ_PARAMS
    clean = kernels.dopri5_lorenz(s0, sigma, rho, beta, dt, steps, keep)
    traj = clean + noise * rng.standard_normal(clean.shape)
    meta = dict(generator="lorenz", N=N_traj, seed=seed, noise=noise, dt=dt, t_end=t_end, count=count,
                x0_mean=list(map(float, x0_mean)), x0_std=x0_std, state_dim=3,
                sample_dt=float(keep[1] - keep[0]) * dt)
    return Dataset(traj[:, 0, :], traj.reshape(N_traj, -1), meta)


def increment_pairs(trajectories: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All consecutive ``(x_t, x_{t+1} - x_t)`` pairs, pooled over trajectories."""
    tr = np.asarray(trajectories, dtype=np.float64)
    d = tr.shape[-1]
    return tr[:, :-1].reshape(-1, d), (tr[:, 1:] - tr[:, :-1]).reshape(-1, d)


GENERATORS = {
    "inverse_sine": gen_inverse_sine,
    "gravity": gen_gravity,
    "saddle_node": gen_saddle_node,
    "lorenz": gen_lorenz,
}


def regenerate(meta: dict) -> Dataset:
    """Rebuild a dataset from its metadata (as stored in a dataset file header)."""
    meta = dict(meta)
    name = meta.pop("generator")
    meta.pop("state_dim", None)
    meta.pop("sample_dt", None)
    if name == "lorenz":
        meta["N_traj"] = meta.pop("N")
        meta["x0_mean"] = tuple(meta["x0_mean"])
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}") from None
    return gen(**meta)


# ------------------------------------------------------------------ rollouts
@dataclass
class Rollout:
    states: np.ndarray          # [B, steps + 1, d]; rows after divergence are NaN
    diverged: np.ndarray        # [B] bool
    lengths: np.ndarray         # [B] number of valid states

    def pooled(self, burn_in: int = 0) -> np.ndarray:
        """Valid states after ``burn_in`` steps, pooled into ``[M, d]``."""
        pts = self.states[:, burn_in:].reshape(-1, self.states.shape[-1])
        return pts[np.all(np.isfinite(pts), axis=1)]


def _gru_step_arrays(params, x, h):
    wi, wh, bh, bin_ = (params[f"gru.{k}"].data for k in ("wi", "wh", "bh", "bi_n"))
    gi = np.ascontiguousarray((x @ wi)[None])
    hs, _ = kernels.gru_forward(gi, np.ascontiguousarray(h), wh, bh, bin_)
    return hs[1]


def rollout(model, x0, steps: int, rng: np.random.Generator, mode: str | None = None,
            prune: float = 0.0, bound: float = DIVERGENCE_BOUND) -> Rollout:
    """Autoregressive ``x_{t+1} = x_t + dx_t`` from ``x0[B, d]``.

    ``mdn_sample`` draws ``dx`` from the predicted mixture, ``rnn_mdn_sample``
    does the same while carrying the GRU state, ``mse_point`` uses the point
    prediction.  Trajectories whose state leaves ``[-bound, bound]`` stop and
    are flagged.
    """
    from .mdn import MixtureParams, mdn_sample, transform_head  # local: mdn imports nn
    from .diffcore import Tensor

    if mode is None:
        mode = {"mdn": "mdn_sample", "rnn_mdn": "rnn_mdn_sample", "mse": "mse_point"}[model.kind]
    expected = {"mdn_sample": "mdn", "rnn_mdn_sample": "rnn_mdn", "mse_point": "mse"}
    if expected.get(mode) != model.kind:
        raise ValueError(f"mode {mode!r} does not fit a {model.kind} model")
    x = np.array(x0, dtype=np.float64, ndmin=2)
    B, d = x.shape
    out = np.full((B, steps + 1, d), np.nan)
    out[:, 0] = x
    alive = np.ones(B, dtype=bool)
    lengths = np.full(B, steps + 1)
    h = np.zeros((B, model.width)) if mode == "rnn_mdn_sample" else None
    for t in range(steps):
        if mode == "mse_point":
            dx = model.predict_raw(x)
        else:
            if mode == "rnn_mdn_sample":
                h = _gru_step_arrays(model.params, x, h)
                raw = h @ model.params["head.w"].data + model.params["head.b"].data
            else:
                raw = model.predict_raw(x)
            mp: MixtureParams = transform_head(Tensor(raw), model.K, d, model.eps, model.elu_scale).numpy()
            dx = mdn_sample(mp, rng, 1, prune=prune)[:, 0, :]
        x = x + dx
        bad = alive & ~np.all(np.isfinite(x) & (np.abs(x) <= bound), axis=1)
        if bad.any():
            lengths[bad] = t + 1
            alive &= ~bad
        x[~alive] = 0.0          # keep the batch finite; these rows are masked out
        out[alive, t + 1] = x[alive]
    return Rollout(out, ~alive, lengths)


def radial_extent(points: np.ndarray, center: np.ndarray | None = None) -> float:
    """Mean Euclidean distance from ``center`` (default: the cloud's centroid)."""
    pts = np.asarray(points, dtype=np.float64)
    c = pts.mean(axis=0) if center is None else np.asarray(center)
    return float(np.mean(np.linalg.norm(pts - c, axis=1)))


def lorenz_fixed_points(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> np.ndarray:
    a = math.sqrt(beta * (rho - 1.0))
    return np.array([[0.0, 0.0, 0.0], [a, a, rho - 1.0], [-a, -a, rho - 1.0]])
