"""Test NLL, the inverse-sine ground-truth posterior, NLL surfaces and MMD."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from . import kernels
from .dynamics import Dataset, forward_map

LOG_2PI = math.log(2.0 * math.pi)


# ------------------------------------------------------------------ test NLL
def test_nll(model, dataset: Dataset, per_sample: bool = False):
    """Mean per-sample ``-log p(y|x)`` over a held-out set (not per dimension)."""
    vals = model.nll(dataset.X, dataset.Y)
    return vals if per_sample else float(np.mean(vals))


test_nll.__test__ = False  # not a pytest test despite the name


# ------------------------------------------------------- ground-truth posterior
@dataclass(frozen=True)
class QuadratureGrid:
    lower: float = -1.5
    upper: float = 1.5
    n_points: int = 2001

    def __post_init__(self):
        if self.n_points < 3 or not self.upper > self.lower:
            raise ValueError("need at least 3 points on a non-empty interval")

    def nodes(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n_points)

    def log_weights(self) -> np.ndarray:
        h = (self.upper - self.lower) / (self.n_points - 1)
        w = np.full(self.n_points, h)
        w[0] = w[-1] = 0.5 * h
        return np.log(w)


def _log_likelihood(y, x, noise):
    """``log N(y; f(x), noise^2)`` with broadcasting."""
    r = (np.asarray(y) - forward_map(x)) / noise
    return -0.5 * r * r - math.log(noise) - 0.5 * LOG_2PI


def log_evidence(y, grid: QuadratureGrid = QuadratureGrid(), noise: float = 0.2) -> np.ndarray:
    """``log`` of the trapezoid estimate of ``int N(y; f(x'), noise^2) dx'``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    ll = _log_likelihood(y[:, None], grid.nodes()[None, :], noise)
    return special.logsumexp(ll + grid.log_weights()[None, :], axis=1)


def true_inverse_log_density(x, y, grid: QuadratureGrid = QuadratureGrid(), noise: float = 0.2) -> np.ndarray:
    """``log p(x|y)`` under the uniform prior, evaluated entirely in log space."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return _log_likelihood(y, x, noise) - _log_evidence_broadcast(y, grid, noise)


def _log_evidence_broadcast(y: np.ndarray, grid: QuadratureGrid, noise: float) -> np.ndarray:
    """Evidence for every entry of ``y``, computed once per distinct value."""
    uy, inv = np.unique(y.reshape(-1), return_inverse=True)
    return log_evidence(uy, grid, noise)[inv].reshape(y.shape)


def true_inverse_density(x, y, grid: QuadratureGrid = QuadratureGrid(), noise: float = 0.2,
                         return_flag: bool = False):
    """``p(x|y) = N(y; f(x), s^2) / int N(y; f(x'), s^2) dx'`` by trapezoid quadrature.

    Where the denominator underflows in ordinary floating point the density is
    reported as 0 and, with ``return_flag``, the flag is ``True`` there.
    """
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    logz = _log_evidence_broadcast(y, grid, noise)
    underflow = np.exp(logz) == 0.0
    dens = np.where(underflow, 0.0, np.exp(_log_likelihood(y, x, noise) - np.where(underflow, 0.0, logz)))
    if dens.ndim == 0:
        dens, underflow = float(dens), bool(underflow)
    return (dens, underflow) if return_flag else dens


# ------------------------------------------------------------- NLL surfaces
@dataclass
class NllSurface:
    x_grid: np.ndarray
    y_grid: np.ndarray
    nll: np.ndarray            # [len(y_grid), len(x_grid)], -log p(x | y)

    def slice_at(self, y_value: float) -> np.ndarray:
        """The row for the grid ``y`` closest to ``y_value``."""
        return self.nll[int(np.argmin(np.abs(self.y_grid - y_value)))]

    def row_mass(self) -> np.ndarray:
        """Trapezoid integral of ``exp(-nll)`` along ``x`` for every ``y`` row."""
        return np.trapezoid(np.exp(-self.nll), self.x_grid, axis=1)

    def to_rows(self) -> Iterable[tuple[float, float, float]]:
        for i, yv in enumerate(self.y_grid):
            for j, xv in enumerate(self.x_grid):
                yield float(xv), float(yv), float(self.nll[i, j])


def nll_surface(source, x_grid, y_grid, grid: QuadratureGrid = QuadratureGrid(), noise: float = 0.2) -> NllSurface:
    """Dense ``-log p(x|y)`` for ``source == "truth"`` or a trained inverse model."""
    xg = np.asarray(x_grid, dtype=np.float64)
    yg = np.asarray(y_grid, dtype=np.float64)
    if isinstance(source, str):
        if source != "truth":
            raise ValueError("source must be 'truth' or a model")
        nll = -true_inverse_log_density(xg[None, :], yg[:, None], grid, noise)
    else:
        inp = np.repeat(yg, len(xg))[:, None]
        tgt = np.tile(xg, len(yg))[:, None]
        nll = source.nll(inp, tgt).reshape(len(yg), len(xg))
    return NllSurface(xg, yg, nll)


# ------------------------------------------------------------------------ MMD
def default_scales(n: int = 64, low: float = 0.1, high: float = 50.0) -> np.ndarray:
    return np.geomspace(low, high, n)


@dataclass(frozen=True)
class KernelSweep:
    scales: np.ndarray = field(default_factory=default_scales)

    def __post_init__(self):
        if np.any(np.asarray(self.scales) <= 0):
            raise ValueError("kernel scales must be positive")


def _cloud(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError("each point cloud needs at least 2 points")
    return np.ascontiguousarray(a)


def _mmd_from_terms(sxx, sxy, syy, n1, n2, literal):
    txx = sxx / (n1 * (n1 - 1))
    tyy = syy / (n2 * (n2 - 1))
    txy = sxy / (n1 * n2)
    return txx + tyy - (1.0 if literal else 2.0) * txy


def within_sum(X, scales) -> np.ndarray:
    """Off-diagonal RBF kernel sum of one cloud; reusable across comparisons."""
    X = _cloud(X)
    return np.asarray(kernels.rbf_sums(X, X, np.atleast_1d(np.asarray(scales, dtype=np.float64)), True))


def mmd_curve(X, Y, scales, literal: bool = False, x_within: np.ndarray | None = None) -> np.ndarray:
    """Unbiased MMD^2 with an RBF kernel at every scale.

    ``literal=True`` drops the factor 2 on the cross term, reproducing a
    commonly mis-transcribed form of the estimator for comparison only.
    ``x_within`` may carry a precomputed :func:`within_sum` of ``X``.
    """
    X, Y = _cloud(X), _cloud(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("clouds live in different dimensions")
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if np.any(scales <= 0):
        raise ValueError("kernel scales must be positive")
    sxx = within_sum(X, scales) if x_within is None else np.asarray(x_within)
    sxy = np.asarray(kernels.rbf_sums(X, Y, scales, False))
    syy = within_sum(Y, scales)
    return _mmd_from_terms(sxx, sxy, syy, len(X), len(Y), literal)


def mmd_squared(X, Y, s: float, literal: bool = False) -> float:
    return float(mmd_curve(X, Y, [s], literal)[0])


def mmd_sweep(X, Y, sweep: KernelSweep = KernelSweep(), literal: bool = False,
              x_within: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """``(max over scales, curve)``; the curve has one entry per scale."""
    curve = mmd_curve(X, Y, sweep.scales, literal, x_within)
    return float(np.max(curve)), curve


def subsample_cloud(points, n: int = 10_000, seed: int = 0) -> np.ndarray:
    """At most ``n`` rows, chosen without replacement from a fixed-seed stream."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= n:
        return pts
    idx = np.sort(np.random.default_rng([seed, 99]).choice(len(pts), size=n, replace=False))
    return pts[idx]


# ------------------------------------------------------------------ reports
@dataclass(frozen=True)
class ReportRow:
    method: str
    N: int
    seed_count: int
    metric: str
    mean: float
    std: float

    FIELDS = ("method", "N", "seed_count", "metric", "mean", "std")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Population mean and std (``ddof=0``); order-independent."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values")
    return float(np.mean(v)), float(np.std(v))


def evaluate_run(models: Sequence, dataset: Dataset, method: str, N: int, metric: str = "test_nll") -> ReportRow:
    """One table cell: mean and std of ``metric`` across ensemble members."""
    if metric != "test_nll":
        raise ValueError(f"unsupported metric {metric!r}")
    vals = [test_nll(m, dataset) for m in models]
    mu, sd = mean_std(vals)
    return ReportRow(method, int(N), len(vals), metric, mu, sd)


def write_report_csv(path, rows: Iterable[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ReportRow.FIELDS)
        for r in rows:
            w.writerow([r.method, r.N, r.seed_count, r.metric, repr(r.mean), repr(r.std)])


def read_report_csv(path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        return [ReportRow(d["method"], int(d["N"]), int(d["seed_count"]), d["metric"], float(d["mean"]),
                          float(d["std"])) for d in csv.DictReader(fh)]


def write_curve_csv(path, scales, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("scale", "mmd_sq"))
        for s, v in zip(scales, curve):
            w.writerow((repr(float(s)), repr(float(v))))
