"""Monte Carlo estimates of K^tau chi, the shift-scale map and rate extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, DivergenceError, EstimateError, RegimeError
from .sde import PotentialSystem, SimConfig, simulate_shots

log = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-12


@dataclass
class KoopmanEstimate:
    x: np.ndarray
    mean: float
    variance: float
    m: int
    method: str  # "plain" | "importance"
    values: np.ndarray = field(repr=False, default=None)
    log_weights: np.ndarray = field(repr=False, default=None)

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.m)


@dataclass(frozen=True)
class ShiftScaleParams:
    a: float
    b: float
    tau: float = float("nan")
    residual_rms: float = float("nan")


@dataclass
class PointBatch:
    """Per-point statistics of one batched estimation (rows follow ``points``)."""

    points: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    values: np.ndarray  # (n_points, m); NaN where a shot diverged
    log_weights: np.ndarray
    fail_step: np.ndarray  # (n_points, m)
    method: str

    @property
    def diverged(self) -> np.ndarray:
        return np.any(self.fail_step >= 0, axis=1)

    def estimate(self, i: int) -> KoopmanEstimate:
        ok = self.fail_step[i] < 0
        return KoopmanEstimate(self.points[i].copy(), float(self.means[i]),
                               float(self.variances[i]), int(self.counts[i]), self.method,
                               self.values[i][ok], self.log_weights[i][ok])


def estimate_points(system: PotentialSystem, chi, points, m: int, cfg: SimConfig, control=None,
                    point_offset: int = 0) -> PointBatch:
    """Reweighted estimates of (K^tau chi)(x) at every row of ``points``.

    Point ``i`` uses shot ids ``(point_offset + i, 0..m-1)``. Shots that
    diverge are excluded from that point's statistics; callers decide
    whether that is fatal (see ``fail_step`` / ``diverged``).
    """
    if m < 1:
        raise ValueError(f"need m >= 1 shots, got {m}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, system.dim)
    n = len(pts)
    x0s = np.repeat(pts, m, axis=0)
    pidx = np.repeat(np.arange(point_offset, point_offset + n, dtype=np.int64), m)
    ridx = np.tile(np.arange(m, dtype=np.int64), n)
    end, logw, fail, _ = simulate_shots(system, x0s, cfg, pidx, ridx, control=control)
    ok = fail < 0
    chi_end = np.full(len(end), np.nan)
    if np.any(ok):
        chi_end[ok] = np.asarray(chi(end[ok]), dtype=np.float64).reshape(-1)
    values = np.exp(logw) * chi_end
    values = values.reshape(n, m)
    fail = fail.reshape(n, m)
    logw = logw.reshape(n, m)
    counts = np.sum(fail < 0, axis=1)
    means = np.full(n, np.nan)
    variances = np.full(n, np.nan)
    for i in range(n):
        v = values[i][fail[i] < 0]
        if v.size:
            means[i] = np.mean(v)
            variances[i] = np.var(v, ddof=1) if v.size > 1 else 0.0
    method = "plain" if control is None else "importance"
    return PointBatch(pts, means, variances, counts, values, logw, fail, method)


def mc_koopman(system: PotentialSystem, chi, x, m: int, cfg: SimConfig, control=None,
               point_index: int = 0, on_divergence: str = "raise") -> KoopmanEstimate:
    """Estimate (K^tau chi)(x) = E[Z chi(X_tau) | X_0 = x] from ``m`` shots.

    ``chi`` is any vectorized callable on ``(n, dim)`` arrays (a ChiModel
    works). With ``on_divergence="drop"`` failed shots are discarded and only
    an all-failed estimate raises.
    """
    if on_divergence not in ("raise", "drop"):
        raise ValueError("on_divergence must be 'raise' or 'drop'")
    batch = estimate_points(system, chi, np.asarray(x, dtype=np.float64).reshape(1, system.dim),
                            m, cfg, control=control, point_offset=point_index)
    fail = batch.fail_step[0]
    if np.any(fail >= 0):
        r = int(np.argmax(fail >= 0))
        if on_divergence == "raise" or batch.counts[0] == 0:
            if batch.counts[0] == 0:
                raise EstimateError(f"all {m} shots diverged at x={batch.points[0]}")
            raise DivergenceError(f"shot {(point_index, r)} diverged at step {fail[r]}",
                                  step=int(fail[r]), shot=(point_index, r))
        log.warning("dropped %d diverged shots at x=%s", m - batch.counts[0], batch.points[0])
    return batch.estimate(0)


def shift_scale(values, mode: str = "minmax", p: float = 1.0, tau: float = float("nan")):
    """Affine map of ``values`` onto [0, 1]; returns ``(scaled, params)``.

    ``minmax`` uses the extremes (``a = max - min``, ``b = min``);
    ``percentile`` uses the p-th and (100-p)-th percentiles and clamps.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("shift_scale needs at least 2 values")
    if mode == "minmax":
        lo, hi = float(np.min(v)), float(np.max(v))
    elif mode == "percentile":
        lo, hi = (float(q) for q in np.percentile(v, [p, 100.0 - p]))
    else:
        raise ValueError(f"unknown shift_scale mode {mode!r}")
    if hi - lo <= DEGENERACY_TOL:
        raise DegeneracyError(f"values collapsed to a constant (spread {hi - lo:.3g})")
    scaled = (v - lo) / (hi - lo)
    if mode == "percentile":
        scaled = np.clip(scaled, 0.0, 1.0)
    return scaled, ShiftScaleParams(a=hi - lo, b=lo, tau=tau)


def affine_fit(chi_vals, koopman_means, tau: float = float("nan")) -> ShiftScaleParams:
    """Least-squares ``koopman_means ~ a * chi_vals + b`` (with residual RMS)."""
    x = np.asarray(chi_vals, dtype=np.float64).ravel()
    y = np.asarray(koopman_means, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("affine_fit needs two equal-length sequences of >= 2 values")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx <= DEGENERACY_TOL ** 2 * x.size:
        raise DegeneracyError("rank-deficient fit: chi values are constant")
    a = float(dx @ (y - ym)) / sxx
    b = float(ym - a * xm)
    resid = y - (a * x + b)
    return ShiftScaleParams(a=a, b=b, tau=tau, residual_rms=float(np.sqrt(np.mean(resid ** 2))))


def relaxation_rate(a: float, tau: float) -> float:
    """``-ln(a) / tau`` for ``0 < a <= 1``."""
    if not 0.0 < a <= 1.0:
        raise RegimeError(f"eigenvalue estimate a={a} outside (0, 1]")
    return -math.log(a) / tau


def rate_from_params(params: ShiftScaleParams) -> tuple[float, float, float]:
    """(eigenvalue, relaxation rate, stationary level b / (1 - a))."""
    a, b, tau = params.a, params.b, params.tau
    if not 0.0 < a < 1.0:
        raise RegimeError(f"a={a} outside (0, 1): iteration not converged or system not metastable")
    if not tau > 0:
        raise ValueError(f"params carry no positive lag time (tau={tau})")
    return a, -math.log(a) / tau, b / (1.0 - a)
