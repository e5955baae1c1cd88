"""Importance-sampling controls built from chi, and weight diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .koopman import ShiftScaleParams, estimate_points
from .model import CHI_CLAMP, ChiModel, forward_and_grad_input
from .sde import PotentialSystem, SimConfig, _as_batch

log = logging.getLogger(__name__)


class ZeroControl:
    def packed(self, dim):
        return kernels.zero_packed(dim)

    def __call__(self, x, t=0.0):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    evaluate = __call__


class ConstantControl:
    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=np.float64))

    def packed(self, dim):
        const = np.broadcast_to(self.c, (dim,)).copy()
        return kernels.PackedControl(kernels.CTRL_CONSTANT, const, np.zeros(1),
                                     np.array([dim, 1], dtype=np.int64), 0.0, 0.0, 0.0,
                                     np.inf, False, 1.0)

    def __call__(self, x, t=0.0):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(self.c, x.shape).copy()

    evaluate = __call__


class ChiControl:
    """``u(x) = sigma * grad h / h`` with ``h = a chi + b``, norm-clipped at ``u_max``.

    ``chi`` is a ChiModel (evaluated inside the compiled kernel) or any
    object with vectorized ``forward`` and ``grad_input`` (evaluated from
    Python on the numpy path, e.g. an AffineChi).

    With ``time_dependent=True`` the lag-``tau`` relation is interpolated in
    time: ``h(x, t) = a**((tau - t)/tau) (chi - chi_inf) + chi_inf`` with
    ``chi_inf = b / (1 - a)``, which equals ``a chi + b`` at ``t = 0`` and
    ``chi`` at ``t = tau``.
    """

    def __init__(self, chi, params: ShiftScaleParams, sigma: float, u_max: float,
                 time_dependent: bool = False, tau: float | None = None):
        if not params.a > 0:
            raise ValueError(f"optimal control needs a > 0, got a={params.a}")
        if sigma > 0 and not u_max > 0:
            raise ValueError(f"u_max must be positive, got {u_max}")
        if time_dependent:
            tau = params.tau if tau is None else tau
            if not (0 < params.a < 1 and tau and tau > 0):
                raise ValueError("time-dependent control needs 0 < a < 1 and a positive tau")
        self.chi = chi.copy()
        self.params = params
        self.sigma = float(sigma)
        self.u_max = float(u_max)
        self.time_dependent = bool(time_dependent)
        self.tau = float(tau) if tau else 1.0
        self._flat = self.chi.flat() if isinstance(self.chi, ChiModel) else None

    def packed(self, dim):
        if dim != self.chi.dim:
            raise ValueError(f"control built for dim {self.chi.dim}, system has dim {dim}")
        if self._flat is None:
            return None
        return self._pack()

    def _pack(self):
        dim = self.chi.dim
        return kernels.PackedControl(
            kernels.CTRL_CHI, np.zeros(dim),
            np.zeros(1) if self._flat is None else self._flat,
            np.asarray(getattr(self.chi, "dims", (dim, 1)), dtype=np.int64),
            float(self.params.a), float(self.params.b), self.sigma, self.u_max,
            self.time_dependent, self.tau,
        )

    def evaluate(self, x, t=0.0):
        """Batch evaluation at time ``t``: ``x`` is (n, dim), returns (n, dim)."""
        xb = np.asarray(x, dtype=np.float64).reshape(-1, self.chi.dim)
        if self._flat is not None:
            chi, grad = forward_and_grad_input(self.chi.weights, self.chi.biases, xb)
        else:
            chi = np.asarray(self.chi.forward(xb), dtype=np.float64).reshape(-1)
            grad = np.asarray(self.chi.grad_input(xb), dtype=np.float64).reshape(-1, self.chi.dim)
        pc = self._pack()
        u = kernels.chi_control_np(chi, grad, t, pc)
        if not self.time_dependent and np.any(pc.a * np.clip(chi, CHI_CLAMP, 1 - CHI_CLAMP) + pc.b
                                              < kernels.DENOM_FLOOR):
            log.info("control denominator below %g; using clipped gradient direction",
                     kernels.DENOM_FLOOR)
        return u

    def __call__(self, x, t=0.0):
        xb, single = _as_batch(x, self.chi.dim)
        u = self.evaluate(xb, t)
        return u[0] if single else u


def optimal_control_from_chi(chi, params: ShiftScaleParams, sigma: float,
                             u_max: float | None = None, time_dependent: bool = False) -> ChiControl:
    """Importance-sampling control ``sigma * a grad chi / (a chi + b)``; ``u_max`` defaults to ``10 sigma``."""
    return ChiControl(chi, params, sigma, 10.0 * sigma if u_max is None else u_max,
                      time_dependent=time_dependent)


@dataclass
class WeightDiagnostics:
    ess: float
    log_weight_mean: float
    log_weight_var: float
    variance_ratio: float = float("nan")


def effective_sample_size(log_weights) -> float:
    lw = np.asarray(log_weights, dtype=np.float64)
    w = np.exp(lw - np.max(lw))
    return float(np.sum(w) ** 2 / np.sum(w * w))


def weight_diagnostics(paths, chi_endpoint_values, plain_variance: float | None = None) -> WeightDiagnostics:
    """ESS and log-weight moments for a set of shots.

    ``paths`` holds ControlledPath objects or raw log-weights.
    ``variance_ratio = plain_variance / var(w * chi)`` when a matched plain
    variance is supplied.
    """
    lw = np.array([getattr(p, "log_weight", p) for p in paths], dtype=np.float64)
    vals = np.asarray(chi_endpoint_values, dtype=np.float64).ravel()
    if lw.size == 0:
        raise ValueError("weight_diagnostics needs at least one shot")
    if lw.size != vals.size:
        raise ValueError(f"{lw.size} paths vs {vals.size} endpoint values")
    finite = lw[np.isfinite(lw)]
    ratio = float("nan")
    if plain_variance is not None:
        per_shot = np.exp(lw) * vals
        is_var = float(np.var(per_shot, ddof=1)) if per_shot.size > 1 else 0.0
        ratio = _ratio(plain_variance, is_var)
    return WeightDiagnostics(
        ess=effective_sample_size(lw),
        log_weight_mean=float(np.mean(finite)) if finite.size else float("nan"),
        log_weight_var=float(np.var(finite)) if finite.size else float("nan"),
        variance_ratio=ratio,
    )


def _ratio(plain_var, is_var):
    if is_var > 0:
        return plain_var / is_var
    return math.inf if plain_var > 0 else float("nan")


@dataclass
class VarianceRow:
    x: np.ndarray
    plain_mean: float
    plain_var: float
    is_mean: float
    is_var: float
    ratio: float
    ess: float

    def as_tuple(self):
        return (*np.atleast_1d(self.x), self.plain_mean, self.plain_var, self.is_mean,
                self.is_var, self.ratio, self.ess)


def variance_header(dim: int) -> list[str]:
    xs = ["x"] if dim == 1 else [f"x{j}" for j in range(dim)]
    return xs + ["plain_mean", "plain_var", "is_mean", "is_var", "ratio", "ess"]


def variance_study(system: PotentialSystem, chi: ChiModel, params: ShiftScaleParams, x_grid,
                   m: int, cfg: SimConfig, control=None, u_max: float | None = None,
                   time_dependent: bool = False) -> list[VarianceRow]:
    """Plain vs importance-sampled estimates of K^tau chi, ``m`` shots each.

    Plain shots use point ids ``0..n-1`` and IS shots ``n..2n-1`` so the two
    estimators are statistically independent. ``control`` overrides the
    optimal control built from ``(chi, params)``.
    """
    pts = np.asarray(x_grid, dtype=np.float64).reshape(-1, system.dim)
    n = len(pts)
    if control is None:
        control = optimal_control_from_chi(chi, params, system.sigma, u_max,
                                           time_dependent=time_dependent)
    plain = estimate_points(system, chi, pts, m, cfg, control=None, point_offset=0)
    imp = estimate_points(system, chi, pts, m, cfg, control=control, point_offset=n)
    rows = []
    for i in range(n):
        ok = imp.fail_step[i] < 0
        ess = effective_sample_size(imp.log_weights[i][ok]) if np.any(ok) else float("nan")
        rows.append(VarianceRow(
            x=pts[i].copy(), plain_mean=float(plain.means[i]), plain_var=float(plain.variances[i]),
            is_mean=float(imp.means[i]), is_var=float(imp.variances[i]),
            ratio=_ratio(float(plain.variances[i]), float(imp.variances[i])), ess=ess,
        ))
    return rows
