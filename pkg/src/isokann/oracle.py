"""Grid ground truth for the diffusion generator and its Koopman semigroup.

The generator ``L f = -grad V . grad f + (sigma^2 / 2) lap f`` is discretized
with central differences on a tensor grid; boundaries are reflecting
(zero-flux, mirrored ghost node), so constants stay in the kernel. The
semigroup ``exp(tau L)`` is applied with Crank-Nicolson substeps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import RegularGridInterpolator

from .errors import ConvergenceError, DegeneracyError, IsokannError
from .koopman import ShiftScaleParams, shift_scale
from .sde import PotentialSystem

log = logging.getLogger(__name__)


@dataclass
class GridOperator:
    axes: list[np.ndarray]
    L: np.ndarray
    sigma: float
    V: np.ndarray  # potential at the nodes, flattened like ``points``
    upwind: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interpolate(self, values, x) -> np.ndarray:
        """Linear interpolation of a grid function at points ``x`` (n, dim)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, len(self.axes))
        if len(self.axes) == 1:
            return np.interp(x[:, 0], self.axes[0], values)
        f = RegularGridInterpolator(self.axes, np.asarray(values).reshape(self.shape),
                                    bounds_error=False, fill_value=None)
        return f(x)


def _axis_ops(n, h):
    """Central first derivative, upwind pair and Neumann Laplacian on one axis."""
    d_c = np.zeros((n, n))
    d_f = np.zeros((n, n))
    d_b = np.zeros((n, n))
    lap = np.zeros((n, n))
    for i in range(1, n - 1):
        d_c[i, i - 1], d_c[i, i + 1] = -0.5 / h, 0.5 / h
        d_f[i, i], d_f[i, i + 1] = -1.0 / h, 1.0 / h
        d_b[i, i - 1], d_b[i, i] = -1.0 / h, 1.0 / h
        lap[i, i - 1], lap[i, i], lap[i, i + 1] = 1.0 / h**2, -2.0 / h**2, 1.0 / h**2
    # mirrored ghost node: f'(boundary) = 0, so derivative rows vanish
    lap[0, 0], lap[0, 1] = -2.0 / h**2, 2.0 / h**2
    lap[-1, -1], lap[-1, -2] = -2.0 / h**2, 2.0 / h**2
    return d_c, d_f, d_b, lap


def _embed(op_1d, axis, shape):
    mats = [np.eye(s) for s in shape]
    mats[axis] = op_1d
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def build_generator(system: PotentialSystem, bounds=None, n_nodes=None,
                    upwind: bool = False) -> GridOperator:
    """Dense finite-difference generator of ``system`` on a tensor grid.

    ``n_nodes`` is per axis (default 400 in 1D, 60 in 2D). With
    ``upwind=True`` the drift uses one-sided differences in the flow
    direction, which makes every off-diagonal entry non-negative.
    """
    dim = system.dim
    bounds = tuple(tuple(b) for b in (bounds or system.oracle_bounds))
    if len(bounds) != dim:
        raise ValueError(f"need {dim} (lo, hi) bounds, got {bounds}")
    n_nodes = n_nodes or (400 if dim == 1 else 60)
    counts = (n_nodes,) * dim if np.isscalar(n_nodes) else tuple(n_nodes)
    if min(counts) < 50:
        raise ValueError(f"grid needs at least 50 nodes per axis, got {counts}")
    if dim > 2:
        raise ValueError("grid oracle supports 1D and 2D systems only")
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    drift = -system.gradV(pts).reshape(-1, dim)
    V = np.asarray(system.V(pts), dtype=np.float64).reshape(-1)
    D = 0.5 * system.sigma ** 2
    L = np.zeros((len(pts), len(pts)))
    for ax in range(dim):
        h = axes[ax][1] - axes[ax][0]
        d_c, d_f, d_b, lap = (_embed(m, ax, counts) for m in _axis_ops(counts[ax], h))
        mu = drift[:, ax][:, None]
        if upwind:
            L += np.where(mu > 0, mu * d_f, mu * d_b)
        else:
            L += mu * d_c
        L += D * lap
    if np.ptp(V) > 0 and _leaks_outward(pts, drift, bounds):
        log.warning("potential decreases across the grid boundary (a well may lie outside); "
                    "widen the bounds %s", bounds)
    return GridOperator(axes=axes, L=L, sigma=system.sigma, V=V, upwind=upwind)


def _leaks_outward(pts, drift, bounds) -> bool:
    """True if the drift points out of the box somewhere on its boundary."""
    for ax, (lo, hi) in enumerate(bounds):
        if np.any(drift[pts[:, ax] == lo, ax] < 0) or np.any(drift[pts[:, ax] == hi, ax] > 0):
            return True
    return False


class Propagator:
    """Crank-Nicolson approximation of ``exp(tau L)`` with ``n_substeps`` steps."""

    def __init__(self, op: GridOperator, tau: float, n_substeps: int = 100):
        if tau < 0:
            raise ValueError("tau must be non-negative")
        if n_substeps != 0 and n_substeps < 10:
            raise ValueError(f"n_substeps must be 0 (identity) or >= 10, got {n_substeps}")
        self.tau = float(tau)
        self.n_substeps = int(n_substeps) if tau > 0 else 0
        if self.n_substeps:
            delta = self.tau / self.n_substeps
            eye = np.eye(op.n)
            with np.errstate(all="raise"):
                try:
                    self._lu = sla.lu_factor(eye - 0.5 * delta * op.L, check_finite=True)
                except (sla.LinAlgError, FloatingPointError, ValueError) as exc:
                    raise IsokannError(f"Crank-Nicolson factorization failed: {exc}") from exc
            self._rhs = eye + 0.5 * delta * op.L

    def __call__(self, f) -> np.ndarray:
        f = np.array(f, dtype=np.float64)
        for _ in range(self.n_substeps):
            f = sla.lu_solve(self._lu, self._rhs @ f)
        if not np.all(np.isfinite(f)):
            raise IsokannError("Crank-Nicolson propagation produced non-finite values")
        return f


def propagate(op: GridOperator, f, tau: float, n_substeps: int = 100) -> np.ndarray:
    """K^tau f on the grid."""
    return Propagator(op, tau, n_substeps)(f)


def oracle_chi(op: GridOperator, tau: float, max_iters: int = 1000, tol: float = 1e-10,
               n_substeps: int = 100, f0=None):
    """Power iteration ``f <- S(K^tau f)`` on the grid until the max change is below ``tol``.

    Returns ``(chi_ref, params)`` where ``params.a`` / ``params.b`` are the
    shift-scale constants of the final step.
    """
    if np.ptp(op.V) <= 1e-12:
        raise DegeneracyError("potential is flat on the grid: no metastability, no spectral gap")
    prop = Propagator(op, tau, n_substeps)
    if f0 is None:
        f0 = op.points[:, 0]
    f, _ = shift_scale(np.asarray(f0, dtype=np.float64), tau=tau)
    for it in range(1, max_iters + 1):
        new, params = shift_scale(prop(f), tau=tau)
        change = float(np.max(np.abs(new - f)))
        f = new
        if change < tol:
            log.debug("oracle power iteration converged after %d steps", it)
            return f, params
    raise ConvergenceError(f"oracle power iteration did not reach tol={tol} in {max_iters} steps "
                           f"(last change {change:.3g})")


def generator_spectrum(op: GridOperator, k: int = 4) -> np.ndarray:
    """Leading ``k`` eigenvalues (real parts, descending) of the dense generator."""
    ev = np.sort(np.linalg.eigvals(op.L).real)[::-1]
    return ev[:k]


def dense_subdominant(op: GridOperator, tau: float) -> float:
    """Second-largest eigenvalue of the dense ``expm(tau L)``."""
    ev = np.sort(np.abs(np.linalg.eigvals(sla.expm(tau * op.L))))[::-1]
    return float(ev[1])


def ou_analytics(x0, tau: float, sigma: float):
    """Mean and variance of ``X_tau`` for ``dX = -X dt + sigma dW`` started at ``x0``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    var = 0.5 * sigma ** 2 * (1.0 - math.exp(-2.0 * tau))
    if np.ndim(x0) == 0:
        return float(x0) * math.exp(-tau), var
    return np.asarray(x0, dtype=np.float64) * math.exp(-tau), var
