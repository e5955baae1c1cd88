"""Benchmark potentials and the controlled overdamped Langevin integrator.

    dX = (-grad V(X) + sigma * u(X)) dt + sigma dW

is stepped with explicit Euler-Maruyama; the control is evaluated at the
pre-step state. Each step adds ``-u.xi sqrt(dt) - |u|^2 dt / 2`` to the
log-weight, using the same ``xi`` that moved the path, so ``exp(log_weight)``
reweights controlled paths back to the uncontrolled path measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import CatalogError, DivergenceError, NonFiniteError
from .rng import stream_keys


@dataclass(frozen=True)
class PotentialSystem:
    name: str
    dim: int
    sigma: float
    kind: int
    box: tuple[tuple[float, float], ...]
    oracle_bounds: tuple[tuple[float, float], ...]
    _V: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)

    def V(self, x):
        """Potential energy; accepts one point or a batch ``(n, dim)``."""
        xb, single = _as_batch(x, self.dim)
        v = self._V(xb)
        return float(v[0]) if single else v

    def gradV(self, x):
        xb, single = _as_batch(x, self.dim)
        g = kernels.grad_v_np(self.kind, xb)
        return g[0] if single else g

    def with_sigma(self, sigma: float) -> "PotentialSystem":
        if not sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        return PotentialSystem(self.name, self.dim, float(sigma), self.kind, self.box,
                               self.oracle_bounds, self._V)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        if dim == 1 and x.shape[0] != 1:
            return x.reshape(-1, 1), False
        return x.reshape(1, -1), True
    return x, False


def _v_triplewell(x):
    px, py = x[:, 0], x[:, 1]
    return (3.0 * np.exp(-px ** 2 - (py - 1.0 / 3.0) ** 2)
            - 3.0 * np.exp(-px ** 2 - (py - 5.0 / 3.0) ** 2)
            - 5.0 * np.exp(-(px - 1.0) ** 2 - py ** 2)
            - 5.0 * np.exp(-(px + 1.0) ** 2 - py ** 2)
            + 0.2 * px ** 4 + 0.2 * (py - 1.0 / 3.0) ** 4)


CATALOG = ("harmonic", "doublewell1d", "doublewell2d", "triplewell2d")
# V = 0: not confining, only useful to exercise the oracle's degeneracy guard
EXTRA_SYSTEMS = ("flat",)


def catalog_potential(name: str, sigma: float | None = None, dim: int | None = None) -> PotentialSystem:
    """Benchmark system by name; ``sigma`` and (harmonic/flat only) ``dim`` override defaults."""
    if name == "harmonic":
        d = dim or 1
        return PotentialSystem(
            name, d, math.sqrt(2.0) if sigma is None else float(sigma), kernels.POT_HARMONIC,
            ((-3.0, 3.0),) * d, ((-6.0, 6.0),) * d, lambda x: 0.5 * np.sum(x * x, axis=1),
        )
    if dim is not None and name != "flat" and dim != _FIXED_DIMS.get(name, dim):
        raise ValueError(f"{name} is {_FIXED_DIMS[name]}-dimensional")
    if name == "doublewell1d":
        return PotentialSystem(
            name, 1, 1.0 if sigma is None else float(sigma), kernels.POT_DOUBLEWELL1D,
            ((-2.0, 2.0),), ((-2.5, 2.5),), lambda x: (x[:, 0] ** 2 - 1.0) ** 2,
        )
    if name == "doublewell2d":
        return PotentialSystem(
            name, 2, 1.0 if sigma is None else float(sigma), kernels.POT_DOUBLEWELL2D,
            ((-2.0, 2.0), (-2.5, 2.5)), ((-2.5, 2.5), (-3.5, 3.5)),
            lambda x: (x[:, 0] ** 2 - 1.0) ** 2 + 0.5 * x[:, 1] ** 2,
        )
    if name == "triplewell2d":
        return PotentialSystem(
            name, 2, 1.0 if sigma is None else float(sigma), kernels.POT_TRIPLEWELL2D,
            ((-2.0, 2.0), (-1.5, 2.5)), ((-2.5, 2.5), (-2.0, 3.0)), _v_triplewell,
        )
    if name == "flat":
        d = dim or 1
        return PotentialSystem(
            name, d, 1.0 if sigma is None else float(sigma), kernels.POT_FLAT,
            ((-2.0, 2.0),) * d, ((-2.0, 2.0),) * d, lambda x: np.zeros(x.shape[0]),
        )
    raise CatalogError(f"unknown system {name!r}; choose one of {', '.join(CATALOG + EXTRA_SYSTEMS)}")


_FIXED_DIMS = {"doublewell1d": 1, "doublewell2d": 2, "triplewell2d": 2}


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n_steps: int
    master_seed: int = 0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def tau(self) -> float:
        return self.dt * self.n_steps

    @classmethod
    def from_tau(cls, tau: float, dt: float, master_seed: int = 0) -> "SimConfig":
        """Pick ``n_steps = round(tau / dt)`` and adjust dt so dt*n_steps == tau."""
        n = max(1, int(round(tau / dt)))
        return cls(dt=tau / n, n_steps=n, master_seed=master_seed)


@dataclass
class ControlledPath:
    states: np.ndarray  # (n_steps + 1, dim)
    log_weight: float
    seed_used: int

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


def em_step(x, drift, sigma: float, dt: float, xi):
    """One Euler-Maruyama update ``x + drift*dt + sigma*sqrt(dt)*xi``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    for name, arr in (("x", x), ("drift", drift), ("xi", xi)):
        a = np.atleast_1d(np.asarray(arr, dtype=np.float64))
        bad = np.nonzero(~np.isfinite(a))[0]
        if bad.size:
            raise NonFiniteError(f"non-finite {name}[{bad[0]}] = {a[bad[0]]}")
    if not math.isfinite(sigma):
        raise NonFiniteError(f"non-finite sigma = {sigma}")
    x = np.asarray(x, dtype=np.float64)
    return x + np.asarray(drift, dtype=np.float64) * dt + sigma * math.sqrt(dt) * np.asarray(xi, dtype=np.float64)


def pack_control(control, dim: int):
    """Translate a control into what the kernels accept.

    Control objects expose ``packed(dim)`` (array form for the compiled
    kernel, or None) and ``evaluate(x, t)``; a bare callable ``u(x)`` on
    ``(n, dim)`` batches is also accepted and runs on the numpy path.
    """
    if control is None:
        return None
    if hasattr(control, "packed"):
        packed = control.packed(dim)
        if packed is not None:
            return packed
        return control.evaluate
    if callable(control):
        return lambda x, t: control(x)
    raise TypeError(f"control must be callable or None, got {type(control).__name__}")


def simulate_shots(system: PotentialSystem, x0s, cfg: SimConfig, point_index, replica_index,
                   control=None, record: bool = False):
    """Run a batch of shots; shot ``s`` starts at ``x0s[s]`` with id ``(point_index[s], replica_index[s])``.

    Returns ``(endpoints, log_weights, fail_step, states)``; no exception
    is raised for diverged shots, they are flagged in ``fail_step``.
    """
    x0s = np.asarray(x0s, dtype=np.float64).reshape(-1, system.dim)
    if not np.all(np.isfinite(x0s)):
        raise NonFiniteError("non-finite start point")
    keys = np.broadcast_to(stream_keys(cfg.master_seed, point_index, replica_index), (len(x0s),))
    packed = pack_control(control, system.dim)
    return kernels.simulate_batch(x0s, keys, cfg.dt, cfg.n_steps, system.sigma, system.kind,
                                  packed, record=record)


def simulate(system: PotentialSystem, x0, cfg: SimConfig, control=None,
             shot_id: tuple[int, int] = (0, 0)) -> ControlledPath:
    """Integrate a single shot and keep its full trajectory."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(system.dim)
    end, logw, fail, states = simulate_shots(system, x0[None], cfg, shot_id[0], shot_id[1],
                                             control=control, record=True)
    if fail[0] >= 0:
        raise DivergenceError(
            f"trajectory diverged at step {fail[0]} (shot {tuple(shot_id)}); "
            "dt too large or control blow-up",
            step=int(fail[0]), shot=tuple(shot_id),
        )
    states = states[0]
    states[0] = x0  # bit-exact start, independent of backend
    seed = int(stream_keys(cfg.master_seed, shot_id[0], shot_id[1])[0])
    return ControlledPath(states=states, log_weight=float(logw[0]), seed_used=seed)
