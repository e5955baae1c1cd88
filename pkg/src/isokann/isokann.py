"""The learning loop: chi <- S(K^tau chi) with Monte Carlo targets.

Each outer iteration draws start points, estimates K^tau chi there (plain
Monte Carlo during warm-up, then importance sampling with the control built
from the current chi), rescales the estimates onto [0, 1] and trains the
network on them.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegeneracyError, DivergenceError
from .koopman import ShiftScaleParams, affine_fit, estimate_points, shift_scale
from .model import ChiModel, OptimizerState, fit, init_model
from .rng import derive_seed
from .sampling import effective_sample_size, optimal_control_from_chi
from .sde import PotentialSystem, SimConfig

log = logging.getLogger(__name__)

NEVER = 2**62


@dataclass
class LoopConfig:
    n_outer: int = 50
    n_points: int = 64
    m_shots: int = 256
    epochs_per_iter: int = 200
    is_enabled_after: int = 5
    resample_mode: str = "uniform_box"
    conv_tol: float = 1e-2
    validation_grid: np.ndarray | None = None
    shift_mode: str = "minmax"
    shift_percentile: float = 1.0
    control_u_max: float | None = None
    time_dependent_control: bool = False
    candidate_factor: int = 10
    reinit_each_iter: bool = False
    min_survival: float = 0.5
    box: tuple | None = None
    min_outer: int = 1

    def __post_init__(self):
        if self.is_enabled_after < 1:
            raise ValueError("is_enabled_after must be >= 1 (chi needs one plain iteration first)")
        for name in ("n_outer", "n_points", "m_shots", "epochs_per_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2 for the shift-scale step")
        if self.resample_mode not in ("uniform_box", "chi_stratified"):
            raise ValueError(f"unknown resample_mode {self.resample_mode!r}")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")


@dataclass
class IterationRecord:
    iteration: int
    method: str
    shift: ShiftScaleParams
    fit: ShiftScaleParams
    loss: float
    max_change: float
    mean_ess: float
    n_points: int
    wall_time: float


@dataclass
class LoopReport:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False

    @property
    def final_params(self) -> ShiftScaleParams:
        """Affine fit of the last iteration (the reported eigenvalue)."""
        return self.records[-1].fit

    @property
    def last_shift(self) -> ShiftScaleParams:
        return self.records[-1].shift

    def mean_fit(self, last: int = 10) -> ShiftScaleParams:
        """Affine-fit constants averaged over the last ``last`` iterations."""
        recs = self.records[-last:]
        return ShiftScaleParams(
            a=float(np.mean([r.fit.a for r in recs])), b=float(np.mean([r.fit.b for r in recs])),
            tau=recs[-1].fit.tau, residual_rms=float(np.mean([r.fit.residual_rms for r in recs])),
        )


def default_validation_grid(system: PotentialSystem, box=None, n: int | None = None) -> np.ndarray:
    box = box or system.box
    if system.dim == 1:
        return np.linspace(box[0][0], box[0][1], n or 101).reshape(-1, 1)
    axes = [np.linspace(lo, hi, n or 21) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def gauge_align(chi_a, chi_b) -> np.ndarray:
    """``chi_b`` or ``1 - chi_b``, whichever is closer to ``chi_a`` in L2 (ties keep ``chi_b``)."""
    a = np.asarray(chi_a, dtype=np.float64)
    b = np.asarray(chi_b, dtype=np.float64)
    if a.shape != b.shape or a.size < 1:
        raise ValueError("gauge_align needs two equal-length, non-empty sequences")
    if np.sum((a - (1.0 - b)) ** 2) < np.sum((a - b) ** 2):
        return 1.0 - b
    return b


def chi_discrepancy(chi_ref, chi_test) -> float:
    """Max abs difference after fixing the affine gauge on the common points.

    Both functions are min-max rescaled over the shared evaluation points
    (eigenfunctions are only defined up to an affine map, and the two sides
    may have been normalized over different domains), then reflection-aligned.
    """
    ref, _ = shift_scale(chi_ref)
    test, _ = shift_scale(chi_test)
    return float(np.max(np.abs(ref - gauge_align(ref, test))))


def chi_stratified_resample(candidates, chi_values, k: int, rng: np.random.Generator | None = None):
    """Pick ``k`` candidates spread evenly over the chi-levels.

    [0, 1] is split into ``k`` bins; each non-empty bin contributes the
    candidate closest to its centre; the remaining slots are filled at random
    from the leftovers, never putting more than ``ceil(2k / n_nonempty)``
    picks into one bin while other leftovers exist.
    """
    cand = np.asarray(candidates, dtype=np.float64)
    chi = np.asarray(chi_values, dtype=np.float64).ravel()
    if cand.shape[0] != chi.size:
        raise ValueError("candidates and chi_values differ in length")
    if k > chi.size:
        raise ValueError(f"cannot select {k} points from {chi.size} candidates")
    rng = rng or np.random.default_rng(0)
    bins = np.clip(np.floor(chi * k).astype(np.int64), 0, k - 1)
    chosen = []
    for j in np.unique(bins):
        members = np.nonzero(bins == j)[0]
        centre = (j + 0.5) / k
        chosen.append(int(members[np.argmin(np.abs(chi[members] - centre))]))
    n_nonempty = len(chosen)
    cap = math.ceil(2 * k / n_nonempty)
    load = np.bincount(bins[chosen], minlength=k)
    taken = np.zeros(chi.size, dtype=bool)
    taken[chosen] = True
    order = rng.permutation(np.nonzero(~taken)[0])
    skipped = []
    for idx in order:
        if len(chosen) == k:
            break
        if load[bins[idx]] >= cap:
            skipped.append(idx)
            continue
        chosen.append(int(idx))
        load[bins[idx]] += 1
    # only reachable when every remaining leftover sits in a full bin
    chosen += [int(i) for i in skipped[: k - len(chosen)]]
    return cand[np.array(chosen[:k])]


def _start_points(system, model, cfg: LoopConfig, box, rng) -> np.ndarray:
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    if cfg.resample_mode == "uniform_box":
        return lo + (hi - lo) * rng.random((cfg.n_points, system.dim))
    cand = lo + (hi - lo) * rng.random((cfg.candidate_factor * cfg.n_points, system.dim))
    return chi_stratified_resample(cand, model(cand), cfg.n_points, rng)


def run_isokann(system: PotentialSystem, model: ChiModel, loop_cfg: LoopConfig, sim_cfg: SimConfig,
                seed: int | None = None, opt: OptimizerState | None = None,
                on_iteration: Callable[[int, ChiModel, OptimizerState, IterationRecord], None] | None = None):
    """Run the power iteration and return ``(model, report)``.

    ``model`` is trained in place. ``on_iteration`` is called after each
    outer iteration (used for per-iteration checkpoints).
    """
    if model.dim != system.dim:
        raise ValueError(f"model dim {model.dim} != system dim {system.dim}")
    seed = sim_cfg.master_seed if seed is None else seed
    opt = opt or OptimizerState.for_model(model)
    box = loop_cfg.box or system.box
    grid = (default_validation_grid(system, box) if loop_cfg.validation_grid is None
            else np.asarray(loop_cfg.validation_grid, dtype=np.float64).reshape(-1, system.dim))
    tau = sim_cfg.tau
    report = LoopReport()
    shift_params = None

    for it in range(loop_cfg.n_outer):
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(seed, it, 0))
        points = _start_points(system, model, loop_cfg, box, rng)
        cfg_it = SimConfig(sim_cfg.dt, sim_cfg.n_steps, derive_seed(seed, it, 1))

        control = None
        if it >= loop_cfg.is_enabled_after and shift_params is not None:
            control = optimal_control_from_chi(model, shift_params, system.sigma,
                                               loop_cfg.control_u_max,
                                               time_dependent=loop_cfg.time_dependent_control)
        batch = estimate_points(system, model, points, loop_cfg.m_shots, cfg_it, control=control)
        keep = ~batch.diverged
        if not np.all(keep):
            log.warning("iteration %d: dropped %d diverged start points", it, int(np.sum(~keep)))
            if np.mean(keep) < loop_cfg.min_survival:
                raise DivergenceError(
                    f"iteration {it}: only {int(np.sum(keep))}/{len(keep)} start points survived")
        points, means = points[keep], batch.means[keep]

        chi_old = model(points)
        try:
            fit_params = affine_fit(chi_old, means, tau=tau)
            targets, shift_params = shift_scale(means, mode=loop_cfg.shift_mode,
                                                p=loop_cfg.shift_percentile, tau=tau)
        except DegeneracyError as exc:
            raise DegeneracyError(f"iteration {it}: chi collapsed to a constant ({exc})") from exc

        before = model(grid)
        if loop_cfg.reinit_each_iter:
            fresh = init_model(model.dims, derive_seed(seed, it, 2))
            model.set_flat(fresh.flat())
            opt = OptimizerState.for_model(model, opt.lr, opt.beta1, opt.beta2, opt.eps)
        loss = fit(model, opt, points, targets, loop_cfg.epochs_per_iter)
        after = model(grid)
        change = float(np.max(np.abs(gauge_align(before, after) - before)))

        ess = float("nan")
        if control is not None:
            ess = float(np.mean([
                effective_sample_size(batch.log_weights[i][batch.fail_step[i] < 0])
                for i in np.nonzero(keep)[0]
            ]))
        rec = IterationRecord(it, batch.method, shift_params, fit_params, loss, change, ess,
                              int(np.sum(keep)), time.perf_counter() - t0)
        report.records.append(rec)
        log.info("iter %3d %-10s a_fit=%.5f b_fit=%.5f loss=%.3e change=%.4f ess=%.1f",
                 it, batch.method, fit_params.a, fit_params.b, loss, change, ess)
        if on_iteration is not None:
            on_iteration(it, model, opt, rec)
        if it + 1 >= loop_cfg.min_outer and change < loop_cfg.conv_tol:
            report.converged = True
            break
    return model, report
